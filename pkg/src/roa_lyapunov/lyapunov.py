"""Lyapunov candidates.

Two families share one duck-typed interface (:class:`Candidate`):

* :class:`LyapunovNet`, ``v(x) = |phi(x)|^2`` where ``phi`` is a feed-forward
  network whose weight matrices are built as ``[G1^T G1 + eps I; G2]``.
  Every such matrix has full column rank and every activation used here
  maps only zero to zero, so ``v`` is positive definite for any parameters.
* :class:`QuadraticCandidate`, ``v(x) = x^T P x`` (the LQR baseline).

Gradients of the training loss are computed by a hand-written reverse pass
through the network; there is no general autodiff machinery.
"""
from __future__ import annotations

import dataclasses
import json
import math
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ConstructionError, NumericError, SolverError

# max |tanh''(z)| = 4 / (3 sqrt(3)), attained at tanh(z) = 1/sqrt(3)
TANH_CURVATURE = 4.0 / (3.0 * math.sqrt(3.0))
_TANH_CURV_ARGMAX = math.atanh(1.0 / math.sqrt(3.0))


class Candidate(Protocol):
    name: str

    def value(self, x: np.ndarray) -> np.ndarray: ...

    def input_gradient(self, x: np.ndarray) -> np.ndarray: ...

    def lipschitz_bound(self, domain: np.ndarray) -> float: ...

    def gradient_bound(self, x: np.ndarray, radius) -> np.ndarray: ...

    def hessian_bound(self, x: np.ndarray, radius) -> Optional[np.ndarray]: ...


def spectral_norm(W: np.ndarray, max_iter: int = 100, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value of ``W`` by power iteration on ``W^T W``.

    Stops when the relative change of the estimate falls below ``tol``.
    Raises :class:`SolverError` if ``max_iter`` iterations leave the estimate
    still moving by more than ``1e-6`` (relative).
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.any(W):
        return 0.0
    u = np.random.default_rng(seed).standard_normal(W.shape[1])
    u /= np.linalg.norm(u)
    sigma = 0.0
    change = np.inf
    for _ in range(max_iter):
        w = W.T @ (W @ u)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector in the nullspace; restart from a fresh one
            u = np.ones(W.shape[1]) / math.sqrt(W.shape[1])
            continue
        u = w / norm
        new_sigma = math.sqrt(norm)
        change = abs(new_sigma - sigma) / new_sigma
        sigma = new_sigma
        if change < tol:
            break
    if not np.isfinite(sigma) or change > 1e-6:
        raise SolverError(f"power iteration did not converge (relative change {change:.2e})")
    return sigma


def _tanh_prime(z):
    t = np.tanh(z)
    return 1.0 - t * t


@dataclasses.dataclass
class StructuredLayer:
    """One layer ``y -> act(W y)`` with ``W = [G1^T G1 + eps I; G2]``.

    ``G1`` has ``ceil((d_in + 1) / 2)`` rows, the smallest count that leaves
    every entry of the symmetric block ``G1^T G1`` free. ``G2`` is ``None``
    when the layer keeps the dimension.
    """

    G1: np.ndarray
    G2: Optional[np.ndarray]
    eps: float = 1e-2
    activation: str = "tanh"
    slope: float = 0.01

    def __post_init__(self):
        self.G1 = np.atleast_2d(np.asarray(self.G1, dtype=float))
        d_in = self.G1.shape[1]
        if self.G1.shape[0] != rows_for(d_in):
            raise ConstructionError(
                f"G1 must have {rows_for(d_in)} rows for input dimension {d_in}, got {self.G1.shape[0]}"
            )
        if self.G2 is not None:
            self.G2 = np.atleast_2d(np.asarray(self.G2, dtype=float))
            if self.G2.shape[1] != d_in:
                raise ConstructionError("G2 must have as many columns as G1")
            if self.G2.shape[0] == 0:
                self.G2 = None
        if not self.eps > 0:
            raise ConstructionError("eps must be positive")
        if self.activation not in ("tanh", "leaky_relu"):
            raise ConstructionError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not self.slope > 0:
            raise ConstructionError("leaky-relu slope must be positive")

    @property
    def d_in(self) -> int:
        return self.G1.shape[1]

    @property
    def d_out(self) -> int:
        return self.d_in + (0 if self.G2 is None else self.G2.shape[0])

    @property
    def weight(self) -> np.ndarray:
        return assemble_weight(self)

    def act(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        return np.where(z > 0, z, self.slope * z)

    def act_prime(self, z):
        if self.activation == "tanh":
            return _tanh_prime(z)
        return np.where(z > 0, 1.0, self.slope)

    @property
    def act_lipschitz(self) -> float:
        return 1.0 if self.activation == "tanh" else max(1.0, self.slope)

    @property
    def act_curvature(self) -> Optional[float]:
        """Bound on ``|act''|``; ``None`` for activations that are not C^1."""
        return TANH_CURVATURE if self.activation == "tanh" else None

    def copy(self) -> "StructuredLayer":
        return StructuredLayer(
            self.G1.copy(), None if self.G2 is None else self.G2.copy(), self.eps, self.activation, self.slope
        )


def rows_for(d_in: int) -> int:
    return math.ceil((d_in + 1) / 2)


def assemble_weight(layer: StructuredLayer) -> np.ndarray:
    """Stack ``G1^T G1 + eps I`` on top of ``G2``; smallest singular value is at least eps."""
    top = layer.G1.T @ layer.G1 + layer.eps * np.eye(layer.d_in)
    if layer.G2 is None:
        return top
    return np.vstack([top, layer.G2])


def make_layer(d_in, d_out, rng, eps=1e-2, activation="tanh", slope=0.01, scale=None) -> StructuredLayer:
    """Layer with entries drawn uniformly from ``[-s, s]``, ``s = 1 / sqrt(d_in)`` by default."""
    if d_out < d_in:
        raise ConstructionError(f"layer cannot shrink the dimension ({d_in} -> {d_out})")
    s = 1.0 / math.sqrt(d_in) if scale is None else scale
    G1 = rng.uniform(-s, s, size=(rows_for(d_in), d_in))
    G2 = rng.uniform(-s, s, size=(d_out - d_in, d_in)) if d_out > d_in else None
    return StructuredLayer(G1, G2, eps, activation, slope)


class LyapunovNet:
    """``v(x) = |phi(x)|^2`` for a structured feed-forward ``phi``.

    Evaluation methods take a batch ``x`` of shape ``(n, d)``; a single state
    of shape ``(d,)`` is promoted to a batch of one.
    """

    name = "nn"

    def __init__(self, layers: Sequence[StructuredLayer]):
        self.layers = list(layers)
        if not self.layers:
            raise ConstructionError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.d_in != prev.d_out:
                raise ConstructionError(f"layer dimensions do not chain ({prev.d_out} -> {nxt.d_in})")

    @classmethod
    def random(cls, input_dim, widths=(64, 64, 64), rng=None, eps=1e-2, activation="tanh", slope=0.01):
        rng = np.random.default_rng() if rng is None else rng
        dims = [input_dim, *widths]
        layers = [make_layer(a, b, rng, eps, activation, slope) for a, b in zip(dims, dims[1:])]
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def widths(self) -> List[int]:
        return [layer.d_out for layer in self.layers]

    def weights(self) -> List[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def copy(self) -> "LyapunovNet":
        return LyapunovNet([layer.copy() for layer in self.layers])

    # -- evaluation --------------------------------------------------------

    def _forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ys, zs = [x], []
        for layer in self.layers:
            z = ys[-1] @ layer.weight.T
            zs.append(z)
            ys.append(layer.act(z))
        return ys, zs

    def features(self, x) -> np.ndarray:
        return self._forward(x)[0][-1]

    def value(self, x) -> np.ndarray:
        phi = self.features(x)
        return np.einsum("ij,ij->i", phi, phi)

    def input_gradient(self, x) -> np.ndarray:
        """``grad_x v = 2 J_phi(x)^T phi(x)``, one row per state."""
        ys, zs = self._forward(x)
        delta = 2.0 * ys[-1]
        for layer, z in zip(reversed(self.layers), reversed(zs)):
            delta = (delta * layer.act_prime(z)) @ layer.weight
        return delta

    def backward(self, x, coef) -> List[Tuple[np.ndarray, Optional[np.ndarray]]]:
        """Parameter gradient of ``sum_i coef[i] * v(x_i)`` as ``[(dG1, dG2), ...]``."""
        ys, zs = self._forward(x)
        delta = 2.0 * ys[-1] * np.asarray(coef, dtype=float)[:, None]
        grads = []
        for layer, y_prev, z in zip(reversed(self.layers), reversed(ys[:-1]), reversed(zs)):
            dz = delta * layer.act_prime(z)
            dW = dz.T @ y_prev
            delta = dz @ layer.weight
            d_in = layer.d_in
            top = dW[:d_in]
            dG1 = layer.G1 @ (top + top.T)
            dG2 = None if layer.G2 is None else dW[d_in:]
            grads.append((dG1, dG2))
        return grads[::-1]

    # -- bounds ------------------------------------------------------------

    def feature_lipschitz(self) -> float:
        """Global Lipschitz bound of ``phi``: product of spectral norms and activation constants."""
        out = 1.0
        for layer in self.layers:
            out *= spectral_norm(layer.weight) * layer.act_lipschitz
        return out

    def feature_curvature(self) -> Optional[float]:
        """Bound ``M`` with ``|D^2 phi(x)[u, u]| <= M |u|^2`` everywhere, or ``None``.

        Follows ``M_l <= c_l |W_l|^2 L_{l-1}^2 + |W_l| M_{l-1}`` where ``c_l``
        bounds the second derivative of the activation.
        """
        lip, curv = 1.0, 0.0
        for layer in self.layers:
            c = layer.act_curvature
            if c is None:
                return None
            w = spectral_norm(layer.weight)
            curv = c * (w * lip) ** 2 + w * curv
            lip = w * lip * layer.act_lipschitz
        return curv

    def lipschitz_bound(self, domain) -> float:
        """Lipschitz bound of ``v`` on a box containing the origin: ``2 L_phi^2 max|x|``."""
        lip = self.feature_lipschitz()
        return 2.0 * lip**2 * _max_norm(domain)

    def ball_bounds(self, x, radius):
        """Bounds on ``phi`` and its derivatives over the balls ``B(x_i, radius_i)``.

        Returns ``(phi_sup, jac_sup, curv_sup)``: suprema over each ball of
        ``|phi|``, of the Jacobian norm, and of ``|D^2 phi[u, u]|`` for unit
        ``u`` (``curv_sup`` is ``None`` when some activation is not C^2).

        For smooth nets the bounds are propagated layer by layer from the
        exact Jacobian at the centre: a pre-activation ``z_j`` moves by at
        most ``|W_j| dev`` on the ball, which caps ``|act''|`` for that neuron,
        and the Jacobian moves by at most ``curv * radius``. Otherwise global
        spectral-norm products are used.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.broadcast_to(np.asarray(radius, dtype=float), (x.shape[0],))
        norms = [spectral_norm(layer.weight) for layer in self.layers]
        if any(layer.activation != "tanh" for layer in self.layers):
            lip = float(np.prod([w * layer.act_lipschitz for w, layer in zip(norms, self.layers)]))
            phi_sup = np.linalg.norm(self.features(x), axis=1) + lip * r
            return phi_sup, np.full(x.shape[0], lip), None

        n, d = x.shape
        y = x
        # Jacobian stored transposed, shape (n, d, width)
        jac_t = np.broadcast_to(np.eye(d), (n, d, d))
        jac_sup = np.ones(n)
        curv = np.zeros(n)
        dev = r.copy()
        for layer, w_norm in zip(self.layers, norms):
            W = layer.weight
            row_norm = np.linalg.norm(W, axis=1)
            z = y @ W.T
            wj = (jac_t.reshape(n * d, -1) @ W.T).reshape(n, d, -1)
            # per-neuron bound on |(W J u)_j| over the ball
            a_sup = np.sqrt(np.sum(wj * wj, axis=1)) + row_norm * (curv * r)[:, None]
            z_sup = np.abs(z) + row_norm * dev[:, None]
            t = np.tanh(np.minimum(z_sup, _TANH_CURV_ARGMAX))
            s = 2.0 * t * (1.0 - t * t)
            curv = np.sqrt(np.sum((s * a_sup * a_sup) ** 2, axis=1)) + w_norm * curv
            y = np.tanh(z)
            jac_t = wj * (1.0 - y * y)[:, None, :]
            jac_sup = np.minimum(w_norm * jac_sup, _batched_norm(jac_t) + curv * r)
            dev = np.minimum(jac_sup * r, w_norm * dev)
        phi_sup = np.linalg.norm(y, axis=1) + dev
        return phi_sup, jac_sup, curv

    def hessian_bound(self, x, radius) -> Optional[np.ndarray]:
        """Bound on the Hessian norm of ``v`` over balls ``B(x_i, radius_i)``; ``None`` if not C^2."""
        phi_sup, jac_sup, curv = self.ball_bounds(x, radius)
        if curv is None:
            return None
        return 2.0 * jac_sup**2 + 2.0 * phi_sup * curv

    def gradient_bound(self, x, radius) -> np.ndarray:
        """Bound on ``|grad v|`` over balls ``B(x_i, radius_i)``."""
        phi_sup, jac_sup, curv = self.ball_bounds(x, radius)
        bound = 2.0 * jac_sup * phi_sup
        if curv is not None:
            hess = 2.0 * jac_sup**2 + 2.0 * phi_sup * curv
            grad = np.linalg.norm(self.input_gradient(x), axis=1)
            bound = np.minimum(bound, grad + hess * np.asarray(radius, dtype=float))
        return bound

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "roa_lyapunov.LyapunovNet/1",
            "input_dim": self.input_dim,
            "layers": [
                {
                    "d_in": layer.d_in,
                    "d_out": layer.d_out,
                    "eps": layer.eps,
                    "activation": layer.activation,
                    "slope": layer.slope,
                    "G1": layer.G1.ravel().tolist(),
                    "G2": [] if layer.G2 is None else layer.G2.ravel().tolist(),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LyapunovNet":
        layers = []
        for spec in data["layers"]:
            d_in, d_out = int(spec["d_in"]), int(spec["d_out"])
            G1 = np.array(spec["G1"], dtype=float).reshape(rows_for(d_in), d_in)
            G2 = np.array(spec["G2"], dtype=float).reshape(d_out - d_in, d_in) if d_out > d_in else None
            layers.append(StructuredLayer(G1, G2, float(spec["eps"]), spec["activation"], float(spec["slope"])))
        net = cls(layers)
        if net.input_dim != int(data["input_dim"]):
            raise ConstructionError("input_dim does not match the first layer")
        return net

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "LyapunovNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _batched_norm(J_t) -> np.ndarray:
    """Spectral norms of a stack of transposed Jacobians ``(n, d, m)`` with small ``d``."""
    d = J_t.shape[1]
    gram = np.empty((J_t.shape[0], d, d))
    for a in range(d):
        for b in range(a, d):
            gram[:, a, b] = gram[:, b, a] = np.sum(J_t[:, a, :] * J_t[:, b, :], axis=1)
    return np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0))


def _max_norm(domain) -> float:
    """Largest Euclidean norm over a box (attained at the farthest corner)."""
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    return float(np.linalg.norm(np.max(np.abs(domain), axis=1)))


class QuadraticCandidate:
    """``v(x) = x^T P x`` with ``P`` symmetric positive definite."""

    name = "lqr"

    def __init__(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if not np.allclose(P, P.T, rtol=1e-12, atol=0):
            raise ConstructionError("P must be symmetric")
        P = 0.5 * (P + P.T)
        eig = np.linalg.eigvalsh(P)
        if eig[0] <= 0:
            raise ConstructionError("P must be positive definite")
        self.P = P
        self._norm = float(eig[-1])

    def value(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.einsum("ij,jk,ik->i", x, self.P, x)

    def input_gradient(self, x) -> np.ndarray:
        return 2.0 * np.atleast_2d(np.asarray(x, dtype=float)) @ self.P

    def lipschitz_bound(self, domain) -> float:
        return 2.0 * self._norm * _max_norm(domain)

    def hessian_bound(self, x, radius) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], 2.0 * self._norm)

    def gradient_bound(self, x, radius) -> np.ndarray:
        grad = np.linalg.norm(self.input_gradient(x), axis=1)
        return grad + 2.0 * self._norm * np.asarray(radius, dtype=float)


def value_quadratic(P, x) -> np.ndarray:
    return QuadraticCandidate(P).value(x)


# -- training loss -------------------------------------------------------


def _loss_parts(v, v_next, labels, c_s, lam, delta, margin=None):
    labels = np.asarray(labels, dtype=float)
    classifier = np.maximum(0.0, -labels * (c_s - v))
    increase = v_next - v
    if margin is not None:
        increase = increase + margin
    weight = lam * (labels + 1.0) / 2.0
    decrease = weight * np.maximum(0.0, increase) / (v + delta)
    return classifier, decrease


def lagrangian_loss(net, states, labels, next_states, c_s=1.0, lam=1000.0, delta=None, margin=None):
    """Classifier and (normalized) decrease terms of the training objective, summed over the batch."""
    delta = 1e-3 * c_s if delta is None else delta
    cls_terms, dec_terms = _loss_parts(
        net.value(states), net.value(next_states), labels, c_s, lam, delta, margin
    )
    return float(cls_terms.sum()), float(dec_terms.sum())


def loss_and_gradient(
    net: LyapunovNet, states, labels, next_states, c_s=1.0, lam=1000.0, delta=None, margin=None
):
    """Lagrangian-relaxed perceptron loss and its gradient with respect to the parameters.

    For each state ``x`` with label ``y`` and successor ``x' = f(x)``::

        max(0, -y (c_s - v(x)))
          + lam * (y + 1) / 2 * max(0, v(x') - v(x)) / (v(x) + delta)

    summed over the batch. ``delta`` (default ``1e-3 c_s``) keeps the
    normalization finite at the origin. An optional per-sample ``margin``
    (held constant) replaces ``v(x') - v(x)`` by ``v(x') - v(x) + margin``,
    asking for the decrease the grid certificate will demand. Returns ``(loss, grads)`` where
    ``grads`` mirrors ``net.layers`` as ``(dG1, dG2)`` pairs.
    """
    if c_s <= 0 or lam <= 0:
        raise ValueError("c_s and lam must be positive")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
    labels = np.asarray(labels, dtype=float)
    if states.shape[0] == 0:
        raise ValueError("empty batch")
    delta = 1e-3 * c_s if delta is None else delta

    v = net.value(states)
    v_next = net.value(next_states)
    margin = None if margin is None else np.asarray(margin, dtype=float)
    cls_terms, dec_terms = _loss_parts(v, v_next, labels, c_s, lam, delta, margin)
    total = cls_terms + dec_terms
    bad = np.flatnonzero(~np.isfinite(total))
    if bad.size:
        raise NumericError(f"non-finite loss at sample {bad[0]}", index=int(bad[0]))

    # d loss / d v(x) and d loss / d v(x')
    cls_active = (-labels * (c_s - v)) > 0
    d_v = np.where(cls_active, labels, 0.0)
    weight = lam * (labels + 1.0) / 2.0
    excess = v_next - v if margin is None else v_next - v + margin
    dec_active = (excess > 0) & (weight > 0)
    denom = v + delta
    d_vnext = np.where(dec_active, weight / denom, 0.0)
    d_v = d_v + np.where(dec_active, -weight / denom - weight * excess / denom**2, 0.0)

    both = np.vstack([states, next_states])
    grads = net.backward(both, np.concatenate([d_v, d_vnext]))
    return float(total.sum()), grads


def sgd_step(net: LyapunovNet, grads, learning_rate: float) -> LyapunovNet:
    """Return a new network with ``G <- G - lr * dG`` for every trainable block; eps is fixed."""
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    layers = []
    for layer, (dG1, dG2) in zip(net.layers, grads):
        G1 = layer.G1 - learning_rate * dG1
        G2 = None if layer.G2 is None else layer.G2 - learning_rate * dG2
        layers.append(StructuredLayer(G1, G2, layer.eps, layer.activation, layer.slope))
    return LyapunovNet(layers)


def flatten_grads(grads) -> np.ndarray:
    parts = []
    for dG1, dG2 in grads:
        parts.append(dG1.ravel())
        if dG2 is not None:
            parts.append(dG2.ravel())
    return np.concatenate(parts)
