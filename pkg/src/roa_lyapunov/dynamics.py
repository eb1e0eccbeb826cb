"""Discrete-time closed-loop systems.

The benchmark is an inverted pendulum with a torque limit, integrated with
explicit Euler and stabilized by a saturated linear (LQR) state feedback.
States are ``[angle, angular velocity]`` with the angle measured from the
upright equilibrium. Angles are never wrapped, so a pendulum that falls over
drifts out of the domain instead of reappearing on the other side.

Everything here is vectorized over a leading batch axis: a state array of
shape ``(n, d)`` is stepped row by row.
"""
from __future__ import annotations

import dataclasses
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, SolverError


@dataclasses.dataclass(frozen=True)
class PendulumParams:
    """Physical constants of the inverted pendulum.

    ``torque_limit`` defaults to 80% of the largest gravity torque ``m g l``,
    so the controller cannot hold the pendulum beyond roughly 53 degrees.
    """

    mass: float = 0.25
    length: float = 0.5
    gravity: float = 9.81
    friction: float = 0.1
    torque_limit: float = 0.8 * 0.25 * 9.81 * 0.5
    dt: float = 0.01

    def __post_init__(self):
        for name in ("mass", "length", "gravity", "dt", "torque_limit"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be positive, got {value}")
        if not np.isfinite(self.friction) or self.friction < 0:
            raise DomainError(f"friction must be non-negative, got {self.friction}")

    @property
    def inertia(self) -> float:
        return self.mass * self.length**2


@dataclasses.dataclass(frozen=True)
class LinearPolicy:
    """Saturated linear feedback ``u = clip(K x, -torque_limit, torque_limit)``."""

    gain: np.ndarray
    torque_limit: float

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        if not np.all(np.isfinite(gain)):
            raise DomainError("policy gain must be finite")
        if not self.torque_limit > 0:
            raise DomainError("torque_limit must be positive")
        object.__setattr__(self, "gain", gain)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        u = np.clip(np.asarray(x, dtype=float) @ self.gain.T, -self.torque_limit, self.torque_limit)
        return u


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite {what}")


def pendulum_derivative(x, u, params: PendulumParams) -> np.ndarray:
    """Time derivative ``(theta_dot, (m g l sin(theta) - beta theta_dot + u) / (m l^2))``.

    ``x`` has shape ``(..., 2)`` and ``u`` broadcasts against ``x[..., 0]``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, "state")
    _check_finite(u, "torque")
    theta, omega = x[..., 0], x[..., 1]
    p = params
    accel = (p.mass * p.gravity * p.length * np.sin(theta) - p.friction * omega + u) / p.inertia
    return np.stack(np.broadcast_arrays(omega, accel), axis=-1)


def step_closed_loop(x, policy: LinearPolicy, params: PendulumParams) -> np.ndarray:
    """One explicit-Euler step of the pendulum under the saturated policy."""
    x = np.asarray(x, dtype=float)
    _check_finite(x, "state")
    u = policy(x)[..., 0]
    assert np.all(np.abs(u) <= policy.torque_limit), "saturation violated"
    return x + params.dt * pendulum_derivative(x, u, params)


def linearize_discretize(params: PendulumParams):
    """Euler-discretized linearization ``(A, B)`` of the pendulum at the origin.

    Matches :func:`step_closed_loop` exactly in the unsaturated region up to
    the ``sin(theta) ~ theta`` approximation.
    """
    p = params
    a_c = np.array([[0.0, 1.0], [p.gravity / p.length, -p.friction / p.inertia]])
    b_c = np.array([[0.0], [1.0 / p.inertia]])
    return np.eye(2) + p.dt * a_c, p.dt * b_c


@dataclasses.dataclass(frozen=True)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    iterations: int = 0

    def policy(self, torque_limit: float) -> LinearPolicy:
        """The saturated feedback ``u = -K x``."""
        return LinearPolicy(-self.K, torque_limit)


def riccati_residual(A, B, Q, R, P) -> float:
    """Spectral norm of the discrete algebraic Riccati equation residual."""
    bp = B.T @ P
    res = A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(R + bp @ B, bp @ A) + Q
    return float(np.linalg.norm(res, 2))


def solve_lqr(A, B, Q, R, tol: float = 1e-10, max_iter: int = 200_000) -> LqrSolution:
    """Infinite-horizon discrete LQR by fixed-point iteration of the Riccati recursion.

    Starts from ``P = Q`` and iterates until the residual drops to ``tol``.
    Raises :class:`SolverError` when the iteration does not converge or the
    resulting closed loop ``A - B K`` is not Schur stable.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.T
    P = Q.copy()
    for it in range(1, max_iter + 1):
        bp = B.T @ P
        P_next = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + bp @ B, bp @ A) + Q
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise SolverError("Riccati iteration diverged; is (A, B) stabilizable?")
        delta = np.linalg.norm(P_next - P, 2)
        P = P_next
        if delta <= tol and riccati_residual(A, B, Q, R, P) <= tol:
            break
    else:
        raise SolverError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    radius = np.max(np.abs(np.linalg.eigvals(A - B @ K)))
    if radius >= 1.0:
        raise SolverError(f"LQR closed loop is not stable (spectral radius {radius:.6f})")
    return LqrSolution(P=P, K=K, Q=Q, R=R, iterations=it)


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(M)))))


@dataclasses.dataclass(frozen=True)
class ClosedLoopSystem:
    """A deterministic map ``x_{t+1} = f(x_t)`` on a box-shaped domain.

    ``lipschitz`` bounds ``f`` on the domain and ``increment_lipschitz`` bounds
    the increment ``f(x) - x``; the latter is what the local certificate uses.
    ``state_scale`` converts the working coordinates back to physical units
    (``physical = x * state_scale``) for reporting only.
    """

    step: Callable[[np.ndarray], np.ndarray]
    domain: np.ndarray
    lipschitz: float
    increment_lipschitz: Optional[float] = None
    state_scale: Optional[np.ndarray] = None
    name: str = "system"
    # optional (points, radius) -> (L_f, L_g) arrays valid on each ball B(point, radius)
    local_lipschitz: Optional[Callable] = None

    def __post_init__(self):
        domain = np.atleast_2d(np.asarray(self.domain, dtype=float))
        object.__setattr__(self, "domain", domain)
        scale = np.ones(self.dim) if self.state_scale is None else np.asarray(self.state_scale, float)
        object.__setattr__(self, "state_scale", scale)
        if self.increment_lipschitz is None:
            object.__setattr__(self, "increment_lipschitz", self.lipschitz + 1.0)
        if not self.lipschitz > 0:
            raise DomainError("lipschitz bound must be positive")
        origin = self(np.zeros((1, self.dim)))
        if np.max(np.abs(origin)) > 1e-12:
            raise DomainError("the origin must be an equilibrium of the closed loop")

    @property
    def dim(self) -> int:
        return self.domain.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.step(np.asarray(x, dtype=float))

    def lipschitz_on_balls(self, points, radius):
        """Per-point bounds ``(L_f, L_g)`` on balls; the global constants when no local rule exists."""
        n = np.atleast_2d(points).shape[0]
        glob = (np.full(n, self.lipschitz), np.full(n, self.increment_lipschitz))
        if self.local_lipschitz is None:
            return glob
        L_f, L_g = self.local_lipschitz(points, radius)
        return np.minimum(L_f, glob[0]), np.minimum(L_g, glob[1])

    def simulate(self, x0: np.ndarray, steps: int) -> np.ndarray:
        """Trajectories of shape ``(steps + 1, n, d)``."""
        x = np.atleast_2d(np.asarray(x0, dtype=float))
        out = np.empty((steps + 1,) + x.shape)
        out[0] = x
        for t in range(steps):
            x = self(x)
            out[t + 1] = x
        return out


def _cos_range(lo: float, hi: float):
    """Range of cos(theta) over the interval [lo, hi]."""
    vals = [np.cos(lo), np.cos(hi)]
    k_lo, k_hi = np.ceil(lo / np.pi), np.floor(hi / np.pi)
    for k in np.arange(k_lo, k_hi + 1):
        vals.append(np.cos(k * np.pi))
    return min(vals), max(vals)


def _pendulum_jacobians(policy, params, domain, scale, include_identity):
    """Clarke-Jacobian extreme points of the step (or the increment) map.

    The Jacobian is affine in ``cos(theta)`` and in the saturation slope
    ``k in [0, 1]``; the spectral norm is convex, so its supremum over the
    domain is attained at one of the four combinations returned here.
    """
    p = params
    gain = policy.gain[0]
    cmin, cmax = _cos_range(*domain[0])
    S = np.diag(scale)
    S_inv = np.diag(1.0 / scale)
    mats = []
    for c, k in itertools.product((cmin, cmax), (0.0, 1.0)):
        jac_c = np.array(
            [
                [0.0, 1.0],
                [
                    (p.gravity / p.length) * c + k * gain[0] / p.inertia,
                    (-p.friction + k * gain[1]) / p.inertia,
                ],
            ]
        )
        J = p.dt * jac_c
        if include_identity:
            J = J + np.eye(2)
        mats.append(S_inv @ J @ S)
    return mats


def _norm2x2(a, b, c, d):
    """Spectral norms of the 2x2 matrices ``[[a, b], [c, d]]`` (vectorized)."""
    fro = a * a + b * b + c * c + d * d
    det = a * d - b * c
    return np.sqrt(0.5 * (fro + np.sqrt(np.maximum(fro * fro - 4.0 * det * det, 0.0))))


def pendulum_local_lipschitz(policy, params, scale, points, radius):
    """Per-point ``(L_f, L_g)`` of the pendulum step on balls around ``points`` (working coordinates).

    Same corner argument as the global bound, restricted to the range of
    ``cos(theta)`` on each ball and to the saturation slopes that can occur
    there (only 1 if the linear control stays inside the limits, only 0 if
    it saturates everywhere on the ball).
    """
    p = params
    scale = np.asarray(scale, dtype=float)
    z = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.broadcast_to(np.asarray(radius, dtype=float), (z.shape[0],))
    theta = z[:, 0] * scale[0]
    half = r * scale[0]
    lo, hi = theta - half, theta + half
    # extremes of cos on [lo, hi]: endpoints, plus +-1 if a multiple of pi lies inside
    cos_lo, cos_hi = np.cos(lo), np.cos(hi)
    cmin = np.minimum(cos_lo, cos_hi)
    cmax = np.maximum(cos_lo, cos_hi)
    k_first = np.ceil(lo / np.pi)
    has_k = k_first <= np.floor(hi / np.pi)
    has_even = has_k & ((np.mod(k_first, 2) == 0) | (k_first + 1 <= np.floor(hi / np.pi)))
    has_odd = has_k & ((np.mod(k_first, 2) == 1) | (k_first + 1 <= np.floor(hi / np.pi)))
    cmax = np.where(has_even, 1.0, cmax)
    cmin = np.where(has_odd, -1.0, cmin)

    gain = policy.gain[0]
    gain_w = gain * scale
    u = z @ gain_w
    spread = np.linalg.norm(gain_w) * r
    ubar = policy.torque_limit
    can_lin = (u - spread < ubar) & (u + spread > -ubar)
    can_sat = (u + spread >= ubar) | (u - spread <= -ubar)

    dt, inertia = p.dt, p.inertia
    s0, s1 = scale
    L_f = np.zeros(z.shape[0])
    L_g = np.zeros(z.shape[0])
    for c in (cmin, cmax):
        for k, allowed in ((0.0, can_sat), (1.0, can_lin)):
            # increment Jacobian in working coordinates: S^-1 (dt J_c) S
            a = np.zeros_like(c)
            b = np.full_like(c, dt * s1 / s0)
            cc = dt * ((p.gravity / p.length) * c + k * gain[0] / inertia) * s0 / s1
            d = np.full_like(c, dt * (-p.friction + k * gain[1]) / inertia)
            ng = _norm2x2(a, b, cc, d)
            nf = _norm2x2(a + 1.0, b, cc, d + 1.0)
            L_g = np.where(allowed, np.maximum(L_g, ng), L_g)
            L_f = np.where(allowed, np.maximum(L_f, nf), L_f)
    return L_f, L_g


def lipschitz_bound_system(policy, params, domain, scale=None) -> float:
    """Upper bound on the Lipschitz constant of the closed-loop step on ``domain``.

    ``domain`` is given in physical units; ``scale`` (per-coordinate) selects
    the working coordinates ``x / scale`` in which the norm is measured.
    """
    domain = np.asarray(domain, dtype=float)
    scale = np.ones(2) if scale is None else np.asarray(scale, dtype=float)
    mats = _pendulum_jacobians(policy, params, domain, scale, include_identity=True)
    return max(float(np.linalg.norm(J, 2)) for J in mats)


def increment_lipschitz_bound(policy, params, domain, scale=None) -> float:
    """Upper bound on the Lipschitz constant of ``x -> f(x) - x`` on ``domain``."""
    domain = np.asarray(domain, dtype=float)
    scale = np.ones(2) if scale is None else np.asarray(scale, dtype=float)
    mats = _pendulum_jacobians(policy, params, domain, scale, include_identity=False)
    return max(float(np.linalg.norm(J, 2)) for J in mats)


PENDULUM_DOMAIN = np.array([[-np.pi, np.pi], [-2.0 * np.pi, 2.0 * np.pi]])


def pendulum_system(
    params: PendulumParams,
    policy: LinearPolicy,
    domain=PENDULUM_DOMAIN,
    normalize: bool = True,
) -> ClosedLoopSystem:
    """Closed-loop pendulum as a :class:`ClosedLoopSystem`.

    With ``normalize=True`` the system works in coordinates scaled by the
    domain half-widths, so the domain becomes ``[-1, 1]^2`` (for the default
    domain: angle / pi and velocity / 2 pi).
    """
    domain = np.asarray(domain, dtype=float)
    if normalize:
        scale = np.max(np.abs(domain), axis=1)
    else:
        scale = np.ones(2)

    def step(z):
        return step_closed_loop(z * scale, policy, params) / scale

    return ClosedLoopSystem(
        step=step,
        domain=domain / scale[:, None],
        lipschitz=lipschitz_bound_system(policy, params, domain, scale),
        increment_lipschitz=increment_lipschitz_bound(policy, params, domain, scale),
        state_scale=scale,
        name="pendulum",
        local_lipschitz=lambda pts, r: pendulum_local_lipschitz(policy, params, scale, pts, r),
    )


def linear_system(A, domain: Sequence[Sequence[float]], name: str = "linear") -> ClosedLoopSystem:
    """The linear map ``f(x) = A x`` with exact Lipschitz constants."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return ClosedLoopSystem(
        step=lambda x: x @ A.T,
        domain=np.asarray(domain, dtype=float),
        lipschitz=max(float(np.linalg.norm(A, 2)), np.finfo(float).tiny),
        increment_lipschitz=float(np.linalg.norm(A - np.eye(A.shape[0]), 2)),
        name=name,
    )


def lqr_pendulum(params: PendulumParams, Q=None, R=None) -> LqrSolution:
    """LQR solution for the linearized, discretized, unconstrained pendulum."""
    A, B = linearize_discretize(params)
    Q = np.eye(2) if Q is None else Q
    R = np.eye(1) if R is None else R
    return solve_lqr(A, B, Q, R)
