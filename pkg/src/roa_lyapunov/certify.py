"""Grid-based certification of safe level sets.

A level ``c`` is certified when every grid point ``x`` with ``v(x) <= c``
(outside a small ball of radius ``r0`` around the origin) satisfies the
tightened decrease condition ``dv(x) < -L * tau``, where ``tau`` is the fill
distance of the grid. Two ways of producing the right-hand side are offered:

``global``
    One constant ``L_dv = L_v (L_f + 1)`` built from global Lipschitz
    bounds of the candidate and the closed loop.
``local``
    A per-point bound on ``|dv(x) - dv(x_g)|`` over the cell ball
    ``|x - x_g| <= tau``. It writes ``f = id + g`` and bounds the variation
    of ``dv(x) = int_0^1 grad v(x + s g(x)) . g(x) ds`` with the gradient
    and Hessian of ``v`` on a ball around ``x_g`` and the Lipschitz constant
    of the increment ``g``. When the candidate is not twice differentiable
    it falls back to bounding ``v(f(x))`` and ``v(x)`` separately.

Both are sound; the local one is far less conservative for slow dynamics.
"""
from __future__ import annotations

import csv
import dataclasses
from typing import Optional, Sequence

import numpy as np

from .errors import ConstructionError


@dataclasses.dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid that includes the corners of the domain.

    Points are enumerated lexicographically, first coordinate slowest.
    """

    limits: np.ndarray
    counts: tuple

    def __post_init__(self):
        limits = np.atleast_2d(np.asarray(self.limits, dtype=float))
        counts = tuple(int(n) for n in np.broadcast_to(self.counts, (limits.shape[0],)))
        if limits.shape[1] != 2:
            raise ConstructionError("limits must have shape (d, 2)")
        if not np.all(np.isfinite(limits)) or np.any(limits[:, 1] <= limits[:, 0]):
            raise ConstructionError("every interval must be finite with lower < upper")
        if min(counts) < 2:
            raise ConstructionError("need at least two points per dimension")
        object.__setattr__(self, "limits", limits)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return self.limits.shape[0]

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return (self.limits[:, 1] - self.limits[:, 0]) / (np.array(self.counts) - 1)

    @property
    def tau(self) -> float:
        """Fill distance: half the diagonal of one cell."""
        return 0.5 * float(np.linalg.norm(self.spacing))

    @property
    def axes(self):
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.limits, self.counts)]

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def id(self) -> str:
        box = "x".join(f"[{lo:.6g},{hi:.6g}]" for lo, hi in self.limits)
        return f"{box}:{'x'.join(map(str, self.counts))}"

    def nearest_index(self, x) -> np.ndarray:
        """Flat index of the grid point closest to each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        steps = np.rint((x - self.limits[:, 0]) / self.spacing).astype(int)
        steps = np.clip(steps, 0, np.array(self.counts) - 1)
        return np.ravel_multi_index(steps.T, self.counts)


def build_grid(domain, points_per_dim) -> Grid:
    return Grid(np.asarray(domain, dtype=float), points_per_dim)


def decrease_margin(candidate, system, x) -> np.ndarray:
    """``dv(x) = v(f(x)) - v(x)``; points whose image is not finite get ``+inf``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    with np.errstate(all="ignore"):
        nxt = system(x)
        ok = np.all(np.isfinite(nxt), axis=1)
        dv = np.full(x.shape[0], np.inf)
        if np.any(ok):
            dv[ok] = candidate.value(nxt[ok]) - candidate.value(x[ok])
    dv[~np.isfinite(dv)] = np.inf
    return dv


def compose_lipschitz(L_v: float, L_f: float) -> float:
    """Lipschitz bound of ``dv = v o f - v`` from bounds on ``v`` and ``f``."""
    if not (L_v > 0 and L_f > 0):
        raise ValueError("Lipschitz bounds must be positive")
    return L_v * (L_f + 1.0)


def local_thresholds(candidate, system, points, tau: float) -> np.ndarray:
    """Per-point bound on ``|dv(x) - dv(x_g)|`` for ``|x - x_g| <= tau``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    with np.errstate(all="ignore"):
        nxt = system(points)
    incr = nxt - points
    g_norm = np.linalg.norm(incr, axis=1)
    L_f, L_g = system.lipschitz_on_balls(points, tau)
    out = np.full(points.shape[0], np.inf)
    ok = np.isfinite(g_norm)
    if not np.any(ok):
        return out
    x, g, fx = points[ok], g_norm[ok], nxt[ok]
    L_f, L_g = L_f[ok], L_g[ok]

    radius = tau * (1.0 + L_g) + g
    hess = candidate.hessian_bound(x, radius)
    # v(f(x)) and v(x) bounded separately; valid for any locally Lipschitz v
    split = (
        candidate.gradient_bound(fx, L_f * tau) * L_f * tau
        + candidate.gradient_bound(x, np.full(len(x), tau)) * tau
    )
    if hess is None:
        out[ok] = split
    else:
        grad = candidate.gradient_bound(x, radius)
        joint = grad * L_g * tau + hess * (1.0 + L_g) * tau * g
        out[ok] = np.minimum(joint, split)
    return out


@dataclasses.dataclass
class Certificate:
    """A certified level together with the grid evidence behind it.

    ``values``, ``delta_v`` and ``threshold`` cover the whole grid, so the
    certified points are ``values <= level``. ``lipschitz`` is the largest
    ``L_dv`` used (constant for the global rule).
    """

    level: float
    candidate: str
    grid_id: str
    lipschitz: float
    tau: float
    r0: float
    method: str
    values: np.ndarray
    delta_v: np.ndarray
    threshold: np.ndarray
    scanned: np.ndarray

    @property
    def certified(self) -> np.ndarray:
        return self.values <= self.level

    @property
    def margins(self) -> np.ndarray:
        """``dv + L tau`` at the certified points outside the origin ball (all negative)."""
        sel = self.certified & self.scanned
        return self.delta_v[sel] + self.threshold[sel]

    @property
    def empty(self) -> bool:
        return self.level <= 0.0


def largest_safe_level(candidate, system, grid: Grid, lipschitz, r0: float, method: str = "given") -> Certificate:
    """Largest ``c`` such that every scanned point with ``v <= c`` passes the decrease test.

    ``lipschitz`` is ``L_dv``: a scalar, or one value per grid point for a
    local rule. Points with ``|x| <= r0`` are skipped. The scan visits points
    in increasing ``v`` (ties broken by grid index) and stops at the first
    violator ``x*``, giving ``c = v(x*) (1 - 1e-9)``; a violating first point
    gives ``c = 0``, and no violator gives the largest grid value.
    """
    if r0 < 0:
        raise ValueError("r0 must be non-negative")
    pts = grid.points
    tau = grid.tau
    values = candidate.value(pts)
    dv = decrease_margin(candidate, system, pts)
    L = np.broadcast_to(np.asarray(lipschitz, dtype=float), values.shape)
    threshold = L * tau
    scanned = np.linalg.norm(pts, axis=1) > r0
    passes = dv < -threshold

    order = np.lexsort((np.arange(values.size), values))
    order = order[scanned[order]]
    fails = np.flatnonzero(~passes[order])
    if order.size == 0:
        level = float(values.max())
    elif fails.size == 0:
        level = float(values.max())
    elif fails[0] == 0:
        level = 0.0
    else:
        level = float(values[order[fails[0]]]) * (1.0 - 1e-9)
    return Certificate(
        level=level,
        candidate=getattr(candidate, "name", type(candidate).__name__),
        grid_id=grid.id,
        lipschitz=float(np.max(L)) if L.size else 0.0,
        tau=tau,
        r0=float(r0),
        method=method,
        values=values,
        delta_v=dv,
        threshold=np.array(threshold),
        scanned=scanned,
    )


def certify(candidate, system, grid: Grid, method: str = "local", r0: Optional[float] = None) -> Certificate:
    """Certify ``candidate`` with either the ``local`` or the ``global`` Lipschitz rule.

    ``r0`` defaults to ``2 tau``.
    """
    r0 = 2.0 * grid.tau if r0 is None else r0
    if method == "global":
        L_v = candidate.lipschitz_bound(system.domain)
        L = compose_lipschitz(L_v, system.lipschitz)
    elif method == "local":
        L = local_thresholds(candidate, system, grid.points, grid.tau) / grid.tau
    else:
        raise ValueError(f"unknown certification method {method!r}")
    return largest_safe_level(candidate, system, grid, L, r0, method=method)


def level_set_contains(candidate, c: float, x) -> np.ndarray:
    if c < 0:
        raise ValueError("level must be non-negative")
    return candidate.value(x) <= c


def write_level_set_csv(path, certificate: Certificate, grid: Grid, state_scale=None, names: Sequence[str] = None):
    """Columns ``x0..x{d-1}, v, delta_v, certified``; states are multiplied by ``state_scale``."""
    pts = grid.points
    if state_scale is not None:
        pts = pts * np.asarray(state_scale, dtype=float)
    names = list(names) if names is not None else [f"x{i}" for i in range(grid.dim)]
    cert = certificate.certified.astype(int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "v", "delta_v", "certified"])
        for row, v, dv, c in zip(pts, certificate.values, certificate.delta_v, cert):
            w.writerow([*(repr(float(a)) for a in row), repr(float(v)), repr(float(dv)), int(c)])
