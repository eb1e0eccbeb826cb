"""Growing the certified level set: gap sampling, labeling, SGD, recertification."""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from typing import Callable, List, Optional

import numpy as np

from .certify import Certificate, Grid, certify, compose_lipschitz, local_thresholds
from .errors import ConfigError, SamplingError, StartupError
from .lyapunov import LyapunovNet, flatten_grads, lagrangian_loss, loss_and_gradient, sgd_step
from .oracle import RoaMask, coverage_fraction, soundness_audit


@dataclasses.dataclass
class TrainConfig:
    lam: float = 1000.0
    alpha: float = 1.25
    horizon: int = 200
    c_s: float = 1.0
    sgd_iters: int = 10
    batch_size: int = 512
    learning_rate: float = 1e-3
    outer_iters: int = 20
    seed: int = 0
    # stop once c changes by less than stall_tol (relative) stall_patience times in a row; 0 disables
    stall_tol: float = 1e-3
    stall_patience: int = 3
    init_attempts: int = 3
    method: str = "local"
    r0: Optional[float] = None
    # "certificate": decrease term asks for the grid certificate's threshold; "none": plain dv <= 0
    margin: str = "certificate"
    # rescale a gradient whose global norm exceeds this before the SGD step; None disables
    grad_clip: Optional[float] = 20.0

    def __post_init__(self):
        checks = [
            (self.lam > 0, "lam must be positive"),
            (self.alpha > 1, "alpha must be greater than 1"),
            (int(self.horizon) >= 1, "horizon must be at least 1"),
            (self.c_s > 0, "c_s must be positive"),
            (int(self.sgd_iters) >= 1, "sgd_iters must be at least 1"),
            (int(self.batch_size) >= 1, "batch_size must be at least 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (int(self.outer_iters) >= 0, "outer_iters must be non-negative"),
            (self.stall_tol >= 0, "stall_tol must be non-negative"),
            (int(self.stall_patience) >= 1, "stall_patience must be at least 1"),
            (int(self.init_attempts) >= 1, "init_attempts must be at least 1"),
            (self.method in ("local", "global"), "method must be 'local' or 'global'"),
            (self.r0 is None or self.r0 >= 0, "r0 must be non-negative"),
            (self.margin in ("certificate", "none"), "margin must be 'certificate' or 'none'"),
            (self.grad_clip is None or self.grad_clip > 0, "grad_clip must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclasses.dataclass
class LabeledBatch:
    states: np.ndarray
    labels: np.ndarray
    endpoints: np.ndarray
    trap_time: np.ndarray


def sample_gap_batch(candidate, c_k, alpha, batch_size, domain, rng, min_acceptance=1e-3):
    """Uniform rejection sample of ``batch_size`` states with ``v(x) <= alpha c_k``.

    Returns ``(states, fallback)``. When the acceptance rate drops below
    ``min_acceptance`` the batch is drawn uniformly over the whole domain and
    ``fallback`` is True.
    """
    if not c_k > 0:
        raise SamplingError("certified level is zero; re-initialize the candidate")
    if not alpha > 1:
        raise ValueError("alpha must be greater than 1")
    domain = np.atleast_2d(np.asarray(domain, dtype=float))
    lo, hi = domain[:, 0], domain[:, 1]
    level = alpha * c_k
    round_size = max(4 * batch_size, 4096)
    probe = math.ceil(10 / min_acceptance)
    kept, drawn, accepted = [], 0, 0
    while accepted < batch_size:
        x = rng.uniform(lo, hi, size=(round_size, domain.shape[0]))
        ok = x[candidate.value(x) <= level]
        kept.append(ok)
        drawn += round_size
        accepted += ok.shape[0]
        if drawn >= probe and accepted < min_acceptance * drawn:
            return rng.uniform(lo, hi, size=(batch_size, domain.shape[0])), True
    return np.concatenate(kept)[:batch_size], False


def label_batch(states, system, candidate, c_k, horizon) -> LabeledBatch:
    """``y = +1`` iff the trajectory enters ``V(c_k)`` at some step ``0 <= t <= horizon``.

    Trajectories that leave the doubled domain box or stop being finite are
    frozen from then on and keep the label they had.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    x = np.atleast_2d(np.asarray(states, dtype=float)).copy()
    n = x.shape[0]
    bound = 2.0 * np.max(np.abs(system.domain), axis=1)
    trap = np.full(n, -1)
    trap[candidate.value(x) <= c_k] = 0
    active = trap < 0
    for t in range(1, horizon + 1):
        if not active.any():
            break
        with np.errstate(all="ignore"):
            nxt = system(x[active])
        finite = np.all(np.isfinite(nxt), axis=1) & np.all(np.abs(nxt) <= bound, axis=1)
        idx = np.flatnonzero(active)
        x[idx[finite]] = nxt[finite]
        active[idx[~finite]] = False
        hit = idx[finite][candidate.value(nxt[finite]) <= c_k]
        trap[hit] = t
        active[hit] = False
    labels = np.where(trap >= 0, 1.0, -1.0)
    return LabeledBatch(np.asarray(states, dtype=float), labels, x, trap)


@dataclasses.dataclass
class IterationRecord:
    iteration: int
    level: float
    coverage: float
    classifier_loss: float
    decrease_loss: float
    false_positives: int
    fallback: bool
    seconds: float


@dataclasses.dataclass
class TrainHistory:
    records: List[IterationRecord] = dataclasses.field(default_factory=list)
    certificates: List[Certificate] = dataclasses.field(default_factory=list)

    def append(self, record: IterationRecord, certificate: Certificate):
        self.records.append(record)
        self.certificates.append(certificate)

    @property
    def levels(self):
        return [r.level for r in self.records]

    def write_csv(self, path) -> None:
        """Deterministic columns only; wall time goes to :meth:`write_timings`."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["iter", "c_k", "coverage_fraction", "classifier_loss", "decrease_loss",
                 "false_positives", "sampling_fallback"]
            )
            for r in self.records:
                w.writerow(
                    [r.iteration, repr(r.level), repr(r.coverage), repr(r.classifier_loss),
                     repr(r.decrease_loss), r.false_positives, int(r.fallback)]
                )

    def write_timings(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "seconds"])
            for r in self.records:
                w.writerow([r.iteration, f"{r.seconds:.3f}"])


def _measure(cert, mask, grid):
    if mask is None:
        return float("nan"), -1
    return coverage_fraction(cert, mask, grid), soundness_audit(cert, mask, grid)["false_positives"]


def clip_gradient(grads, max_norm: float):
    """Scale ``grads`` down so that their joint Euclidean norm is at most ``max_norm``."""
    norm = float(np.linalg.norm(flatten_grads(grads)))
    if norm <= max_norm:
        return grads
    k = max_norm / norm
    return [(k * g1, None if g2 is None else k * g2) for g1, g2 in grads]


def decrease_margin_targets(net, system, states, grid: Grid, config: TrainConfig) -> Optional[np.ndarray]:
    """Certificate thresholds at sampled states (zero inside the origin ball), or None."""
    if config.margin == "none":
        return None
    if config.method == "global":
        L = compose_lipschitz(net.lipschitz_bound(system.domain), system.lipschitz)
        thr = np.full(states.shape[0], L * grid.tau)
    else:
        thr = local_thresholds(net, system, states, grid.tau)
    r0 = 2.0 * grid.tau if config.r0 is None else config.r0
    thr[np.linalg.norm(states, axis=1) <= r0] = 0.0
    thr[~np.isfinite(thr)] = 0.0
    return thr


def outer_iteration(net, c_k, config: TrainConfig, system, grid: Grid, rng, c0=None, on_step=None):
    """One pass of the loop body: ``sgd_iters`` steps on fresh gap batches, then recertify.

    Returns ``(net, certificate, metrics)`` where metrics holds the mean
    classifier and decrease losses over the steps and the fallback flag.
    ``on_step`` is called with the updated network after every SGD step.
    """
    sample_level = c_k if c_k > 0 else c0
    cls_sum = dec_sum = 0.0
    fallback = False
    for _ in range(config.sgd_iters):
        states, fb = sample_gap_batch(net, sample_level, config.alpha, config.batch_size, system.domain, rng)
        fallback |= fb
        labeled = label_batch(states, system, net, sample_level, config.horizon)
        nxt = system(states)
        margin = decrease_margin_targets(net, system, states, grid, config)
        cls, dec = lagrangian_loss(net, states, labeled.labels, nxt, config.c_s, config.lam, margin=margin)
        cls_sum += cls
        dec_sum += dec
        _, grads = loss_and_gradient(net, states, labeled.labels, nxt, config.c_s, config.lam, margin=margin)
        if config.grad_clip is not None:
            grads = clip_gradient(grads, config.grad_clip)
        net = sgd_step(net, grads, config.learning_rate)
        if on_step:
            on_step(net)
    cert = certify(net, system, grid, config.method, config.r0)
    metrics = {
        "classifier_loss": cls_sum / config.sgd_iters,
        "decrease_loss": dec_sum / config.sgd_iters,
        "fallback": fallback,
    }
    return net, cert, metrics


def run_training(
    config: TrainConfig,
    system,
    grid: Grid,
    mask: Optional[RoaMask] = None,
    widths=(64, 64, 64),
    activation: str = "tanh",
    eps: float = 1e-2,
    slope: float = 0.01,
    net: Optional[LyapunovNet] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
    on_step: Optional[Callable[[LyapunovNet], None]] = None,
):
    """Run the full loop; returns ``(net, certificate, history)``.

    When ``mask`` is given every certificate is scored for coverage and
    audited for false positives as it is produced.
    """
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    cert = None
    for _ in range(config.init_attempts):
        if net is None:
            net = LyapunovNet.random(system.dim, widths, rng, eps, activation, slope)
        cert = certify(net, system, grid, config.method, config.r0)
        if cert.level > 0:
            break
        net = None
    if cert is None or cert.level <= 0:
        raise StartupError(f"initial certificate empty after {config.init_attempts} initializations")

    history = TrainHistory()
    c0 = cert.level
    cov, fp = _measure(cert, mask, grid)
    rec = IterationRecord(0, cert.level, cov, float("nan"), float("nan"), fp, False, time.perf_counter() - start)
    history.append(rec, cert)
    if callback:
        callback(rec)

    best = (net, cert)
    stalls = 0
    c_k = cert.level
    for k in range(1, config.outer_iters + 1):
        net, cert, m = outer_iteration(net, c_k, config, system, grid, rng, c0, on_step)
        cov, fp = _measure(cert, mask, grid)
        rec = IterationRecord(
            k, cert.level, cov, m["classifier_loss"], m["decrease_loss"], fp, m["fallback"],
            time.perf_counter() - start,
        )
        history.append(rec, cert)
        if callback:
            callback(rec)
        if config.stall_tol > 0 and c_k > 0 and abs(cert.level - c_k) / c_k < config.stall_tol:
            stalls += 1
        else:
            stalls = 0
        c_k = cert.level
        best = (net, cert)
        if stalls >= config.stall_patience:
            break
    return best[0], best[1], history
