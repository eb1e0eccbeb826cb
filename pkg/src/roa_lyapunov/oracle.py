"""Ground truth by brute-force simulation, coverage, and soundness audits."""
from __future__ import annotations

import csv
import dataclasses
import json
import math

import numpy as np

from .certify import Certificate, Grid


@dataclasses.dataclass
class RoaMask:
    grid_id: str
    mask: np.ndarray
    horizon: int
    conv_radius: float

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def simulate_converges(system, x0, horizon: int = 2000, conv_radius: float = 0.01, chunk: int = 1 << 16):
    """True where the trajectory from ``x0`` stays in the ``conv_radius`` ball over the last 10% of steps.

    A trajectory that leaves the domain box scaled by two (or stops being
    finite) is marked false immediately.
    """
    if horizon < 1 or not conv_radius > 0:
        raise ValueError("horizon must be >= 1 and conv_radius positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    bound = 2.0 * np.max(np.abs(system.domain), axis=1)
    tail_start = horizon - max(1, math.ceil(0.1 * horizon))
    out = np.zeros(x0.shape[0], dtype=bool)
    for lo in range(0, x0.shape[0], chunk):
        x = x0[lo : lo + chunk].copy()
        alive = np.ones(x.shape[0], dtype=bool)
        idx = np.arange(x.shape[0])
        for t in range(1, horizon + 1):
            with np.errstate(all="ignore"):
                x = system(x)
            keep = np.all(np.isfinite(x), axis=1) & np.all(np.abs(x) <= bound, axis=1)
            if t > tail_start:
                keep &= np.linalg.norm(x, axis=1) <= conv_radius
            if not keep.all():
                alive[idx[~keep]] = False
                x, idx = x[keep], idx[keep]
            if idx.size == 0:
                break
        out[lo : lo + chunk] = alive
    return out


def ground_truth_roa(system, grid: Grid, horizon: int = 2000, conv_radius: float = 0.01) -> RoaMask:
    mask = simulate_converges(system, grid.points, horizon, conv_radius)
    return RoaMask(grid.id, mask, horizon, conv_radius)


def _certified(certificate: Certificate, grid: Grid, candidate=None) -> np.ndarray:
    if certificate.values is not None:
        return certificate.certified
    return candidate.value(grid.points) <= certificate.level


def coverage_fraction(certificate: Certificate, mask: RoaMask, grid: Grid, candidate=None) -> float:
    """Share of the true ROA grid points that lie in the certified level set."""
    if mask.grid_id != grid.id or certificate.grid_id != grid.id:
        raise ValueError("certificate, mask and grid must refer to the same grid")
    total = mask.count
    if total == 0:
        raise ValueError("coverage is undefined for an empty ROA mask")
    inside = _certified(certificate, grid, candidate)
    return float(np.count_nonzero(inside & mask.mask)) / total


def soundness_audit(certificate: Certificate, mask: RoaMask, grid: Grid, candidate=None) -> dict:
    """Count certified points that the simulation says do not converge."""
    if mask.grid_id != grid.id or certificate.grid_id != grid.id:
        raise ValueError("certificate, mask and grid must refer to the same grid")
    inside = _certified(certificate, grid, candidate)
    fp = inside & ~mask.mask
    margins = certificate.margins
    return {
        "candidate": certificate.candidate,
        "level": certificate.level,
        "certified_points": int(inside.sum()),
        "false_positives": int(fp.sum()),
        "false_positive_indices": np.flatnonzero(fp)[:20].tolist(),
        "worst_margin": float(margins.max()) if margins.size else None,
    }


def write_roa_csv(path, mask: RoaMask, grid: Grid, state_scale=None, names=None):
    pts = grid.points
    if state_scale is not None:
        pts = pts * np.asarray(state_scale, dtype=float)
    names = list(names) if names is not None else [f"x{i}" for i in range(grid.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "true_safe"])
        for row, m in zip(pts, mask.mask):
            w.writerow([*(repr(float(a)) for a in row), int(m)])


def write_audit_json(path, reports) -> None:
    with open(path, "w") as fh:
        json.dump(reports, fh, indent=2, sort_keys=True)
        fh.write("\n")
