import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roa_lyapunov.certify import (
    build_grid,
    certify,
    compose_lipschitz,
    decrease_margin,
    largest_safe_level,
    level_set_contains,
    local_thresholds,
    write_level_set_csv,
)
from roa_lyapunov.dynamics import linear_system
from roa_lyapunov.errors import ConstructionError
from roa_lyapunov.lyapunov import LyapunovNet, QuadraticCandidate

UNIT = QuadraticCandidate(np.eye(1))


def brute_force_level(xs, a, L, tau, r0):
    """Exhaustive reference: try every grid value as a level and check every point against it."""
    v = xs ** 2
    dv = (a * xs) ** 2 - xs ** 2
    scanned = np.abs(xs) > r0
    levels = np.unique(v[scanned])
    valid = [c for c in levels if all(dv[i] < -L * tau for i in range(xs.size) if scanned[i] and v[i] <= c)]
    if len(valid) == len(levels):
        return float(v.max())
    first_bad = levels[len(valid)]
    if not valid:
        return 0.0
    return float(first_bad) * (1 - 1e-9)


@pytest.mark.parametrize("a", [0.5, 0.9, 1.1, 2.0])
@pytest.mark.parametrize("r0", [None, 0.15, 0.3])
@pytest.mark.parametrize("n", [101, 201])
def test_matches_brute_force_scan(a, r0, n):
    system = linear_system([[a]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, n)
    r0 = 2 * grid.tau if r0 is None else r0
    L = compose_lipschitz(2.0, abs(a))
    cert = largest_safe_level(UNIT, system, grid, L, r0)
    expected = brute_force_level(grid.points[:, 0], a, L, grid.tau, r0)
    assert cert.level == expected
    # the global rule builds the same constant from the candidate and the system
    assert certify(UNIT, system, grid, "global", r0).level == expected
    if a > 1:
        assert cert.level == 0.0 and cert.empty


def test_stable_example_is_nonempty():
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 201)
    cert = largest_safe_level(UNIT, system, grid, 3.0, r0=0.15)
    assert cert.level == pytest.approx(1.0)
    assert np.all(cert.margins < 0)


def test_grid_geometry():
    grid = build_grid([[-1, 1], [-1, 1]], 3)
    assert grid.size == 9
    np.testing.assert_array_equal(grid.spacing, [1.0, 1.0])
    assert grid.tau == pytest.approx(np.sqrt(2) / 2)
    np.testing.assert_array_equal(grid.points[1], [-1.0, 0.0])
    assert build_grid([[-1, 1], [-1, 1]], 5).tau == pytest.approx(grid.tau / 2)


def test_grid_fill_distance_holds():
    grid = build_grid([[-np.pi, np.pi], [-2.0, 3.0]], [31, 17])
    x = np.random.default_rng(0).uniform(grid.limits[:, 0], grid.limits[:, 1], (10_000, 2))
    nearest = grid.points[grid.nearest_index(x)]
    assert np.linalg.norm(x - nearest, axis=1).max() <= grid.tau


@pytest.mark.parametrize("limits,counts", [([[1.0, 1.0]], 5), ([[0.0, 1.0]], 1), ([[0.0, np.inf]], 4)])
def test_degenerate_grid_rejected(limits, counts):
    with pytest.raises(ConstructionError):
        build_grid(limits, counts)


def test_decrease_margin_closed_forms():
    x = np.linspace(-1, 1, 11)[:, None]
    half = linear_system([[0.5]], [[-1.0, 1.0]])
    double = linear_system([[2.0]], [[-1.0, 1.0]])
    np.testing.assert_allclose(decrease_margin(UNIT, half, x), -0.75 * x[:, 0] ** 2, atol=1e-15)
    np.testing.assert_allclose(decrease_margin(UNIT, double, x), 3 * x[:, 0] ** 2, atol=1e-15)
    assert decrease_margin(UNIT, half, np.zeros((1, 1)))[0] == 0.0


def test_overflowing_image_is_a_violation():
    system = linear_system([[1e200]], [[-1.0, 1.0]])
    assert decrease_margin(UNIT, system, np.array([[1e200]]))[0] == np.inf


def test_compose_lipschitz():
    assert compose_lipschitz(2.0, 1.0) == 4.0
    with pytest.raises(ValueError):
        compose_lipschitz(0.0, 1.0)


@pytest.mark.parametrize("which", ["lqr", "nn"])
def test_decrease_lipschitz_audit(pendulum, lqr, which):
    rng = np.random.default_rng(1)
    if which == "lqr":
        S = np.diag(pendulum.state_scale)
        cand = QuadraticCandidate(S @ lqr.P @ S)
    else:
        cand = LyapunovNet.random(2, (16, 16), rng)
    L = compose_lipschitz(cand.lipschitz_bound(pendulum.domain), pendulum.lipschitz)
    lo, hi = pendulum.domain[:, 0], pendulum.domain[:, 1]
    x, y = rng.uniform(lo, hi, (2, 10_000, 2))
    gap = np.abs(decrease_margin(cand, pendulum, x) - decrease_margin(cand, pendulum, y))
    assert np.all(gap <= L * np.linalg.norm(x - y, axis=1))


@pytest.mark.parametrize("which", ["lqr", "nn"])
def test_local_thresholds_bound_cell_variation(pendulum, lqr, which):
    rng = np.random.default_rng(2)
    if which == "lqr":
        S = np.diag(pendulum.state_scale)
        cand = QuadraticCandidate(S @ lqr.P @ S)
    else:
        cand = LyapunovNet.random(2, (16, 16), rng)
    tau = 0.02
    centers = rng.uniform(-1, 1, (200, 2))
    thr = local_thresholds(cand, pendulum, centers, tau)
    base = decrease_margin(cand, pendulum, centers)
    for _ in range(20):
        u = rng.normal(size=centers.shape)
        u *= tau * np.sqrt(rng.uniform(size=(200, 1))) / np.linalg.norm(u, axis=1, keepdims=True)
        assert np.all(np.abs(decrease_margin(cand, pendulum, centers + u) - base) <= thr)


@given(st.floats(0.1, 0.95), st.floats(0.5, 20.0), st.floats(1.0, 4.0))
def test_larger_lipschitz_never_increases_level(a, L, factor):
    system = linear_system([[a]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 81)
    c1 = largest_safe_level(UNIT, system, grid, L, 0.2).level
    c2 = largest_safe_level(UNIT, system, grid, L * factor, 0.2).level
    assert c2 <= c1


@given(st.floats(0.1, 0.95), st.integers(20, 60))
def test_coarser_grid_never_increases_level(a, m):
    system = linear_system([[a]], [[-1.0, 1.0]])
    fine = largest_safe_level(UNIT, system, build_grid(system.domain, 2 * m + 1), 2 * (1 + a), 0.2)
    coarse = largest_safe_level(UNIT, system, build_grid(system.domain, m + 1), 2 * (1 + a), 0.2)
    assert coarse.level <= fine.level


def test_certificate_invariant_and_reproducibility(pendulum, lqr):
    S = np.diag(pendulum.state_scale)
    cand = QuadraticCandidate(S @ lqr.P @ S)
    grid = build_grid(pendulum.domain, 61)
    a = certify(cand, pendulum, grid, "local", r0=0.15)
    b = certify(cand, pendulum, grid, "local", r0=0.15)
    assert a.level == b.level
    inside = (a.values <= a.level) & (a.values > 0) & (np.linalg.norm(grid.points, axis=1) > a.r0)
    assert np.all(a.delta_v[inside] < -a.threshold[inside])


def test_unknown_method_rejected(pendulum, lqr):
    with pytest.raises(ValueError):
        certify(UNIT, pendulum, build_grid(pendulum.domain, 5), "exact")


def test_level_set_contains():
    x = np.array([[0.0], [0.5], [1.0]])
    np.testing.assert_array_equal(level_set_contains(UNIT, 0.25, x), [True, True, False])
    assert level_set_contains(UNIT, 0.0, np.zeros((1, 1)))[0]
    with pytest.raises(ValueError):
        level_set_contains(UNIT, -1.0, x)


@given(st.floats(0, 2), st.floats(0, 2))
def test_level_sets_nest(c1, c2):
    x = np.linspace(-1.5, 1.5, 101)[:, None]
    lo, hi = sorted((c1, c2))
    assert np.all(level_set_contains(UNIT, hi, x)[level_set_contains(UNIT, lo, x)])


def test_level_set_csv(tmp_path):
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 21)
    cert = largest_safe_level(UNIT, system, grid, 3.0, 0.15)
    path = tmp_path / "level_set.csv"
    write_level_set_csv(path, cert, grid, state_scale=[2.0], names=["s"])
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 21
    assert list(rows[0]) == ["s", "v", "delta_v", "certified"]
    assert float(rows[0]["s"]) == -2.0
    assert sum(int(r["certified"]) for r in rows) == int(cert.certified.sum())
