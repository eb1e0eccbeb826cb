import json

import numpy as np
import pytest

from roa_lyapunov.certify import Certificate, build_grid, certify, largest_safe_level
from roa_lyapunov.dynamics import linear_system
from roa_lyapunov.lyapunov import QuadraticCandidate
from roa_lyapunov.oracle import (
    RoaMask,
    coverage_fraction,
    ground_truth_roa,
    simulate_converges,
    soundness_audit,
    write_audit_json,
    write_roa_csv,
)

UNIT = QuadraticCandidate(np.eye(1))


def full_certificate(grid, values):
    """A "certificate" that claims the whole grid; only a negative control."""
    n = grid.size
    return Certificate(np.inf, "everything", grid.id, 0.0, grid.tau, 0.0, "none", values,
                       np.zeros(n), np.zeros(n), np.ones(n, bool))


@pytest.fixture(scope="module")
def pendulum_mask(pendulum):
    grid = build_grid(pendulum.domain, 101)
    return grid, ground_truth_roa(pendulum, grid)


def test_contraction_all_true():
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 51)
    assert ground_truth_roa(system, grid, horizon=200).mask.all()


def test_expansion_only_origin():
    system = linear_system([[2.0]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 51)
    mask = ground_truth_roa(system, grid, horizon=200, conv_radius=0.01)
    np.testing.assert_array_equal(np.flatnonzero(mask.mask), [25])


def test_orbit_rejected_by_tail_window():
    # a rotation stays bounded but never settles
    system = linear_system([[0.0, -1.0], [1.0, 0.0]], [[-1.0, 1.0], [-1.0, 1.0]])
    assert not simulate_converges(system, [[0.5, 0.0]], horizon=100).any()


def test_bad_arguments():
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    with pytest.raises(ValueError):
        simulate_converges(system, [[0.1]], horizon=0)
    with pytest.raises(ValueError):
        simulate_converges(system, [[0.1]], conv_radius=0.0)


def test_chunking_does_not_change_result(pendulum):
    x = np.random.default_rng(0).uniform(-1, 1, (300, 2))
    np.testing.assert_array_equal(
        simulate_converges(pendulum, x, 500, chunk=64), simulate_converges(pendulum, x, 500)
    )


def test_pendulum_mask_shape(pendulum_mask):
    grid, mask = pendulum_mask
    assert mask.mask[grid.nearest_index([0.0, 0.0])[0]]
    upside = grid.nearest_index([[1.0, 0.0], [-1.0, 0.0]])
    assert not mask.mask[upside].any()
    # not an ellipse: the ROA is not symmetric under flipping the velocity alone
    m = mask.mask.reshape(grid.counts)
    assert not np.array_equal(m, m[:, ::-1])
    np.testing.assert_array_equal(m, m[::-1, ::-1])


def test_mask_is_deterministic(pendulum, pendulum_mask):
    grid, mask = pendulum_mask
    np.testing.assert_array_equal(ground_truth_roa(pendulum, grid).mask, mask.mask)


def test_fraction_stable_under_refinement(pendulum):
    fractions = []
    for n in (151, 301):
        grid = build_grid(pendulum.domain, n)
        fractions.append(ground_truth_roa(pendulum, grid).count / grid.size)
    assert abs(fractions[1] - fractions[0]) / fractions[1] < 0.05


def test_coverage_fraction_examples():
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 21)
    mask = ground_truth_roa(system, grid, horizon=100)
    empty = largest_safe_level(UNIT, system, grid, 1e9, 0.0)
    assert empty.level == 0.0
    assert coverage_fraction(empty, mask, grid) == pytest.approx(1 / 21)
    assert coverage_fraction(full_certificate(grid, UNIT.value(grid.points)), mask, grid) == 1.0


def test_coverage_errors():
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 21)
    cert = largest_safe_level(UNIT, system, grid, 3.0, 0.15)
    with pytest.raises(ValueError):
        coverage_fraction(cert, RoaMask(grid.id, np.zeros(21, bool), 1, 0.01), grid)
    other = build_grid(system.domain, 11)
    with pytest.raises(ValueError):
        coverage_fraction(cert, ground_truth_roa(system, other, 10), grid)


def test_audit_controls(pendulum, pendulum_mask, lqr):
    grid, mask = pendulum_mask
    S = np.diag(pendulum.state_scale)
    cand = QuadraticCandidate(S @ lqr.P @ S)
    sound = certify(cand, pendulum, grid, "local", r0=0.15)
    assert soundness_audit(sound, mask, grid)["false_positives"] == 0
    empty = largest_safe_level(cand, pendulum, grid, 1e12, 0.0)
    report = soundness_audit(empty, mask, grid)
    assert report["false_positives"] == 0 and report["worst_margin"] is None
    everything = soundness_audit(full_certificate(grid, cand.value(grid.points)), mask, grid)
    assert everything["false_positives"] > 0


def test_writers(tmp_path):
    system = linear_system([[0.5]], [[-1.0, 1.0]])
    grid = build_grid(system.domain, 5)
    mask = ground_truth_roa(system, grid, 50)
    write_roa_csv(tmp_path / "roa.csv", mask, grid)
    lines = (tmp_path / "roa.csv").read_text().splitlines()
    assert lines[0] == "x0,true_safe" and len(lines) == 6
    write_audit_json(tmp_path / "audit.json", [{"false_positives": 0}])
    assert json.loads((tmp_path / "audit.json").read_text()) == [{"false_positives": 0}]
