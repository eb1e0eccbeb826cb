"""Where the LQR cost-to-go falls short on the saturated pendulum.

Simulates every grid state to estimate the true region of attraction, then
certifies the quadratic LQR candidate and prints a coarse map:
``C`` certified, ``r`` in the ROA but not certified, ``.`` unsafe.
"""
import numpy as np

from roa_lyapunov.certify import build_grid, certify
from roa_lyapunov.config import ExperimentConfig
from roa_lyapunov.oracle import coverage_fraction, ground_truth_roa, soundness_audit


def ascii_map(grid, mask, certified, stride=(10, 5)):
    m = mask.reshape(grid.counts)
    c = certified.reshape(grid.counts)
    art = np.where(c, "C", np.where(m, "r", "."))
    # rows are angular velocity (top positive), columns the angle
    return "\n".join("".join(row) for row in art[:: stride[0], :: stride[1]].T[::-1])


def main():
    cfg = ExperimentConfig()
    system = cfg.build_system()
    grid = build_grid(system.domain, cfg.grid.points_per_dim)
    mask = ground_truth_roa(system, grid, cfg.oracle.horizon, cfg.oracle.conv_radius)
    print(f"ROA: {mask.count} of {grid.size} grid states converge")

    cert = certify(cfg.lqr_candidate(system), system, grid, cfg.certify.method, cfg.certify.r0)
    audit = soundness_audit(cert, mask, grid)
    print(f"LQR level c={cert.level:.4g}, coverage {coverage_fraction(cert, mask, grid):.3f}, "
          f"false positives {audit['false_positives']}")
    print(ascii_map(grid, mask.mask, cert.certified))


if __name__ == "__main__":
    main()
