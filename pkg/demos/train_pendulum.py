"""Growing a neural Lyapunov certificate on the pendulum.

Each outer iteration samples the gap between the current certified level and
alpha times it, labels the samples by forward simulation, takes a few SGD
steps, and recertifies. The printout follows the certified level and the
fraction of the simulated ROA it covers. Pass a number of iterations as the
first argument (default 5); the benchmark uses 20.
"""
import sys

from roa_lyapunov.certify import build_grid, certify
from roa_lyapunov.config import ExperimentConfig
from roa_lyapunov.oracle import coverage_fraction, ground_truth_roa
from roa_lyapunov.train import run_training


def main(iters=5):
    cfg = ExperimentConfig()
    cfg.train.outer_iters = iters
    system = cfg.build_system()
    grid = build_grid(system.domain, cfg.grid.points_per_dim)
    print("simulating the ground-truth ROA ...")
    mask = ground_truth_roa(system, grid, cfg.oracle.horizon, cfg.oracle.conv_radius)

    def show(rec):
        print(f"iter {rec.iteration:2d}  c={rec.level:.4g}  coverage={rec.coverage:.3f}  "
              f"false positives={rec.false_positives}")

    net, cert, _ = run_training(
        cfg.train_config(), system, grid, mask, cfg.network.widths, cfg.network.activation, cfg.network.eps,
        cfg.network.slope, callback=show,
    )
    lqr = certify(cfg.lqr_candidate(system), system, grid, cfg.certify.method, cfg.certify.r0)
    print(f"final: network {coverage_fraction(cert, mask, grid):.3f}, LQR {coverage_fraction(lqr, mask, grid):.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
