"""Command line entry point: ``train``, ``certify``, ``oracle`` and ``compare``.

Exit codes: 0 success, 1 configuration error, 2 runtime or startup error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .certify import build_grid, certify, write_level_set_csv
from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .lyapunov import LyapunovNet
from .oracle import coverage_fraction, ground_truth_roa, soundness_audit, write_audit_json, write_roa_csv
from .train import run_training

log = logging.getLogger("roa_lyapunov")

NETWORK_FILE = "network.json"


class _Run:
    """Shared set-up for a subcommand: system, grid and output directory."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.system = cfg.build_system()
        self.grid = build_grid(self.system.domain, cfg.grid.points_per_dim)
        self.out = cfg.out
        self.outputs = []
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def oracle(self):
        log.info("simulating %d grid points for %d steps", self.grid.size, self.cfg.oracle.horizon)
        return ground_truth_roa(self.system, self.grid, self.cfg.oracle.horizon, self.cfg.oracle.conv_radius)

    def certify(self, candidate):
        return certify(candidate, self.system, self.grid, self.cfg.certify.method, self.cfg.certify.r0)

    def write_manifest(self, extra=None):
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.to_dict(),
            "grid": {"id": self.grid.id, "tau": self.grid.tau, "size": self.grid.size},
            "system": {
                "name": self.system.name,
                "lipschitz": self.system.lipschitz,
                "increment_lipschitz": self.system.increment_lipschitz,
                "state_scale": self.system.state_scale.tolist(),
            },
            "assumptions": [
                "grid points with |x| <= r0 (working coordinates) are not checked by the "
                "decrease test; local stability there rests on the linearized closed loop "
                "having spectral radius below one",
            ],
            "outputs": sorted(set(self.outputs)),
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def cmd_train(cfg: ExperimentConfig) -> int:
    run = _Run(cfg, "train")
    mask = run.oracle()
    tc = cfg.train_config()

    def report(rec):
        log.info("iter %d  c=%.6g  coverage=%.4f  false_positives=%d", rec.iteration, rec.level, rec.coverage,
                 rec.false_positives)

    net, cert, history = run_training(
        tc, run.system, run.grid, mask, cfg.network.widths, cfg.network.activation, cfg.network.eps,
        cfg.network.slope,
        callback=report,
    )
    history.write_csv(run.path("training_curve.csv"))
    history.write_timings(run.path("timings.csv"))
    net.save(run.path(NETWORK_FILE))
    write_level_set_csv(run.path("level_set.csv"), cert, run.grid, run.system.state_scale, cfg.state_names())
    audits = [dict(soundness_audit(c, mask, run.grid), iteration=i) for i, c in enumerate(history.certificates)]
    write_audit_json(run.path("audit.json"), audits)
    run.write_manifest({"final_level": cert.level, "final_coverage": history.records[-1].coverage})
    return 0


def _load_network(cfg, path):
    path = path or os.path.join(cfg.out, NETWORK_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"network file not found: {path}")
    return LyapunovNet.load(path)


def cmd_certify(cfg: ExperimentConfig, network=None, candidate="nn") -> int:
    run = _Run(cfg, "certify")
    cand = run.cfg.lqr_candidate(run.system) if candidate == "lqr" else _load_network(cfg, network)
    cert = run.certify(cand)
    write_level_set_csv(run.path("level_set.csv"), cert, run.grid, run.system.state_scale, cfg.state_names())
    log.info("%s: certified level %.6g (%d grid points)", cert.candidate, cert.level, int(cert.certified.sum()))
    run.write_manifest({"candidate": cert.candidate, "level": cert.level})
    return 0


def cmd_oracle(cfg: ExperimentConfig) -> int:
    run = _Run(cfg, "oracle")
    mask = run.oracle()
    write_roa_csv(run.path("roa.csv"), mask, run.grid, run.system.state_scale, cfg.state_names())
    log.info("%d of %d grid points converge", mask.count, run.grid.size)
    run.write_manifest({"roa_points": mask.count})
    return 0


def cmd_compare(cfg: ExperimentConfig, network=None, lqr_only=False) -> int:
    # fail on a missing network before any output is written
    net = None if lqr_only else _load_network(cfg, network)
    run = _Run(cfg, "compare")
    mask = run.oracle()
    candidates = [("lqr", run.cfg.lqr_candidate(run.system))]
    if net is not None:
        candidates.insert(0, ("nn", net))
    rows = []
    for name, cand in candidates:
        cert = run.certify(cand)
        audit = soundness_audit(cert, mask, run.grid)
        rows.append([name, repr(cert.level), repr(coverage_fraction(cert, mask, run.grid)), audit["false_positives"]])
        log.info("%s: c=%.6g coverage=%s false_positives=%d", name, cert.level, rows[-1][2], rows[-1][3])
    with open(run.path("compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "level", "coverage_fraction", "false_positives"])
        w.writerows(rows)
    run.write_manifest()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roa-lyapunov", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "grow a neural Lyapunov certificate"),
        ("certify", "certify a saved network or the LQR candidate"),
        ("oracle", "ground-truth region of attraction by simulation"),
        ("compare", "certified coverage of the network against the LQR candidate"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        if name in ("certify", "compare"):
            p.add_argument("--network", help=f"network file (default OUT/{NETWORK_FILE})")
        if name == "certify":
            p.add_argument("--candidate", choices=["nn", "lqr"], default="nn")
        if name == "compare":
            p.add_argument("--lqr-only", action="store_true", help="skip the network")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "certify":
                return cmd_certify(cfg, args.network, args.candidate)
            if args.command == "oracle":
                return cmd_oracle(cfg)
            return cmd_compare(cfg, args.network, args.lqr_only)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
