"""Experiment configuration: one JSON document, validated in full at load time."""
from __future__ import annotations

import dataclasses
import json
from typing import List, Optional

import numpy as np

from .dynamics import (
    PENDULUM_DOMAIN,
    ClosedLoopSystem,
    LqrSolution,
    PendulumParams,
    linear_system,
    pendulum_system,
    solve_lqr,
    linearize_discretize,
)
from .errors import ConfigError
from .lyapunov import QuadraticCandidate
from .train import TrainConfig

DEFAULT_TORQUE_FRACTION = 0.8


@dataclasses.dataclass
class PendulumSection:
    mass: float = 0.25
    length: float = 0.5
    gravity: float = 9.81
    friction: float = 0.1
    # None means DEFAULT_TORQUE_FRACTION * m g l
    torque_limit: Optional[float] = None
    dt: float = 0.01

    def params(self) -> PendulumParams:
        ubar = self.torque_limit
        if ubar is None:
            ubar = DEFAULT_TORQUE_FRACTION * self.mass * self.gravity * self.length
        return PendulumParams(self.mass, self.length, self.gravity, self.friction, ubar, self.dt)


@dataclasses.dataclass
class LqrSection:
    Q: List[List[float]] = dataclasses.field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    R: List[List[float]] = dataclasses.field(default_factory=lambda: [[1.0]])


@dataclasses.dataclass
class SystemSection:
    kind: str = "pendulum"
    # linear systems only: x+ = A x on the given box
    A: Optional[List[List[float]]] = None
    domain: Optional[List[List[float]]] = None


@dataclasses.dataclass
class GridSection:
    points_per_dim: int = 251


@dataclasses.dataclass
class NetworkSection:
    widths: List[int] = dataclasses.field(default_factory=lambda: [64, 64, 64])
    activation: str = "tanh"
    eps: float = 1e-2
    slope: float = 0.01


@dataclasses.dataclass
class CertifySection:
    method: str = "local"
    # None means twice the grid fill distance
    r0: Optional[float] = 0.2


@dataclasses.dataclass
class OracleSection:
    horizon: int = 2000
    conv_radius: float = 0.01


@dataclasses.dataclass
class TrainSection:
    lam: float = 1000.0
    alpha: float = 1.25
    horizon: int = 200
    c_s: float = 1.0
    sgd_iters: int = 10
    batch_size: int = 512
    learning_rate: float = 1e-3
    outer_iters: int = 20
    stall_tol: float = 1e-3
    stall_patience: int = 3
    init_attempts: int = 3
    margin: str = "certificate"
    grad_clip: Optional[float] = 20.0


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    system: SystemSection = dataclasses.field(default_factory=SystemSection)
    pendulum: PendulumSection = dataclasses.field(default_factory=PendulumSection)
    lqr: LqrSection = dataclasses.field(default_factory=LqrSection)
    grid: GridSection = dataclasses.field(default_factory=GridSection)
    network: NetworkSection = dataclasses.field(default_factory=NetworkSection)
    certify: CertifySection = dataclasses.field(default_factory=CertifySection)
    oracle: OracleSection = dataclasses.field(default_factory=OracleSection)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)

    # -- derived objects ---------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **dataclasses.asdict(self.train), seed=self.seed, method=self.certify.method, r0=self.certify.r0
        )

    def lqr_solution(self) -> LqrSolution:
        A, B = linearize_discretize(self.pendulum.params())
        return solve_lqr(A, B, np.array(self.lqr.Q, float), np.array(self.lqr.R, float))

    def build_system(self) -> ClosedLoopSystem:
        if self.system.kind == "linear":
            return linear_system(self.system.A, self.system.domain)
        params = self.pendulum.params()
        return pendulum_system(params, self.lqr_solution().policy(params.torque_limit), PENDULUM_DOMAIN)

    def lqr_candidate(self, system: ClosedLoopSystem) -> QuadraticCandidate:
        """The LQR cost-to-go expressed in the system's working coordinates."""
        if self.system.kind != "pendulum":
            raise ConfigError("the LQR candidate is only defined for the pendulum system")
        S = np.diag(system.state_scale)
        return QuadraticCandidate(S @ self.lqr_solution().P @ S)

    def state_names(self):
        if self.system.kind == "pendulum":
            return ["theta", "theta_dot"]
        return None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        """Check every module-level invariant; raises :class:`ConfigError`."""
        try:
            self.train_config()
            params = self.pendulum.params()
            if self.system.kind == "pendulum":
                Q = np.array(self.lqr.Q, float)
                R = np.array(self.lqr.R, float)
                if Q.shape != (2, 2) or R.shape != (1, 1):
                    raise ConfigError("lqr.Q must be 2x2 and lqr.R 1x1")
                if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) < 0) or R[0, 0] <= 0:
                    raise ConfigError("lqr.Q must be positive semidefinite and lqr.R positive")
                del params
            elif self.system.kind == "linear":
                A = np.array(self.system.A, float)
                dom = np.array(self.system.domain, float)
                if A.ndim != 2 or A.shape[0] != A.shape[1] or dom.shape != (A.shape[0], 2):
                    raise ConfigError("linear system needs a square A and a (d, 2) domain")
                if np.any(dom[:, 0] >= 0) or np.any(dom[:, 1] <= 0):
                    raise ConfigError("domain must contain the origin in its interior")
            else:
                raise ConfigError(f"unknown system kind {self.system.kind!r}")
            if self.grid.points_per_dim < 2:
                raise ConfigError("grid.points_per_dim must be at least 2")
            if not self.network.widths or any(int(w) < 1 for w in self.network.widths):
                raise ConfigError("network.widths must be a non-empty list of positive ints")
            dims = [self.dim, *self.network.widths]
            if any(b < a for a, b in zip(dims, dims[1:])):
                raise ConfigError("network widths must not decrease")
            if self.network.activation not in ("tanh", "leaky_relu"):
                raise ConfigError("network.activation must be 'tanh' or 'leaky_relu'")
            if self.network.eps <= 0 or self.network.slope <= 0:
                raise ConfigError("network.eps and network.slope must be positive")
            if self.oracle.horizon < 1 or self.oracle.conv_radius <= 0:
                raise ConfigError("oracle.horizon must be >= 1 and oracle.conv_radius positive")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def dim(self) -> int:
        if self.system.kind == "linear":
            return len(self.system.A)
        return 2


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path=None, seed=None, out=None) -> ExperimentConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply CLI overrides."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    return config_from_dict(data)
