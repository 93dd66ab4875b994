"""Run configuration: one structured YAML file with named blocks.

Every block mirrors a solver-side dataclass and every field defaults to the
experiment value, so an empty file is a complete, runnable configuration.
Parsing is strict: unknown keys fail with their full path rather than being
ignored, and parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .anderson import AndersonConfig
from .market import (
    DEFAULT_CALIBRATION_TIMES,
    DEFAULT_STRIKE_COUNTS,
    SsviParams,
)
from .multiscale import MultiscaleConfig
from .sinkhorn import SolverConfig

__all__ = [
    "MarketBlock",
    "DiscretizationBlock",
    "SolverBlock",
    "AccelerationBlock",
    "LadderBlock",
    "OutputBlock",
    "RunConfig",
    "load_config",
    "save_config",
    "config_from_dict",
    "config_to_dict",
]


@dataclass
class MarketBlock:
    ssvi: SsviParams = field(default_factory=SsviParams)
    spot: float = 100.0
    calibration_times: tuple = DEFAULT_CALIBRATION_TIMES
    strike_counts: tuple = DEFAULT_STRIKE_COUNTS

    def validate(self) -> None:
        self.ssvi.validate()
        if self.spot <= 0.0:
            raise ValueError("market.spot must be positive")
        if not self.calibration_times:
            raise ValueError("market.calibration_times must be nonempty")
        if len(self.calibration_times) != len(self.strike_counts):
            raise ValueError(
                "market.strike_counts must align with calibration_times")


@dataclass
class DiscretizationBlock:
    delta: float = 5.0  # domain truncation half-width, running stds
    points_per_std: float = 4.0
    grid_cap: int = 2000

    def validate(self) -> None:
        if self.delta <= 0.0 or self.points_per_std <= 0.0:
            raise ValueError("discretization widths must be positive")
        if self.grid_cap < 2:
            raise ValueError("discretization.grid_cap must be at least 2")


@dataclass
class SolverBlock:
    c_mart: float = 1e4
    gamma: float = 1e6  # uniform price-penalty curvature
    eps_stop: float = 1e-6
    max_sweeps: int = 800
    newton_tol: float = 1e-11
    newton_max_iter: int = 60
    max_halvings: int = 30

    def validate(self) -> None:
        if self.gamma < 0.0:
            # zero is allowed: weightless quotes exert no pull, so the run
            # reproduces the reference (useful as a fixed-point check)
            raise ValueError("solver.gamma must be nonnegative")
        if self.c_mart < 0.0:
            raise ValueError("solver.c_mart must be nonnegative")
        self.to_solver_config().validate()

    def to_solver_config(self) -> SolverConfig:
        return SolverConfig(eps_stop=self.eps_stop,
                            max_sweeps=self.max_sweeps,
                            newton_tol=self.newton_tol,
                            newton_max_iter=self.newton_max_iter,
                            max_halvings=self.max_halvings)


@dataclass
class AccelerationBlock:
    enabled: bool = False
    depth: int = 5
    ridge: float = 1e-10
    safeguard: float = 2.0

    def validate(self) -> None:
        self.to_anderson_config(force=True).validate()

    def to_anderson_config(self, force: bool = False):
        if not (self.enabled or force):
            return None
        return AndersonConfig(depth=self.depth, ridge=self.ridge,
                              safeguard=self.safeguard)


@dataclass
class LadderBlock:
    step_counts: tuple = (5, 10, 20)

    def validate(self) -> None:
        if not self.step_counts:
            raise ValueError("ladder.step_counts must be nonempty")
        counts = tuple(int(n) for n in self.step_counts)
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("ladder.step_counts must be strictly increasing")


@dataclass
class OutputBlock:
    directory: str = "out"
    verbosity: str = "info"  # quiet | info | debug
    emit_residuals: bool = True
    emit_surface: bool = True
    emit_ivols: bool = True

    def validate(self) -> None:
        if not self.directory:
            raise ValueError("output.directory must be nonempty")
        if self.verbosity not in ("quiet", "info", "debug"):
            raise ValueError(
                "output.verbosity must be one of quiet, info, debug")


@dataclass
class RunConfig:
    market: MarketBlock = field(default_factory=MarketBlock)
    discretization: DiscretizationBlock = field(
        default_factory=DiscretizationBlock)
    solver: SolverBlock = field(default_factory=SolverBlock)
    acceleration: AccelerationBlock = field(
        default_factory=AccelerationBlock)
    ladder: LadderBlock = field(default_factory=LadderBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    seed: int | None = None  # Monte-Carlo verification seed

    def validate(self) -> None:
        self.market.validate()
        self.discretization.validate()
        self.solver.validate()
        self.acceleration.validate()
        self.ladder.validate()
        self.output.validate()
        if self.seed is not None and int(self.seed) < 0:
            raise ValueError("seed must be nonnegative")

    def to_multiscale_config(self) -> MultiscaleConfig:
        return MultiscaleConfig(
            step_counts=tuple(int(n) for n in self.ladder.step_counts),
            delta=self.discretization.delta,
            points_per_std=self.discretization.points_per_std,
            grid_cap=self.discretization.grid_cap,
            c_mart=self.solver.c_mart,
        )


# ---------------------------------------------------------------------------
# dict <-> dataclass with strict keys and tuple normalization
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {"calibration_times", "strike_counts", "step_counts"}
_NESTED = {"ssvi": SsviParams}
_BLOCKS = {
    "market": MarketBlock,
    "discretization": DiscretizationBlock,
    "solver": SolverBlock,
    "acceleration": AccelerationBlock,
    "ladder": LadderBlock,
    "output": OutputBlock,
}


def _fill(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or 'top level'!r} must be a "
                         f"mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        where = f"{path}.{sorted(unknown)[0]}" if path else sorted(unknown)[0]
        raise ValueError(f"unknown config key {where!r}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        value = data[name]
        if name in _NESTED:
            kwargs[name] = _fill(_NESTED[name], value, sub)
        elif name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"config key {sub!r} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    unknown = set(data) - (set(_BLOCKS) | {"seed"})
    if unknown:
        raise ValueError(f"unknown config key {sorted(unknown)[0]!r}")
    blocks = {name: _fill(cls, data.get(name), name)
              for name, cls in _BLOCKS.items()}
    seed = data.get("seed")
    blocks["seed"] = None if seed is None else int(seed)
    cfg = RunConfig(**blocks)
    cfg.validate()
    return cfg


def _plain(value):
    if is_dataclass(value):
        return {k: _plain(v) for k, v in asdict(value).items()}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        out[f.name] = _plain(value)
    return out


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
