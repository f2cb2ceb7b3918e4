"""Experiment configuration: nested dataclasses loaded from strict JSON.

Every block is optional in the file; missing fields take their defaults and
unknown keys raise ConfigError naming the dotted field path. The top-level
``seed`` drives both data synthesis and the trainer.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .errors import ConfigError
from .oracle import RetrainConfig
from .optim import Algorithm, Hyper

COMMANDS = ("scatter", "sweep", "track", "evolve", "loco", "verify")


@dataclass
class ModelConfig:
    arch: str = "logistic"
    hidden: list[int] = field(default_factory=lambda: [32, 16])


@dataclass
class TrainerConfig:
    """``algorithm`` is ``map`` (damped Newton to ``tol``) or an optimizer name."""

    algorithm: str = "map"
    epochs: int = 20
    tol: float = 1e-10
    max_iter: int = 100
    lr: float = 0.1
    lr_min: float = 0.0
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    h0: float = 0.1
    batch_size: int | None = None
    mc_samples: int = 1
    eps: float = 1e-8
    init_scale: float = 0.1
    decoupled_decay: bool = False

    def hyper(self, seed: int) -> Hyper:
        keep = {f.name for f in dataclasses.fields(Hyper)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in keep}
        return Hyper(seed=seed, **kw)


@dataclass
class EstimatorConfig:
    """``view``: ``auto``, ``hessian`` (full GGN at the solution), ``diag_ggn`` or ``trainer``.

    ``auto`` picks ``hessian`` after a MAP fit and ``trainer`` otherwise.
    ``rho`` scales every estimated shift.
    """

    view: str = "auto"
    mode: str = "diag"
    rho: float = 1.0
    cap: int = 512


@dataclass
class RetrainBlock:
    tol: float = 1e-10
    max_iter: int = 100
    epochs: int = 200
    lr: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int | None = None

    def build(self, seed: int) -> RetrainConfig:
        return RetrainConfig(seed=seed, **dataclasses.asdict(self))


@dataclass
class ScatterConfig:
    n_removals: int = 50
    group_size: int = 1


@dataclass
class SweepConfig:
    """Explicit ``deltas`` override the log-spaced grid."""

    deltas: list[float] | None = None
    delta_min: float = 0.1
    delta_max: float = 100.0
    n_points: int = 10


@dataclass
class TrackConfig:
    every: int = 1


@dataclass
class EvolveConfig:
    """Track ``examples`` (or the first ``n_examples`` rows) every ``every`` epochs."""

    examples: list[int] | None = None
    n_examples: int = 20
    every: int = 1


@dataclass
class VerifyConfig:
    n_beta: int = 100
    n_ridge: int = 50
    iblr_steps: int = 10_000
    mc_samples: int = 20_000
    check_artifacts: bool = True


@dataclass
class ExperimentConfig:
    command: str | None = None
    seed: int = 0
    output_dir: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    retrain: RetrainBlock = field(default_factory=RetrainBlock)
    scatter: ScatterConfig = field(default_factory=ScatterConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def validate(self) -> None:
        if self.command is not None and self.command not in COMMANDS:
            raise ConfigError("command", f"unknown command {self.command!r}")
        if self.trainer.algorithm != "map":
            try:
                Algorithm(self.trainer.algorithm)
            except ValueError:
                raise ConfigError("trainer.algorithm", f"unknown algorithm {self.trainer.algorithm!r}") from None
        if self.estimator.view not in ("auto", "hessian", "diag_ggn", "trainer"):
            raise ConfigError("estimator.view", f"unknown view {self.estimator.view!r}")
        if self.estimator.view == "trainer" and self.trainer.algorithm == "map":
            raise ConfigError("estimator.view", "a MAP fit has no trainer preconditioner")
        if self.estimator.mode not in ("diag", "full"):
            raise ConfigError("estimator.mode", "must be 'diag' or 'full'")
        if self.trainer.epochs < 1:
            raise ConfigError("trainer.epochs", "must be >= 1")
        if self.sweep.n_points < 2 and self.sweep.deltas is None:
            raise ConfigError("sweep.n_points", "need at least 2 grid points")
        if self.sweep.deltas is not None and (len(self.sweep.deltas) < 2 or min(self.sweep.deltas) < 0):
            raise ConfigError("sweep.deltas", "need at least 2 nonnegative values")
        for name in ("track", "evolve"):
            if getattr(self, name).every < 1:
                raise ConfigError(f"{name}.every", "must be >= 1")
        if self.scatter.group_size < 1 or self.scatter.n_removals < 3:
            raise ConfigError("scatter", "need group_size >= 1 and n_removals >= 3")
        try:
            self.data.validate()
        except ValueError as err:
            raise ConfigError("data", str(err)) from None
        if self.trainer.algorithm != "map":
            try:
                self.trainer.hyper(self.seed).validate(Algorithm(self.trainer.algorithm))
            except ValueError as err:
                raise ConfigError("trainer", str(err)) from None


# nested seeds would silently disagree with the top-level one
_FORBIDDEN = {("data", "seed")}


def _check_type(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        (item,) = typing.get_args(tp)
        return [_check_type(v, item, f"{path}[{k}]") for k, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls, obj, path: str = ""):
    if not isinstance(obj, dict):
        raise ConfigError(path or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in obj.items():
        sub = f"{path}.{key}" if path else key
        if key not in names or (path, key) in _FORBIDDEN:
            raise ConfigError(sub, "unknown key")
        kw[key] = _check_type(value, hints[key], sub)
    return cls(**kw)


def from_dict(obj: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, obj)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(str(path), f"cannot read: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(str(path), f"invalid JSON at line {err.lineno}: {err.msg}") from None
    return from_dict(obj)


def to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["data"].pop("seed")
    return out
