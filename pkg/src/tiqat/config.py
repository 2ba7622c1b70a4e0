"""Run configuration: nested dataclasses <-> JSON with pointer-addressed errors."""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .quant import GRANULARITIES
from .schedule import CASE_MODES, InterventionSchedule, TrainingBudget, validate

SEED_ENV = "TIQAT_SEED"


@dataclass
class ModelSection:
    L: int = 4
    d: int = 32
    H: int = 4
    d_ff: int = 64
    n: int = 16
    attn_scale: str = "sqrt_d"


@dataclass
class DataConfig:
    task: str = "induction"
    seed: int = 0
    n_train: int = 256
    n_dev: int = 256
    path: str | None = None  # dataset file; overrides generation when set


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    warmup_frac: float = 0.1
    end_lr_ratio: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


@dataclass
class TeacherConfig:
    iters: int = 1500
    batch_size: int = 32
    peak_lr: float = 1e-3
    eval_every: int = 100
    # teacher trains on max(pool, data.n_train) examples; the QAT split is a prefix
    pool: int = 0


@dataclass
class QuantConfig:
    granularity: str = "per_tensor"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: InterventionSchedule = field(default_factory=InterventionSchedule)
    quant: QuantConfig = field(default_factory=QuantConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    lambda_out: float = 1.0
    label_loss: bool = False
    student_init: str = "teacher"
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> RunConfig:
        return from_dict(_merge(self.to_dict(), changes))


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for k, v in changes.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _check_scalar(value, tp, pointer):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(value, inner[0], pointer)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(pointer, f"expected boolean, got {json.dumps(value)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(pointer, f"expected integer, got {json.dumps(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(pointer, f"expected number, got {json.dumps(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(pointer, f"expected string, got {json.dumps(value)}")
        return value
    return value


def _build(cls, obj, pointer: str):
    if not isinstance(obj, dict):
        raise ConfigError(pointer or "/", f"expected object, got {json.dumps(obj)}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"{pointer}/{key}", "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in obj:
            continue
        tp = hints[f.name]
        p = f"{pointer}/{f.name}"
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, obj[f.name], p)
        else:
            kwargs[f.name] = _check_scalar(obj[f.name], tp, p)
    return cls(**kwargs)


def from_dict(obj: dict) -> RunConfig:
    cfg = _build(RunConfig, obj, "")
    check(cfg)
    return cfg


def check(cfg: RunConfig) -> None:
    """Raise ConfigError for the first problem found."""
    for e in validate(cfg.schedule):
        raise ConfigError("/schedule" + e["pointer"], e["message"])
    if cfg.quant.granularity not in GRANULARITIES:
        raise ConfigError("/quant/granularity", f"must be one of {', '.join(GRANULARITIES)}")
    if cfg.student_init not in ("teacher", "random"):
        raise ConfigError("/student_init", "must be 'teacher' or 'random'")
    if cfg.model.d % cfg.model.H:
        raise ConfigError("/model/H", "d must be divisible by H")
    if cfg.model.attn_scale not in ("sqrt_d", "sqrt_dh"):
        raise ConfigError("/model/attn_scale", "must be 'sqrt_d' or 'sqrt_dh'")
    if not 0 <= cfg.optim.warmup_frac <= 1:
        raise ConfigError("/optim/warmup_frac", "must lie in [0, 1]")
    if cfg.teacher.pool < 0:
        raise ConfigError("/teacher/pool", "must be >= 0")
    if cfg.teacher.iters < 0:
        raise ConfigError("/teacher/iters", "must be >= 0")


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError("/seed", f"{SEED_ENV}={raw!r} is not an integer") from None
    return cfg.replace(seed=seed)


def with_mode(cfg: RunConfig, mode: str) -> RunConfig:
    """Set the schedule mode; case modes are single-phase so two-step is switched off."""
    return cfg.replace(schedule={"mode": mode, "two_step_enabled": mode not in CASE_MODES})


def load(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(obj)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json())


__all__ = ["RunConfig", "ModelSection", "DataConfig", "OptimConfig", "TeacherConfig",
           "QuantConfig", "InterventionSchedule", "TrainingBudget", "from_dict", "load",
           "save", "apply_env", "with_mode", "check"]
