"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .model import VARIANTS, ModelConfig


class ConfigError(ValueError):
    pass


def normalize_variant(name: str) -> str:
    """Accept ``sam-smca`` as a spelling of ``sam_smca``."""
    v = name.strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of baseline, sam, sam-smca")
    return v


@dataclass(frozen=True)
class RunConfig:
    variant: str = "sam"
    strategy: str = "spm"
    reweight: bool = True
    search_range: str = "box"
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    backbone_lr_scale: float = 0.1
    weight_decay: float = 1e-4
    decay_step: int = -1  # -1: decay at 5/6 of the step budget
    decay_factor: float = 0.1
    batch_size: int = 4
    eval_interval: int = 250
    n_train: int = 500
    n_val: int = 100
    grad_clip: float = 0.1
    wall_clock: bool = True
    d: int = 64
    n_heads: int = 8
    n_queries: int = 16
    enc_layers: int = 2
    dec_layers: int = 2
    n_classes: int = 3
    image_size: int = 64
    stride: int = 8
    out: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if not 0 < self.effective_decay_step < self.steps and self.steps > 1:
            raise ConfigError(f"decay step {self.effective_decay_step} must lie inside (0, {self.steps})")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("lr must be positive; weight_decay and grad_clip nonnegative")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def effective_decay_step(self) -> int:
        if self.decay_step >= 0:
            return self.decay_step
        return max(1, (5 * self.steps) // 6)

    def model_config(self) -> ModelConfig:
        names = ModelConfig.field_names()
        return ModelConfig(**{n: getattr(self, n) for n in names})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str, kind: type):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


_TYPES = {"bool": bool, "int": int, "float": float, "str": str}


def field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    types = field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value, types[key])
    return values


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    unknown = set(overrides) - set(field_types())
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
