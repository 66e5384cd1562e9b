"""Training configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

MODES = ("plain", "ss", "ms")
G_OBJECTIVES = ("matching", "direct")

# per-mode defaults for the multi-task weights
_LAMBDA_DEFAULTS = {"plain": (0.0, 0.0), "ss": (1.0, 0.1), "ms": (1.0, 0.1)}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class TrainConfig:
    mode: str = "ms"
    lambda_d: float | None = None
    lambda_g: float | None = None
    K: int = 4
    latent_dim: int = 8
    batch_size: int = 64
    steps: int = 20000
    d_steps_per_g: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    seed: int = 0
    dataset: str = "grid25"
    data_sigma: float = 0.05
    data_scale: float = 1.0
    data_offset: tuple[float, float] = (3.0, 3.0)
    g_hidden: int = 64
    d_hidden: int = 64
    n_hidden: int = 2
    g_objective: str = "matching"
    pair_k: bool = True
    eval_every: int = 1000
    eval_samples: int = 10000
    checkpoint_every: int = 0
    timing: bool = False
    out_dir: str = ""
    idx_images: str = ""
    idx_labels: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        ld, lg = _LAMBDA_DEFAULTS[self.mode]
        if self.lambda_d is None:
            self.lambda_d = ld
        if self.lambda_g is None:
            self.lambda_g = lg
        for name in ("lambda_d", "lambda_g"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.mode == "plain" and (self.lambda_d != 0 or self.lambda_g != 0):
            raise ConfigError("mode = plain requires lambda_d = lambda_g = 0")
        if self.K != 4:
            raise ConfigError("only K = 4 rotations are supported")
        if self.g_objective not in G_OBJECTIVES:
            raise ConfigError(f"g_objective must be one of {G_OBJECTIVES}")
        for name in ("latent_dim", "batch_size", "d_steps_per_g", "g_hidden", "d_hidden",
                     "n_hidden", "eval_every", "eval_samples"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        data = dataclasses.asdict(self)
        if "mode" in changes and changes["mode"] != self.mode:
            # re-derive weight defaults unless given explicitly
            data["lambda_d"] = None
            data["lambda_g"] = None
        data.update(changes)
        return TrainConfig(**data)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind in ("float", "float | None"):
        return float(raw)
    if kind == "int":
        return int(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("tuple"):
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated numbers, got {raw!r}")
        return tuple(float(p) for p in parts)
    return raw


def parse_config_text(text: str) -> TrainConfig:
    values: dict = {}
    last_line: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno)
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        last_line[key] = lineno
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        culprit = [last_line[k] for k in ("lambda_d", "lambda_g", "mode") if k in last_line]
        raise ConfigError(str(exc), max(culprit) if culprit else None) from None


def parse_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def serialize_config(config: TrainConfig) -> str:
    """Canonical text: every field, declaration order, one per line."""
    return "".join(f"{f.name} = {_format_value(getattr(config, f.name))}\n" for f in fields(config))
