"""Flat ``key = value`` run configuration with exact re-serialization."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model and data
    model: str = "C3A1(4)"
    data: str = "data/train"
    eval_data: str = "data/val"
    checkpoint: str = ""
    pretrained: str = ""
    seed: int = 0
    # synthesis
    n_samples: int = 256
    workers: int = 1
    # pose training
    batch_size: int = 16
    epochs: int = 230
    steps: int = 0  # > 0 replaces epochs (desk runs)
    base_lr: float = 1e-4
    lr_steps: tuple = (100, 150, 200, 220)
    lr_factor: float = 0.25
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    loss: str = "l2"
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    augment: bool = True
    # self-distillation pretraining
    dino_steps: int = 500
    dino_lr: float = 1e-3
    dino_batch: int = 16
    dino_scope: str = "groups"
    centering: bool = True
    # explainability
    image_id: int = 0
    keypoints: tuple = ("left_ankle",)
    head: int = -1  # -1 averages heads
    # throughput
    bench_iters: int = 100
    bench_batch: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        steps = list(self.lr_steps)
        if steps != sorted(set(steps)) or any(s >= self.epochs for s in steps):
            raise ConfigError(f"lr_steps {steps} must be strictly increasing and below epochs={self.epochs}")
        if self.loss not in ("l2", "sinkhorn"):
            raise ConfigError(f"loss must be l2 or sinkhorn, got {self.loss!r}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is available, got {self.optimizer!r}")


_TUPLE_ITEM = {"lr_steps": int, "keypoints": str}


def _field_types() -> dict[str, type]:
    hints = get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if kind is tuple:
            items = [v.strip() for v in raw.split(",") if v.strip()]
            return tuple(_TUPLE_ITEM[key](v) for v in items)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw.strip(), types[key])
    return replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    """Every effective value, one ``key = value`` line each, in declaration order."""
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))
