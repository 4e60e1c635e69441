"""Flat ``key = value`` run configuration with typed defaults.

Values are Python literals (numbers, booleans, strings, tuples); ``#`` starts a
comment. Unknown keys are rejected.
"""
from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..data import TaskConfig
from ..errors import ParameterError
from ..losses import LossWeights
from ..model import BackboneConfig
from ..stylization import TARGETS, StyleScale


@dataclass(frozen=True)
class RunConfig:
    # task
    num_domains: int = 4
    num_classes: int = 7
    per_domain: int = 500
    image_size: int = 32
    data_seed: int = 0
    val_fraction: float = 0.1
    # backbone
    stage_channels: tuple = (8, 16, 32, 32)
    insertion_index: int = 1
    pool: str = "max"
    # objective
    lambda_cons: float = 0.3
    lambda_dsup: float = 1.0
    tau_cons: float = 0.5
    tau_dsup: float = 0.15
    dsup_reduction: str = "mean"
    ce_on_stylized: bool = False
    # stylization
    s_mu: float = 10.0
    s_sigma: float = 10.0
    stylize_target: str = "low"
    # optimisation
    epochs: int = 30
    lr: float = 0.01
    lr_decay_epoch: int = 20
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_per_domain: int = 16
    select: str = "best_val"
    # run
    seed: int = 0
    target_domain: int = 0
    seeds: int = 1

    def validate(self) -> "RunConfig":
        self.task().validate()
        self.backbone()
        self.weights()
        self.scale()
        if self.stylize_target not in TARGETS:
            raise ParameterError(f"stylize_target must be one of {TARGETS}")
        if self.dsup_reduction not in ("sum", "mean"):
            raise ParameterError("dsup_reduction must be 'sum' or 'mean'")
        if self.select not in ("last", "best_val"):
            raise ParameterError("select must be 'last' or 'best_val'")
        if self.epochs < 1 or self.batch_per_domain < 1 or self.seeds < 1:
            raise ParameterError("epochs, batch_per_domain and seeds must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ParameterError("invalid optimiser settings")
        if not 0 <= self.target_domain < self.num_domains:
            raise ParameterError(f"target_domain {self.target_domain} outside [0, {self.num_domains})")
        if not 0 < self.val_fraction < 1:
            raise ParameterError("val_fraction must lie in (0, 1)")
        return self

    def task(self) -> TaskConfig:
        return TaskConfig(self.num_domains, self.num_classes, self.per_domain, self.image_size, self.data_seed)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            stage_channels=tuple(self.stage_channels),
            insertion_index=self.insertion_index,
            pool=self.pool,
            num_classes=self.num_classes,
            image_size=self.image_size,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cons, self.lambda_dsup, self.tau_cons, self.tau_dsup)

    def scale(self) -> StyleScale:
        return StyleScale(self.s_mu, self.s_sigma)

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **coerce(overrides))

    def dump(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())


# Hyperparameters of the original ResNet-18 setting, for backbones that can use them.
PRESETS = {
    "desk": {},
    "paper-resnet18": dict(
        tau_cons=0.5, tau_dsup=0.15, lambda_cons=0.3, lambda_dsup=12.0,
        s_mu=10.0, s_sigma=10.0, batch_per_domain=42, epochs=40, lr=0.004,
        lr_decay_epoch=20, dsup_reduction="sum",
    ),
    "paper-resnet50": dict(
        tau_cons=0.5, tau_dsup=0.15, lambda_cons=0.9, lambda_dsup=6.0,
        s_mu=20.0, s_sigma=20.0, batch_per_domain=42, epochs=40, lr=0.004,
        lr_decay_epoch=20, dsup_reduction="sum",
    ),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def coerce(values: dict) -> dict:
    """Check keys and cast values to the type of each field's default."""
    out = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ParameterError(f"unknown config key {key!r}")
        default = _FIELDS[key].default
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(value)
        try:
            if isinstance(default, bool):
                if isinstance(value, str):
                    value = value.lower() in ("1", "true", "yes", "on")
                value = bool(value)
            elif isinstance(default, int):
                if float(value) != int(value):
                    raise ParameterError(f"{key} must be an integer, got {value!r}")
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
            elif isinstance(default, tuple):
                value = tuple(int(v) for v in (value if isinstance(value, (list, tuple)) else [value]))
            else:
                value = str(value)
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"cannot interpret {key} = {value!r}") from exc
        out[key] = value
    return out


def parse_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_value(value)
    return values


def load_config(path: str | Path | None = None, preset: str = "desk", **overrides) -> RunConfig:
    if preset not in PRESETS:
        raise ParameterError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if path is not None:
        values.update(parse_text(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**coerce(values)).validate()
