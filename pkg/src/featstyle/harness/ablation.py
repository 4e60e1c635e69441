"""The fixed ablation grids: loss components, style scale, frequency band, insertion point."""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import ParameterError
from .config import RunConfig

AXES = ("components", "scale", "frequency", "location")
SCALES = (1.0, 5.0, 10.0, 15.0, 20.0)


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict


def erm_overrides() -> dict:
    return dict(stylize_target="off", lambda_cons=0.0, lambda_dsup=0.0, ce_on_stylized=False)


def grid(axis: str, cfg: RunConfig) -> list[Variant]:
    """Variants of ``cfg`` along one ablation axis, in reporting order."""
    if axis == "components":
        return [
            Variant("baseline", erm_overrides()),
            Variant("fs_ce_both", dict(stylize_target="low", lambda_cons=0.0, lambda_dsup=0.0, ce_on_stylized=True)),
            Variant("fs_cons", dict(stylize_target="low", lambda_dsup=0.0, ce_on_stylized=False)),
            Variant("fs_dsup", dict(stylize_target="low", lambda_cons=0.0, ce_on_stylized=False)),
            Variant("full", dict(stylize_target="low", ce_on_stylized=False)),
        ]
    if axis == "scale":
        return [Variant(f"s={s:g}", dict(s_mu=s, s_sigma=s)) for s in SCALES]
    if axis == "frequency":
        return [Variant(t, dict(stylize_target=t)) for t in ("whole", "high", "low")]
    if axis == "location":
        return [
            Variant(f"after_stage{i}", dict(insertion_index=i))
            for i in range(len(cfg.stage_channels))
            if _valid_location(cfg, i)
        ]
    raise ParameterError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _valid_location(cfg: RunConfig, index: int) -> bool:
    try:
        cfg.with_overrides(insertion_index=index).validate()
    except (ParameterError, ValueError):
        return False
    return True
