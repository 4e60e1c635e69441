"""Feature stylization block.

A feature map is split into a block-averaged low-frequency part and a residual
high-frequency part. The low part is renormalised with its batch-wide channel
statistics and re-styled with a mean/std pair drawn from Gaussians fitted to
those statistics across channels, then added back to the untouched high part.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, ParameterError
from .tensor import Tensor

EPS = 1e-5
TARGETS = ("low", "high", "whole", "off")


@dataclass(frozen=True)
class FrequencyPair:
    low: Tensor
    high: Tensor


@dataclass(frozen=True)
class StyleStats:
    """Per-channel batch mean and (clamped) std, each of shape ``(C,)``."""

    mu: Tensor
    sigma: Tensor

    @property
    def channels(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class StyleDistribution:
    mu_hat: float
    sigma_hat2: float
    mu_tilde: float
    sigma_tilde2: float


@dataclass(frozen=True)
class SampledStyle:
    mu_new: np.ndarray
    sigma_new: np.ndarray


@dataclass(frozen=True)
class StyleScale:
    s_mu: float = 10.0
    s_sigma: float = 10.0

    def __post_init__(self):
        if self.s_mu < 0 or self.s_sigma < 0:
            raise ParameterError(f"style scales must be non-negative, got ({self.s_mu}, {self.s_sigma})")


def decompose(z) -> FrequencyPair:
    """Split ``z`` into ``low = UP(AvgPool(z))`` and ``high = z - low``.

    ``low + high`` equals ``z`` up to one rounding of the sum; it is exact
    whenever ``z - low`` is representable (for instance when a block's entries
    share sign and binade).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim != 4:
        raise DimensionError(f"expected a (B, C, H, W) feature map, got shape {z.shape}")
    low = T.upsample_nearest2(T.avg_pool2(z))
    return FrequencyPair(low=low, high=z - low)


def batch_style_stats(z_low, eps: float = EPS) -> StyleStats:
    """Channel mean and population std over every (batch, row, column) position."""
    z_low = z_low if isinstance(z_low, Tensor) else Tensor(z_low)
    if z_low.ndim != 4:
        raise DimensionError(f"expected a (B, C, H, W) feature map, got shape {z_low.shape}")
    b, c, h, w = z_low.shape
    if b * h * w < 2:
        raise DomainError("style statistics need at least two positions per channel")
    mu, var = T.reduce_stats(z_low, (0, 2, 3))
    sigma = T.sqrt(T.clamp_min(var, eps * eps))
    return StyleStats(mu=mu.reshape(c), sigma=sigma.reshape(c))


def style_distribution(stats: StyleStats) -> StyleDistribution:
    """Cross-channel mean and variance of the style vectors; treated as constants."""
    mu = stats.mu.data
    sigma = stats.sigma.data
    return StyleDistribution(
        mu_hat=float(mu.mean()),
        sigma_hat2=float(mu.var()),
        mu_tilde=float(sigma.mean()),
        sigma_tilde2=float(sigma.var()),
    )


def sample_style(
    dist: StyleDistribution,
    scale: StyleScale,
    channels: int,
    rng: np.random.Generator,
    eps: float = EPS,
) -> SampledStyle:
    """Draw one style vector per channel from the scaled Gaussians."""
    if channels < 1:
        raise DimensionError("need at least one channel")
    mu_new = rng.normal(dist.mu_hat, np.sqrt(scale.s_mu * dist.sigma_hat2), size=channels)
    sigma_new = rng.normal(dist.mu_tilde, np.sqrt(scale.s_sigma * dist.sigma_tilde2), size=channels)
    return SampledStyle(mu_new=mu_new, sigma_new=np.maximum(sigma_new, eps))


def apply_style(z_low, stats: StyleStats, new: SampledStyle) -> Tensor:
    """Normalise with ``stats`` and re-scale/shift to ``new``, channel-wise."""
    z_low = z_low if isinstance(z_low, Tensor) else Tensor(z_low)
    c = z_low.shape[1] if z_low.ndim == 4 else -1
    if not (stats.channels == c == len(new.mu_new) == len(new.sigma_new)):
        raise DimensionError(
            f"channel mismatch: feature {c}, stats {stats.channels}, style {len(new.mu_new)}/{len(new.sigma_new)}"
        )
    normed = (z_low - stats.mu) / stats.sigma
    return normed * Tensor(new.sigma_new) + Tensor(new.mu_new)


def restyle(x, scale: StyleScale, rng: np.random.Generator, style: SampledStyle | None = None) -> Tensor:
    """Batch statistics of ``x`` -> Gaussian prior -> sampled style -> affine transform.

    A given ``style`` skips the sampling (used to pin styles in gradient checks).
    """
    stats = batch_style_stats(x)
    new = style if style is not None else sample_style(style_distribution(stats), scale, stats.channels, rng)
    return apply_style(x, stats, new)


def stylize(
    z,
    scale: StyleScale,
    rng: np.random.Generator,
    target: str = "low",
    style: SampledStyle | None = None,
) -> Tensor:
    """Re-style one frequency band of ``z`` and recombine.

    ``target`` picks the band: ``"low"`` (default), ``"high"``, ``"whole"``
    (no decomposition), or ``"off"`` (identity). ``style`` pins the sample.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    if target not in TARGETS:
        raise ParameterError(f"unknown stylize target {target!r}; choose from {TARGETS}")
    if target == "off":
        return z
    if target == "whole":
        return restyle(z, scale, rng, style)
    parts = decompose(z)
    if target == "low":
        return parts.high + restyle(parts.low, scale, rng, style)
    return restyle(parts.high, scale, rng, style) + parts.low
