"""Training objectives: cross-entropy, consistency, (domain-aware) supervised contrastive."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_cons: float = 0.3
    lambda_dsup: float = 12.0
    tau_cons: float = 0.5
    tau_dsup: float = 0.15

    def __post_init__(self):
        if self.lambda_cons < 0 or self.lambda_dsup < 0:
            raise ParameterError("loss weights must be non-negative")
        if not 0 < self.tau_cons <= 1:
            raise ParameterError(f"tau_cons must lie in (0, 1], got {self.tau_cons}")
        if not self.tau_dsup > 0:
            raise ParameterError(f"tau_dsup must be positive, got {self.tau_dsup}")


@dataclass
class LossBundle:
    total: Tensor
    ce: Tensor
    cons: Tensor
    dsup: Tensor
    weights: LossWeights
    meta: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {
            "loss_total": self.total.item(),
            "loss_ce": self.ce.item(),
            "loss_cons": self.cons.item(),
            "loss_dsup": self.dsup.item(),
        }


@dataclass(frozen=True)
class ContrastSets:
    """Boolean membership matrices; row ``i`` describes anchor ``i``.

    ``candidates`` is A(i) (everyone but the anchor), ``positives`` is P(i)
    (same class), ``same_domain`` is D(i).
    """

    candidates: np.ndarray
    positives: np.ndarray
    same_domain: np.ndarray

    @property
    def domain_aware(self) -> np.ndarray:
        return self.positives | self.same_domain

    def indices(self, i: int) -> dict[str, set[int]]:
        return {
            "A": set(np.flatnonzero(self.candidates[i]).tolist()),
            "P": set(np.flatnonzero(self.positives[i]).tolist()),
            "D": set(np.flatnonzero(self.same_domain[i]).tolist()),
        }


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("labels must be a 1-D array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(int)] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, classes), got {logits.shape}")
    target = _one_hot(labels, logits.shape[1])
    if target.shape[0] != logits.shape[0]:
        raise DimensionError(f"{target.shape[0]} labels for {logits.shape[0]} rows")
    return -(T.log_softmax(logits) * target).sum() * (1.0 / logits.shape[0])


def consistency_loss(orig: Tensor, styl: Tensor, tau: float) -> Tensor:
    """Cross-entropy of the stylized prediction against the sharpened, detached original one."""
    if not 0 < tau <= 1:
        raise ParameterError(f"consistency temperature must lie in (0, 1], got {tau}")
    if orig.shape != styl.shape or orig.ndim != 2:
        raise DimensionError(f"prediction shapes differ or are not rank 2: {orig.shape} vs {styl.shape}")
    teacher = T.softmax(T.stop_gradient(orig), tau)
    return -(teacher * T.log_softmax(styl)).sum() * (1.0 / orig.shape[0])


def build_contrast_sets(class_labels, domain_labels) -> ContrastSets:
    y = np.asarray(class_labels)
    d = np.asarray(domain_labels)
    if y.shape != d.shape or y.ndim != 1:
        raise DimensionError("class and domain labels must be 1-D arrays of equal length")
    n = y.size
    cand = ~np.eye(n, dtype=bool)
    return ContrastSets(
        candidates=cand,
        positives=(y[:, None] == y[None, :]) & cand,
        same_domain=(d[:, None] == d[None, :]) & cand,
    )


def _contrastive(features: Tensor, positives: np.ndarray, denominator: np.ndarray, tau: float, reduction: str) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"contrastive temperature must be positive, got {tau}")
    if features.ndim != 2 or positives.shape != (features.shape[0],) * 2:
        raise DimensionError(f"features {features.shape} do not match sets {positives.shape}")
    counts = positives.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError(f"anchors {np.flatnonzero(counts == 0).tolist()} have no positives")
    sim = (features @ features.T) * (1.0 / tau)
    log_norm = T.masked_logsumexp(sim, denominator)
    # sum_p s_ip / |P(i)|  -  log sum_a exp(s_ia), per anchor
    pos_weight = positives / counts[:, None]
    per_anchor = (sim * pos_weight).sum(axis=1) - log_norm
    total = -per_anchor.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / features.shape[0])
    raise ParameterError(f"unknown reduction {reduction!r}")


def supcon_loss(features: Tensor, sets: ContrastSets, tau: float, reduction: str = "sum") -> Tensor:
    """Supervised contrastive loss with every other sample in the denominator."""
    return _contrastive(features, sets.positives, sets.candidates, tau, reduction)


def dsupcon_loss(features: Tensor, sets: ContrastSets, tau: float, reduction: str = "sum") -> Tensor:
    """Domain-aware variant: the denominator keeps only positives and same-domain samples."""
    return _contrastive(features, sets.positives, sets.domain_aware, tau, reduction)


def total_loss(ce, cons, dsup, w: LossWeights) -> LossBundle:
    ce, cons, dsup = (x if isinstance(x, Tensor) else Tensor(x) for x in (ce, cons, dsup))
    total = ce + cons * w.lambda_cons + dsup * w.lambda_dsup
    return LossBundle(total=total, ce=ce, cons=cons, dsup=dsup, weights=w)
