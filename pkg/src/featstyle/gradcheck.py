"""Central finite-difference checks of the autodiff engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int = 1

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    wrt: Sequence[int] | None = None,
    step: float = STEP,
) -> float:
    """Max relative error between backward and finite differences of ``fn(*tensors)``.

    ``fn`` must rebuild its graph on every call (it is re-evaluated for each
    perturbation) and return a scalar tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    T.backward(fn(*tensors))
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])

        def value() -> float:
            return fn(*[Tensor(a) for a in arrays]).item()

        numeric = numeric_grad(value, arrays[i], step)
        worst = max(worst, relative_error(np.asarray(analytic), numeric))
    return worst


# -- suites ----------------------------------------------------------------------
TOLERANCE = 1e-4


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    f = rng.standard_normal((n, d))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _two_view_labels(rng: np.random.Generator, b: int, classes: int, domains: int):
    y = rng.integers(0, classes, b)
    d = rng.integers(0, domains, b)
    return np.concatenate([y, y]), np.concatenate([d, d])


def _case_ce(rng):
    from .losses import cross_entropy

    logits = rng.standard_normal((6, 5)) * 2
    y = rng.integers(0, 5, 6)
    return check(lambda z: cross_entropy(z, y), [logits])


def _case_cons(rng):
    from .losses import consistency_loss

    orig, styl = rng.standard_normal((2, 6, 5)) * 2
    return check(lambda o, s: consistency_loss(o, s, 0.5), [orig, styl], wrt=[1])


def _contrastive_case(rng, domain_aware: bool):
    from .losses import build_contrast_sets, dsupcon_loss, supcon_loss

    y, d = _two_view_labels(rng, 4, 2, 3)
    sets = build_contrast_sets(y, d)
    fn = dsupcon_loss if domain_aware else supcon_loss
    raw = rng.standard_normal((8, 5))

    def loss(x):
        norm = T.sqrt((x * x).sum(axis=1, keepdims=True))
        return fn(x / norm, sets, 0.15)

    return check(loss, [raw])


def _case_stylize(rng):
    from .stylization import SampledStyle, StyleScale, stylize

    z = rng.standard_normal((3, 3, 4, 4))
    w = rng.standard_normal((3, 3, 4, 4))
    # the sampled style is a gradient constant; pin it so finite differences see the same map
    style = SampledStyle(rng.normal(0.0, 1.0, 3), rng.uniform(0.3, 2.0, 3))
    return check(lambda x: (stylize(x, StyleScale(), None, "low", style) * Tensor(w)).sum(), [z])


def _case_forward(rng):
    from .losses import LossWeights
    from .model import BackboneConfig, SmallCNN, compute_losses
    from .stylization import SampledStyle, StyleScale

    cfg = BackboneConfig(stage_channels=(3, 4), insertion_index=0, num_classes=3, image_size=8, pool="avg")
    model = SmallCNN(cfg, rng)
    x = rng.uniform(0.0, 1.0, (4, 3, 8, 8))
    y = np.array([0, 1, 2, 0])
    style = SampledStyle(rng.normal(0.0, 0.5, 3), rng.uniform(0.3, 1.5, 3))
    w = LossWeights(0.0, 0.0)
    names = list(model.params)
    arrays = [model.params[n].data for n in names]

    def loss(*params):
        for n, p in zip(names, params):
            model.params[n] = p
        out = model.forward_train(x, StyleScale(), None, style=style)
        return compute_losses(out, y, np.zeros(4, dtype=int), w, ce_on_stylized=True).total

    return check(loss, arrays)


SUITES: dict[str, Callable[[np.random.Generator], float]] = {
    "cross_entropy": _case_ce,
    "consistency": _case_cons,
    "supcon": lambda rng: _contrastive_case(rng, False),
    "dsupcon": lambda rng: _contrastive_case(rng, True),
    "stylize": _case_stylize,
    "stylized_forward": _case_forward,
}


def run_suites(
    seed: int = 0,
    instances: int = 20,
    tolerance: float = TOLERANCE,
    suites: dict[str, Callable[[np.random.Generator], float]] | None = None,
) -> list[GradCheckResult]:
    """Worst relative error of each suite over ``instances`` random cases."""
    suites = SUITES if suites is None else suites
    results = []
    for k, (name, case) in enumerate(suites.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        worst = max(case(rng) for _ in range(instances))
        results.append(GradCheckResult(name, worst, tolerance, instances))
    return results
