"""Training and evaluation loops for one leave-one-domain-out split."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..data import Dataset, EpisodeSplit, balanced_batches, generate_task, leave_one_domain_out
from ..errors import NumericalError
from ..losses import cross_entropy, total_loss
from ..model import SGD, SmallCNN, backward_step
from .config import RunConfig

log = logging.getLogger(__name__)

EVAL_CHUNK = 250


@dataclass
class MetricRecord:
    epoch: int
    split: str
    target_domain: int
    accuracy: float
    loss_total: float
    loss_ce: float
    loss_cons: float
    loss_dsup: float
    seed: int
    wall_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


METRIC_COLUMNS = ("epoch", "split", "target_domain", "seed", "accuracy", "loss_total", "loss_ce", "loss_cons", "loss_dsup")


@dataclass
class RunResult:
    config: RunConfig
    target_domain: int
    seed: int
    test_accuracy: float
    val_accuracy: float
    records: list[MetricRecord] = field(default_factory=list)
    model: SmallCNN | None = None
    selected_epoch: int = 0
    wall_time: float = 0.0


def run_seed(cfg: RunConfig, seed: int, target: int) -> int:
    """Deterministic per-(seed, target) stream id so splits never share randomness."""
    return int(np.random.SeedSequence([cfg.seed, seed, target]).generate_state(1)[0])


def evaluate(model: SmallCNN, dataset: Dataset, indices: np.ndarray) -> float:
    if len(indices) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(indices), EVAL_CHUNK):
        x, y, _ = dataset.batch(indices[start : start + EVAL_CHUNK])
        pred = model.forward_eval(x).data.argmax(axis=1)
        correct += int((pred == y).sum())
    return correct / len(indices)


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * (cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0)


def _snapshot(model: SmallCNN) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def train_split(
    cfg: RunConfig,
    dataset: Dataset,
    split: EpisodeSplit,
    seed: int = 0,
) -> RunResult:
    """Train on the split's sources, select a model, then evaluate once on the target."""
    started = time.perf_counter()
    stream = run_seed(cfg, seed, split.target_domain)
    init_rng = np.random.default_rng(np.random.SeedSequence([stream, 0]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([stream, 1]))
    style_rng = np.random.default_rng(np.random.SeedSequence([stream, 2]))

    model = SmallCNN(cfg.backbone(), init_rng)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    weights = cfg.weights()
    scale = cfg.scale()
    plain = cfg.stylize_target == "off" and weights.lambda_cons == 0 and weights.lambda_dsup == 0 and not cfg.ce_on_stylized

    records: list[MetricRecord] = []
    best_val, best_epoch, best_state = -1.0, 0, None
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        sums = np.zeros(4)
        correct = seen = steps = 0
        for idx in balanced_batches(split, dataset.domains, cfg.batch_per_domain, batch_rng):
            x, y, d = dataset.batch(idx)
            opt.zero_grad()
            if plain:
                logits = model.forward_eval(x)
                bundle = total_loss(cross_entropy(logits, y), 0.0, 0.0, weights)
                T.backward(bundle.total)
                opt.step()
            else:
                out = model.forward_train(x, scale, style_rng, target=cfg.stylize_target)
                logits = out.logits_orig
                bundle = backward_step(model, out, y, d, weights, opt, cfg.ce_on_stylized, cfg.dsup_reduction)
            vals = bundle.as_floats()
            if not np.isfinite(vals["loss_total"]):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {steps} (target {split.target_domain}, seed {seed}): {vals}"
                )
            sums += [vals["loss_total"], vals["loss_ce"], vals["loss_cons"], vals["loss_dsup"]]
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            steps += 1
        sums /= max(steps, 1)
        records.append(MetricRecord(epoch, "train", split.target_domain, correct / max(seen, 1), *sums, seed=seed))
        val_acc = evaluate(model, dataset, split.val)
        records.append(MetricRecord(epoch, "val", split.target_domain, val_acc, *sums, seed=seed))
        log.debug("target %d seed %d epoch %d: train %.3f val %.3f loss %.4f",
                  split.target_domain, seed, epoch, records[-2].accuracy, val_acc, sums[0])
        if cfg.select == "best_val" and val_acc > best_val:
            best_val, best_epoch, best_state = val_acc, epoch, _snapshot(model)

    if cfg.select == "best_val" and best_state is not None:
        for k, v in best_state.items():
            model.params[k].data = v
    else:
        best_val, best_epoch = records[-1].accuracy, cfg.epochs - 1

    # target data is touched only here, after training has finished
    test_acc = evaluate(model, dataset, split.test)
    records.append(MetricRecord(best_epoch, "test", split.target_domain, test_acc, *sums, seed=seed))
    elapsed = time.perf_counter() - started
    return RunResult(
        config=cfg, target_domain=split.target_domain, seed=seed, test_accuracy=test_acc,
        val_accuracy=best_val, records=records, model=model, selected_epoch=best_epoch, wall_time=elapsed,
    )


_TASK_CACHE: dict = {}


def _cached_task(cfg: RunConfig) -> Dataset:
    key = cfg.task()
    if key not in _TASK_CACHE:
        _TASK_CACHE.clear()
        _TASK_CACHE[key] = generate_task(key)
    return _TASK_CACHE[key]


def _job(cfg: RunConfig, seed: int, target: int, keep_model: bool) -> RunResult:
    dataset = _cached_task(cfg)
    split = leave_one_domain_out(dataset, target, cfg.val_fraction, cfg.data_seed)
    result = train_split(cfg, dataset, split, seed)
    if not keep_model:
        result.model = None
    return result


def run_protocol(
    cfg: RunConfig,
    dataset: Dataset | None = None,
    seeds: list[int] | None = None,
    workers: int = 1,
    keep_models: bool = False,
) -> list[RunResult]:
    """Every domain as target once, for each seed; results ordered by (seed, target).

    With ``workers > 1`` the splits run in separate processes, each regenerating
    the task from its config; every split owns its RNG streams, so the results
    do not depend on the worker count.
    """
    seeds = list(range(cfg.seeds)) if seeds is None else seeds
    jobs = [(seed, target) for seed in seeds for target in range(cfg.num_domains)]
    if workers > 1 and dataset is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_job, cfg, seed, target, keep_models) for seed, target in jobs]
            return [f.result() for f in futures]
    dataset = dataset or _cached_task(cfg)
    results = []
    for seed, target in jobs:
        split = leave_one_domain_out(dataset, target, cfg.val_fraction, cfg.data_seed)
        result = train_split(cfg, dataset, split, seed)
        if not keep_models:
            result.model = None
        results.append(result)
        log.info("seed %d target %d: test %.4f (val %.4f, %.1fs)", seed, target, result.test_accuracy,
                 result.val_accuracy, result.wall_time)
    return results
