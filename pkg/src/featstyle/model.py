"""Small CNN classifier with a pluggable stylization point and a two-branch training pass."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .losses import LossBundle, LossWeights, build_contrast_sets, consistency_loss, cross_entropy, dsupcon_loss, total_loss
from .stylization import TARGETS, SampledStyle, StyleScale, stylize
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FSCKPT\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 32)
    insertion_index: int = 1
    num_classes: int = 7
    in_channels: int = 3
    image_size: int = 32
    kernel_size: int = 3
    pool: str = "max"
    input_shift: float = 0.5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.pool not in ("max", "avg"):
            raise ParameterError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        if not self.stage_channels:
            raise ParameterError("need at least one stage")
        if not 0 <= self.insertion_index < len(self.stage_channels):
            raise DimensionError(
                f"insertion_index {self.insertion_index} must be below the stage count {len(self.stage_channels)}"
            )
        side = self.spatial_extent(self.insertion_index)
        if side < 2 or side % 2:
            raise DimensionError(f"stylization after stage {self.insertion_index} sees odd/degenerate extent {side}")

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[-1]

    def spatial_extent(self, stage: int) -> int:
        """Side length of the output of ``stage`` (every stage halves it)."""
        side = self.image_size
        for _ in range(stage + 1):
            if side % 2:
                raise DimensionError(f"image size {self.image_size} cannot be halved {stage + 1} times")
            side //= 2
        return side


@dataclass
class DualForwardOutput:
    logits_orig: Tensor
    logits_styl: Tensor
    embed_orig: Tensor
    embed_styl: Tensor


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = T.sqrt(T.clamp_min((x * x).sum(axis=1, keepdims=True), eps * eps))
    return x / norm


class SmallCNN:
    """Stages of conv -> bias -> ReLU -> 2x2 pool, then GAP and one linear layer.

    Inputs are shifted by ``input_shift`` first. ``g`` is everything up to the
    pooled feature; ``h`` is the linear classifier. Convolutions use He-uniform
    weights U(-sqrt(6/fan_in), sqrt(6/fan_in)) with zero bias; the classifier
    draws weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        k = config.kernel_size
        cin = config.in_channels
        for i, cout in enumerate(config.stage_channels):
            bound = np.sqrt(6.0 / (cin * k * k))
            self.params[f"stage{i}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
            self.params[f"stage{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        bound = 1.0 / np.sqrt(cin)
        self.params["classifier.weight"] = Tensor(rng.uniform(-bound, bound, (cin, config.num_classes)), requires_grad=True)
        self.params["classifier.bias"] = Tensor(rng.uniform(-bound, bound, config.num_classes), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def classifier_parameters(self) -> list[Tensor]:
        return [self.params["classifier.weight"], self.params["classifier.bias"]]

    def extractor_parameters(self) -> list[Tensor]:
        return [p for name, p in self.params.items() if not name.startswith("classifier.")]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    # -- pieces ---------------------------------------------------------------
    def _stage(self, i: int, h: Tensor) -> Tensor:
        pad = self.config.kernel_size // 2
        h = T.conv2d(h, self.params[f"stage{i}.weight"], self.params[f"stage{i}.bias"], stride=1, pad=pad)
        h = T.relu(h)
        return T.max_pool2(h) if self.config.pool == "max" else T.avg_pool2(h)

    def _run(self, h: Tensor, start: int, stop: int) -> Tensor:
        if start == 0 and self.config.input_shift:
            h = h - self.config.input_shift
        for i in range(start, stop):
            h = self._stage(i, h)
        return h

    def _head(self, h: Tensor) -> tuple[Tensor, Tensor]:
        pooled = h.mean(axis=(2, 3))
        logits = pooled @ self.params["classifier.weight"] + self.params["classifier.bias"]
        return logits, pooled

    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"expected input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")

    # -- public passes --------------------------------------------------------
    def forward_eval(self, x) -> Tensor:
        """Single branch, no stylization, no randomness."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        logits, _ = self._head(self._run(x, 0, len(self.config.stage_channels)))
        return logits

    def forward_train(
        self,
        x,
        scale: StyleScale,
        rng: np.random.Generator,
        target: str = "low",
        style: SampledStyle | None = None,
    ) -> DualForwardOutput:
        """Original and stylized branches sharing every weight.

        The stylized copy is made after stage ``insertion_index``; both copies are
        stacked along the batch axis for the remaining stages (no layer mixes
        batch items, so this equals two separate passes). ``style`` pins the
        sampled style, which is otherwise drawn from ``rng``.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        if target not in TARGETS:
            raise ParameterError(f"unknown stylize target {target!r}")
        b = x.shape[0]
        cut = self.config.insertion_index + 1
        z = self._run(x, 0, cut)
        z_styl = stylize(z, scale, rng, target=target, style=style)
        h = self._run(T.concat([z, z_styl], axis=0), cut, len(self.config.stage_channels))
        logits, pooled = self._head(h)
        embed = l2_normalize(pooled)
        return DualForwardOutput(
            logits_orig=T.slice_rows(logits, 0, b),
            logits_styl=T.slice_rows(logits, b, 2 * b),
            embed_orig=T.slice_rows(embed, 0, b),
            embed_styl=T.slice_rows(embed, b, 2 * b),
        )


def compute_losses(
    out: DualForwardOutput,
    labels,
    domains,
    w: LossWeights,
    ce_on_stylized: bool = False,
    dsup_reduction: str = "mean",
) -> LossBundle:
    """Weighted objective; cross-entropy on the original branch unless ``ce_on_stylized``."""
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if ce_on_stylized:
        ce = cross_entropy(T.concat([out.logits_orig, out.logits_styl], axis=0), np.concatenate([labels, labels]))
    else:
        ce = cross_entropy(out.logits_orig, labels)
    zero = Tensor(0.0)
    cons = consistency_loss(out.logits_orig, out.logits_styl, w.tau_cons) if w.lambda_cons > 0 else zero
    if w.lambda_dsup > 0:
        feats = T.concat([out.embed_orig, out.embed_styl], axis=0)
        sets = build_contrast_sets(np.concatenate([labels, labels]), np.concatenate([domains, domains]))
        dsup = dsupcon_loss(feats, sets, w.tau_dsup, reduction=dsup_reduction)
    else:
        dsup = zero
    bundle = total_loss(ce, cons, dsup, w)
    bundle.meta.update(ce_on_stylized=ce_on_stylized, dsup_reduction=dsup_reduction, batch=int(labels.size))
    return bundle


class SGD:
    """Heavy-ball SGD: v <- m v + (g + wd p); p <- p - lr v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ParameterError("invalid optimizer settings")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def backward_step(
    model: SmallCNN,
    out: DualForwardOutput,
    labels,
    domains,
    w: LossWeights,
    optimizer: SGD | None,
    ce_on_stylized: bool = False,
    dsup_reduction: str = "mean",
) -> LossBundle:
    """Losses, backward, and (if an optimizer is given) one parameter update."""
    bundle = compute_losses(out, labels, domains, w, ce_on_stylized, dsup_reduction)
    T.backward(bundle.total)
    if optimizer is not None:
        optimizer.step()
    return bundle


# -- checkpoints ---------------------------------------------------------------
def _rng_state(rng: np.random.Generator | None) -> dict | None:
    if rng is None:
        return None
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def save_checkpoint(path, model: SmallCNN, config: dict | None = None, rng: np.random.Generator | None = None) -> None:
    """Header (magic, version, JSON length, JSON) then float64 LE arrays in declaration order."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "backbone": asdict(model.config),
        "config": config or {},
        "rng_state": _rng_state(rng),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for p in model.params.values():
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[SmallCNN, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, length = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + length])
    backbone = header["backbone"]
    model = SmallCNN(BackboneConfig(**backbone), np.random.default_rng(0))
    offset = 16 + length
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        model.params[entry["name"]].data = arr
        offset += 8 * n
    if offset != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return model, header


def restore_rng(header: dict) -> np.random.Generator | None:
    state = header.get("rng_state")
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
