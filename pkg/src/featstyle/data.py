"""Synthetic multi-domain image classification data.

Class identity is carried by a procedural glyph (bar, cross, disk, ring, ...)
at a random pose; domain identity by colour, contrast and texture statistics.
Glyph poses are drawn from the same distribution in every domain, so the two
factors are independent by construction.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ParameterError

SHAPES = ("hbar", "vbar", "plus", "disk", "ring", "frame", "xcross")
DATASET_MAGIC = b"FSDATA\x00\x00"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    background: tuple[float, float, float]
    foreground: tuple[float, float, float]
    contrast: float = 1.0
    noise: float = 0.03
    texture: float = 0.0
    texture_cells: int = 4
    color_jitter: float = 0.05
    name: str = ""


# Hand-picked styles for the default four-domain task: each domain shifts the
# colour statistics in its own direction.
PRESET_DOMAINS = (
    DomainSpec(0, (0.15, 0.15, 0.18), (0.90, 0.88, 0.80), contrast=1.0, noise=0.03, texture=0.05, name="photo"),
    DomainSpec(1, (0.10, 0.20, 0.55), (0.95, 0.80, 0.20), contrast=0.9, noise=0.04, texture=0.25, name="art"),
    DomainSpec(2, (0.50, 0.10, 0.10), (0.60, 0.95, 0.90), contrast=0.8, noise=0.02, texture=0.0, name="cartoon"),
    DomainSpec(3, (0.55, 0.55, 0.52), (0.95, 0.95, 0.95), contrast=0.7, noise=0.07, texture=0.10, name="sketch"),
)


@dataclass(frozen=True)
class TaskConfig:
    num_domains: int = 4
    num_classes: int = 7
    per_domain: int = 500
    image_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.num_domains < 2:
            raise ParameterError("need at least two domains")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ParameterError(f"num_classes must lie in [1, {len(SHAPES)}]")
        if self.per_domain < 1:
            raise ParameterError("per_domain must be positive")
        if self.image_size < 8 or self.image_size % 2:
            raise ParameterError("image_size must be even and at least 8")


@dataclass(frozen=True)
class Pose:
    cx: float
    cy: float
    size: float
    width: float
    angle: float


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    domains: np.ndarray  # (N,) int64
    config: TaskConfig
    specs: tuple[DomainSpec, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Float64 images, labels and domains for ``indices``."""
        idx = np.asarray(indices, dtype=np.int64)
        return self.images[idx].astype(np.float64), self.labels[idx], self.domains[idx]

    def domain_indices(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.domains == d)


@dataclass(frozen=True)
class EpisodeSplit:
    source_domains: tuple[int, ...]
    target_domain: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


# -- rendering -------------------------------------------------------------------
def domain_specs(num_domains: int, seed: int = 0) -> tuple[DomainSpec, ...]:
    """Preset styles for the first four domains; extra domains get seeded random palettes."""
    specs = list(PRESET_DOMAINS[:num_domains])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    for d in range(len(specs), num_domains):
        bg = tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))
        fg = tuple(float(np.clip(1.0 - v + rng.normal(0, 0.1), 0.05, 0.95)) for v in bg)
        specs.append(
            DomainSpec(
                d, bg, fg,
                contrast=float(rng.uniform(0.7, 1.0)),
                noise=float(rng.uniform(0.01, 0.06)),
                texture=float(rng.uniform(0.0, 0.25)),
                name=f"domain{d}",
            )
        )
    return tuple(specs)


def random_pose(rng: np.random.Generator, image_size: int) -> Pose:
    s = image_size
    return Pose(
        cx=float(s / 2 + rng.uniform(-0.12, 0.12) * s),
        cy=float(s / 2 + rng.uniform(-0.12, 0.12) * s),
        size=float(rng.uniform(0.22, 0.32) * s),
        width=float(rng.uniform(0.06, 0.09) * s),
        angle=float(rng.uniform(-0.25, 0.25)),
    )


def shape_mask(label: int, pose: Pose, image_size: int) -> np.ndarray:
    """Anti-aliased glyph coverage in [0, 1], shape (H, W)."""
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    dx, dy = xx - pose.cx, yy - pose.cy
    c, s = np.cos(pose.angle), np.sin(pose.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = np.hypot(u, v)
    half = pose.width / 2
    name = SHAPES[label]

    def bar(a, b):  # distance outside an axis-aligned box |a| <= size, |b| <= half
        return np.maximum(np.abs(a) - pose.size, np.abs(b) - half)

    if name == "hbar":
        dist = bar(u, v)
    elif name == "vbar":
        dist = bar(v, u)
    elif name == "plus":
        dist = np.minimum(bar(u, v), bar(v, u))
    elif name == "xcross":
        p, q = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        dist = np.minimum(bar(p, q), bar(q, p))
    elif name == "disk":
        dist = r - pose.size * 0.85
    elif name == "ring":
        dist = np.abs(r - pose.size * 0.85) - half
    elif name == "frame":
        box = np.maximum(np.abs(u), np.abs(v))
        dist = np.abs(box - pose.size * 0.8) - half
    else:  # pragma: no cover - guarded by TaskConfig.validate
        raise ParameterError(f"unknown shape {name}")
    return np.clip(0.5 - dist, 0.0, 1.0)


def _texture_field(rng: np.random.Generator, cells: int, image_size: int) -> np.ndarray:
    coarse = rng.standard_normal((3, cells, cells))
    rep = image_size // cells
    field_ = np.repeat(np.repeat(coarse, rep, axis=1), rep, axis=2)
    # box blur once so cell edges do not inject high-frequency energy
    k = max(rep // 2, 1)
    pad = np.pad(field_, ((0, 0), (k, k), (k, k)), mode="edge")
    csum = pad.cumsum(axis=1).cumsum(axis=2)
    csum = np.pad(csum, ((0, 0), (1, 0), (1, 0)))
    w = 2 * k + 1
    n = image_size
    box = csum[:, w : w + n, w : w + n] - csum[:, :n, w : w + n] - csum[:, w : w + n, :n] + csum[:, :n, :n]
    return box / (w * w)


def render(label: int, pose: Pose, spec: DomainSpec, rng: np.random.Generator, image_size: int) -> np.ndarray:
    """One (3, H, W) image in [0, 1]."""
    mask = shape_mask(label, pose, image_size)
    jitter = rng.normal(0.0, spec.color_jitter, (2, 3))
    bg = np.asarray(spec.background) + jitter[0]
    fg = np.asarray(spec.foreground) + jitter[1]
    img = bg[:, None, None] + spec.contrast * (fg - bg)[:, None, None] * mask[None]
    if spec.texture:
        img = img + spec.texture * _texture_field(rng, spec.texture_cells, image_size)
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_task(config: TaskConfig | None = None, specs: tuple[DomainSpec, ...] | None = None) -> Dataset:
    """Balanced classes within every domain; deterministic for a given config."""
    config = config or TaskConfig()
    config.validate()
    specs = specs or domain_specs(config.num_domains, config.seed)
    n, s = config.per_domain, config.image_size
    images = np.empty((config.num_domains * n, 3, s, s), dtype=np.float32)
    labels = np.empty(config.num_domains * n, dtype=np.int64)
    domains = np.empty(config.num_domains * n, dtype=np.int64)
    for d, spec in enumerate(specs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, d]))
        ys = rng.permutation(np.arange(n) % config.num_classes)
        for j, y in enumerate(ys):
            pose = random_pose(rng, s)
            k = d * n + j
            images[k] = render(int(y), pose, spec, rng, s)
            labels[k] = y
            domains[k] = d
    return Dataset(images=images, labels=labels, domains=domains, config=config, specs=tuple(specs))


# -- protocol ----------------------------------------------------------------------
def leave_one_domain_out(dataset: Dataset, target: int, val_fraction: float = 0.1, seed: int = 0) -> EpisodeSplit:
    """Target domain -> test; each source domain split train/val independently."""
    k = dataset.config.num_domains
    if not 0 <= target < k:
        raise ParameterError(f"unknown target domain {target}; task has {k} domains")
    if not 0 <= val_fraction < 1:
        raise ParameterError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, target, 31337]))
    train, val = [], []
    sources = tuple(d for d in range(k) if d != target)
    for d in sources:
        idx = rng.permutation(dataset.domain_indices(d))
        n_val = int(round(val_fraction * len(idx)))
        val.append(np.sort(idx[:n_val]))
        train.append(np.sort(idx[n_val:]))
    return EpisodeSplit(
        source_domains=sources,
        target_domain=target,
        train=np.concatenate(train),
        val=np.concatenate(val),
        test=dataset.domain_indices(target),
    )


def all_splits(dataset: Dataset, val_fraction: float = 0.1, seed: int = 0) -> list[EpisodeSplit]:
    return [leave_one_domain_out(dataset, t, val_fraction, seed) for t in range(dataset.config.num_domains)]


def balanced_batches(
    split: EpisodeSplit,
    domains: np.ndarray,
    per_domain: int,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """One epoch of index batches holding exactly ``per_domain`` items from every source domain."""
    if per_domain < 1:
        raise ParameterError("per_domain must be at least 1")
    pools = [split.train[domains[split.train] == d] for d in split.source_domains]
    smallest = min(len(p) for p in pools)
    if per_domain > smallest:
        raise ParameterError(f"per_domain={per_domain} exceeds the smallest source pool ({smallest})")
    shuffled = [rng.permutation(p) for p in pools]
    for b in range(smallest // per_domain):
        yield np.concatenate([p[b * per_domain : (b + 1) * per_domain] for p in shuffled])


# -- serialisation -------------------------------------------------------------------
def save_dataset(dataset: Dataset, path, manifest: bool = False) -> None:
    """Binary container plus ``<path>.json`` sidecar (and ``<path>.csv`` manifest if asked).

    Layout (little-endian): magic[8], u32 version, u32 K, u32 classes, u32 C,
    u32 H, u32 W, K x u32 per-domain counts, images f32 (N*C*H*W), labels i32
    (N), domains i32 (N).
    """
    path = Path(path)
    cfg = dataset.config
    n, c, h, w = dataset.images.shape
    counts = [int((dataset.domains == d).sum()) for d in range(cfg.num_domains)]
    with path.open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<6I", DATASET_VERSION, cfg.num_domains, cfg.num_classes, c, h, w))
        fh.write(struct.pack(f"<{cfg.num_domains}I", *counts))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(dataset.domains, dtype="<i4").tobytes())
    sidecar = {"format_version": DATASET_VERSION, "task": asdict(cfg), "domains": [asdict(s) for s in dataset.specs]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    if manifest:
        with path.with_suffix(path.suffix + ".csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "label", "shape", "domain", "mean_r", "mean_g", "mean_b"])
            means = dataset.images.mean(axis=(2, 3))
            for i in range(n):
                y = int(dataset.labels[i])
                writer.writerow([i, y, SHAPES[y], int(dataset.domains[i])] + [f"{m:.6f}" for m in means[i]])


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path} is not a dataset container")
    version, k, classes, c, h, w = struct.unpack("<6I", raw[8:32])
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    counts = struct.unpack(f"<{k}I", raw[32 : 32 + 4 * k])
    n = sum(counts)
    off = 32 + 4 * k
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off).reshape(n, c, h, w).astype(np.float32)
    off += 4 * n * c * h * w
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    domains = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if sidecar_path.exists():
        side = json.loads(sidecar_path.read_text())
        config = TaskConfig(**side["task"])
        specs = tuple(
            DomainSpec(**{**s, "background": tuple(s["background"]), "foreground": tuple(s["foreground"])})
            for s in side["domains"]
        )
    else:
        config = TaskConfig(num_domains=k, num_classes=classes, per_domain=counts[0], image_size=h)
        specs = ()
    return Dataset(images=images, labels=labels, domains=domains, config=config, specs=specs)
