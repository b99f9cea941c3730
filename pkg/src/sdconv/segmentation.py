"""Desk-scale segmentation pipeline on synthetic multi-scale shape data.

A small network (dense stem, dilated blocks with pluggable smoothing, 1x1
classifier) is trained with momentum SGD on pixelwise cross-entropy. The
dataset places noisy constant-intensity shapes at three scales so that
denoising the sparse dilated taps actually matters.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdconv.aggregation import (
    AggregatedFilter,
    AlphaTrajectory,
    mean_trajectory,
    new_aggregated,
    record_alphas,
)
from sdconv.autodiff import Node, Tape, backward
from sdconv.conv import (
    ConvSpec,
    SmoothingFilter,
    box_blur_same_nchw,
    build_smoothing_filter,
    conv2d_same_nchw,
    depthwise_same_nchw,
    depthwise_sep_same_nchw,
    separable_profile,
)
from sdconv.errors import GenerationError, ParameterError, TrainingError
from sdconv.tensor import Rng, Tensor, from_bytes, to_bytes

MODES = ("none", "average", "gaussian", "learned", "aggregated")

SHAPE_SCALES = (1, 2, 4)
BASE_HALF_EXTENT = 2
MAX_PLACEMENT_TRIES = 60


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------


@dataclass
class SynthSample:
    image: Tensor  # (1, 1, H, W)
    labels: np.ndarray  # (H, W) int64, class 0 is background
    noise_level: float


def generate_dataset(
    n: int,
    extent: tuple[int, int],
    classes: int,
    noise_level: float,
    rng: Rng,
) -> list[SynthSample]:
    """n samples with 1-4 non-overlapping shapes at scales 1x/2x/4x.

    Each foreground class has a fixed base intensity (its class id); noise
    is additive Gaussian on the image only, labels stay exact.
    """
    h, w = int(extent[0]), int(extent[1])
    if classes < 2:
        raise ParameterError(f"need at least 2 classes, got {classes}")
    if h < 32 or w < 32:
        raise ParameterError(f"extent must be at least 32x32, got {h}x{w}")
    if noise_level < 0:
        raise ParameterError(f"noise level must be >= 0, got {noise_level}")
    samples = []
    for _ in range(n):
        labels = np.zeros((h, w), dtype=np.int64)
        occupied = np.zeros((h, w), dtype=bool)
        count = int(rng.integers(1, 5))
        for _shape in range(count):
            if not _place_shape(labels, occupied, classes, rng):
                raise GenerationError(
                    f"could not place shape after {MAX_PLACEMENT_TRIES} tries "
                    f"on a {h}x{w} canvas"
                )
        image = labels.astype(np.float64)
        if noise_level > 0:
            image = image + rng.normal(h * w, std=noise_level).reshape(h, w)
        samples.append(
            SynthSample(
                image=Tensor(image[None, None]),
                labels=labels,
                noise_level=noise_level,
            )
        )
    return samples


def _place_shape(
    labels: np.ndarray, occupied: np.ndarray, classes: int, rng: Rng
) -> bool:
    h, w = labels.shape
    for _try in range(MAX_PLACEMENT_TRIES):
        cls = int(rng.integers(1, classes))
        is_disc = bool(rng.integers(0, 2))
        scale = SHAPE_SCALES[int(rng.integers(0, len(SHAPE_SCALES)))]
        half = BASE_HALF_EXTENT * scale
        if 2 * half + 1 > min(h, w):
            continue
        cy = int(rng.integers(half, h - half))
        cx = int(rng.integers(half, w - half))
        y0, y1 = cy - half, cy + half + 1
        x0, x1 = cx - half, cx + half + 1
        if is_disc:
            yy, xx = np.ogrid[y0:y1, x0:x1]
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
        else:
            mask = np.ones((y1 - y0, x1 - x0), dtype=bool)
        if np.any(occupied[y0:y1, x0:x1] & mask):
            continue
        occupied[y0:y1, x0:x1] |= mask
        region = labels[y0:y1, x0:x1]
        region[mask] = cls
        return True
    return False


def save_dataset(samples: list[SynthSample], directory: str | Path) -> None:
    """Write images/labels as tensor blobs plus a JSON-lines metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.concatenate([s.image.data for s in samples], axis=0)
    labels = np.stack([s.labels for s in samples])[:, None].astype(np.float64)
    (directory / "images.bin").write_bytes(to_bytes(Tensor(images)))
    (directory / "labels.bin").write_bytes(to_bytes(Tensor(labels)))
    lines = []
    for i, s in enumerate(samples):
        ids, counts = np.unique(s.labels, return_counts=True)
        meta = {
            "index": i,
            "noise_level": s.noise_level,
            "class_pixels": {str(int(c)): int(n) for c, n in zip(ids, counts)},
        }
        lines.append(json.dumps(meta, sort_keys=True, separators=(",", ":")))
    (directory / "meta.jsonl").write_text("\n".join(lines) + "\n")


def load_dataset(directory: str | Path) -> list[SynthSample]:
    directory = Path(directory)
    images = from_bytes((directory / "images.bin").read_bytes())
    labels = from_bytes((directory / "labels.bin").read_bytes())
    metas = [
        json.loads(line)
        for line in (directory / "meta.jsonl").read_text().splitlines()
    ]
    samples = []
    for i, meta in enumerate(metas):
        samples.append(
            SynthSample(
                image=Tensor(images.data[i : i + 1]),
                labels=labels.data[i, 0].astype(np.int64),
                noise_level=float(meta["noise_level"]),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class BlockState:
    """One dilated block: optional smoothing followed by the dilated conv."""

    spec: ConvSpec
    conv_w: Tensor
    conv_b: Tensor
    fixed_filter: SmoothingFilter | None = None
    learned_w: Tensor | None = None
    aggregate: AggregatedFilter | None = None


@dataclass
class ToyModel:
    mode: str
    in_channels: int
    hidden_channels: int
    classes: int
    stem_spec: ConvSpec
    stem_w: Tensor
    stem_b: Tensor
    blocks: list[BlockState]
    cls_w: Tensor
    cls_b: Tensor
    sigma: float
    smoothing_impl: str = "separable"  # fixed-filter execution path

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"stem": self.stem_w, "stem.bias": self.stem_b}
        for i, b in enumerate(self.blocks):
            params[f"block{i}.conv"] = b.conv_w
            params[f"block{i}.bias"] = b.conv_b
            if b.learned_w is not None:
                params[f"block{i}.filter"] = b.learned_w
            if b.aggregate is not None:
                params[f"block{i}.agg.logits"] = b.aggregate.logits
                params[f"block{i}.agg.learned"] = b.aggregate.learned_member_weights
        params["classifier"] = self.cls_w
        params["classifier.bias"] = self.cls_b
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward_tape(self, tape: Tape, x: Node) -> Node:
        stem_node = tape.leaf(self.stem_w, trainable=True, name="stem")
        stem_bias = tape.leaf(self.stem_b, trainable=True, name="stem.bias")
        h = tape.bias_add(tape.conv(x, stem_node, self.stem_spec), stem_bias)
        for i, b in enumerate(self.blocks):
            if self.mode in ("average", "gaussian"):
                h = tape.smooth_fixed(
                    h, b.fixed_filter, separable=self.smoothing_impl == "separable"
                )
            elif self.mode == "learned":
                v = tape.leaf(b.learned_w, trainable=True, name=f"block{i}.filter")
                h = tape.smooth(h, v)
            elif self.mode == "aggregated":
                kernel, _ = b.aggregate.realize_on_tape(tape, f"block{i}.agg")
                h = tape.smooth(h, kernel)
            w = tape.leaf(b.conv_w, trainable=True, name=f"block{i}.conv")
            bias = tape.leaf(b.conv_b, trainable=True, name=f"block{i}.bias")
            h = tape.bias_add(tape.conv(h, w, b.spec), bias)
            h = tape.relu(h)
        cls_node = tape.leaf(self.cls_w, trainable=True, name="classifier")
        cls_bias = tape.leaf(self.cls_b, trainable=True, name="classifier.bias")
        return tape.bias_add(
            tape.conv(h, cls_node, ConvSpec(kernel_size=1)), cls_bias
        )

    def forward(self, batch: Tensor) -> Tensor:
        """Pure forward pass (no tape): per-pixel class scores."""
        if batch.shape[1] != self.in_channels:
            raise ParameterError(
                f"batch has {batch.shape[1]} channels, model expects {self.in_channels}"
            )
        h = conv2d_same_nchw(batch.data, self.stem_w.data, self.stem_spec.dilation)
        h = h + self.stem_b.data
        for b in self.blocks:
            if self.mode in ("average", "gaussian"):
                if self.smoothing_impl != "separable":
                    h = depthwise_same_nchw(h, b.fixed_filter.weights)
                elif self.mode == "average":
                    h = box_blur_same_nchw(h, b.fixed_filter.size)
                else:
                    h = depthwise_sep_same_nchw(h, separable_profile(b.fixed_filter))
            elif self.mode == "learned":
                h = depthwise_same_nchw(h, b.learned_w.data[0, 0])
            elif self.mode == "aggregated":
                h = depthwise_same_nchw(h, b.aggregate.realize().weights)
            h = conv2d_same_nchw(h, b.conv_w.data, b.spec.dilation) + b.conv_b.data
            h = h * (h > 0)
        return Tensor(conv2d_same_nchw(h, self.cls_w.data, 1) + self.cls_b.data)


def _init_weights(shape: tuple[int, int, int, int], rng: Rng) -> Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(int(np.prod(shape)), -bound, bound).reshape(shape))


def build_model(
    mode: str,
    rng: Rng,
    in_channels: int = 1,
    hidden_channels: int = 8,
    classes: int = 4,
    dilations: tuple[int, ...] = (3, 3, 5),
    kernel_size: int = 3,
    sigma: float = 1.0,
    smoothing_impl: str = "separable",
) -> ToyModel:
    """Stem conv, one dilated block per rate, and a 1x1 classifier."""
    if mode not in MODES:
        raise ParameterError(f"unknown smoothing mode {mode!r}")
    if smoothing_impl not in ("separable", "2d"):
        raise ParameterError(f"unknown smoothing implementation {smoothing_impl!r}")
    wrng = rng.child("weights")
    stem_spec = ConvSpec(kernel_size=kernel_size, dilation=1)
    stem_w = _init_weights((hidden_channels, in_channels, kernel_size, kernel_size), wrng)
    blocks = []
    for i, r in enumerate(dilations):
        spec = ConvSpec(kernel_size=kernel_size, dilation=r)
        conv_w = _init_weights(
            (hidden_channels, hidden_channels, kernel_size, kernel_size), wrng
        )
        block = BlockState(
            spec=spec,
            conv_w=conv_w,
            conv_b=Tensor(np.zeros((1, hidden_channels, 1, 1))),
        )
        if mode in ("average", "gaussian"):
            block.fixed_filter = build_smoothing_filter(mode, r, sigma=sigma)
        elif mode == "learned":
            lf = build_smoothing_filter("learned", r, rng=wrng.child(f"filter{i}"))
            block.learned_w = Tensor(lf.weights[None, None].copy())
        elif mode == "aggregated":
            block.aggregate = new_aggregated(r, sigma, wrng.child(f"agg{i}"))
        blocks.append(block)
    cls_w = _init_weights((classes, hidden_channels, 1, 1), wrng)
    return ToyModel(
        mode=mode,
        in_channels=in_channels,
        hidden_channels=hidden_channels,
        classes=classes,
        stem_spec=stem_spec,
        stem_w=stem_w,
        stem_b=Tensor(np.zeros((1, hidden_channels, 1, 1))),
        blocks=blocks,
        cls_w=cls_w,
        cls_b=Tensor(np.zeros((1, classes, 1, 1))),
        sigma=sigma,
        smoothing_impl=smoothing_impl,
    )


class SupervisedLoss:
    """Adapts (model, fixed labels) to the gradient-checking protocol."""

    def __init__(self, model: ToyModel, labels: np.ndarray):
        self.model = model
        self.labels = labels

    def parameters(self) -> dict[str, Tensor]:
        return self.model.parameters()

    def loss(self, tape: Tape, x: Tensor) -> Node:
        logits = self.model.forward_tape(tape, tape.leaf(x))
        return tape.cross_entropy(logits, self.labels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    crop_size: int = 64
    log_interval: int = 50

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.steps < 1 or self.batch_size < 1 or self.crop_size < 1:
            raise ParameterError("steps, batch_size, and crop_size must be >= 1")
        if self.log_interval < 1:
            raise ParameterError(f"log_interval must be >= 1, got {self.log_interval}")


@dataclass
class TrainResult:
    model: ToyModel
    losses: list[float]
    trajectories: list[AlphaTrajectory] = field(default_factory=list)
    sec_per_step: float = 0.0

    @property
    def trajectory(self) -> AlphaTrajectory | None:
        """Across-layer mean trajectory (aggregated mode only)."""
        if not self.trajectories:
            return None
        return mean_trajectory(self.trajectories)


def _sample_batch(
    data: list[SynthSample], cfg: TrainConfig, rng: Rng
) -> tuple[Tensor, np.ndarray]:
    n = len(data)
    h, w = data[0].image.shape[2], data[0].image.shape[3]
    crop = min(cfg.crop_size, h, w)
    idx = rng.integers(0, n, cfg.batch_size)
    images = np.empty((cfg.batch_size, data[0].image.shape[1], crop, crop))
    labels = np.empty((cfg.batch_size, crop, crop), dtype=np.int64)
    for row, i in enumerate(idx):
        s = data[int(i)]
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
        images[row] = s.image.data[0, :, y0 : y0 + crop, x0 : x0 + crop]
        labels[row] = s.labels[y0 : y0 + crop, x0 : x0 + crop]
    return Tensor(images), labels


def train(
    model: ToyModel, data: list[SynthSample], cfg: TrainConfig
) -> TrainResult:
    """Momentum SGD on pixelwise softmax cross-entropy; deterministic per seed."""
    if not data:
        raise ParameterError("training dataset is empty")
    rng = Rng(cfg.seed).child("train")
    params = model.parameters()
    velocity = {name: np.zeros(p.shape) for name, p in params.items()}
    trajectories: list[AlphaTrajectory] = []
    if model.mode == "aggregated":
        trajectories = [AlphaTrajectory() for _ in model.blocks]
        for traj, b in zip(trajectories, model.blocks):
            record_alphas(b.aggregate, 0, traj)
    losses: list[float] = []
    t_start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch, labels = _sample_batch(data, cfg, rng)
        tape = Tape()
        xnode = tape.leaf(batch)
        logits = model.forward_tape(tape, xnode)
        loss = tape.cross_entropy(logits, labels)
        loss_val = float(loss.value.data.reshape(()))
        if not math.isfinite(loss_val):
            raise TrainingError(f"loss became non-finite at step {step}", step=step)
        losses.append(loss_val)
        grads = backward(tape, loss)
        by_name = {n.name: g for n, g in grads.items() if n.name}
        for name, p in params.items():
            g = by_name[name].data
            velocity[name] = cfg.momentum * velocity[name] + g
            p.data -= cfg.learning_rate * velocity[name]
        if model.mode == "aggregated" and step % cfg.log_interval == 0:
            for traj, b in zip(trajectories, model.blocks):
                record_alphas(b.aggregate, step, traj)
    elapsed = time.perf_counter() - t_start
    return TrainResult(
        model=model,
        losses=losses,
        trajectories=trajectories,
        sec_per_step=elapsed / cfg.steps,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    per_class_iou: np.ndarray  # NaN where a class has an empty union
    miou: float


def evaluate(model: ToyModel, data: list[SynthSample]) -> Metrics:
    """Global-accumulation IoU: intersections/unions summed over the dataset."""
    if not data:
        raise ParameterError("evaluation dataset is empty")
    c = model.classes
    inter = np.zeros(c, dtype=np.int64)
    union = np.zeros(c, dtype=np.int64)
    for s in data:
        scores = model.forward(s.image)
        pred = scores.data[0].argmax(axis=0)
        _accumulate_iou(pred, s.labels, c, inter, union)
    return _metrics_from_counts(inter, union)


def _accumulate_iou(
    pred: np.ndarray, truth: np.ndarray, classes: int,
    inter: np.ndarray, union: np.ndarray,
) -> None:
    for cls in range(classes):
        p = pred == cls
        t = truth == cls
        inter[cls] += int(np.sum(p & t))
        union[cls] += int(np.sum(p | t))


def _metrics_from_counts(inter: np.ndarray, union: np.ndarray) -> Metrics:
    iou = np.full(len(inter), np.nan)
    defined = union > 0
    iou[defined] = inter[defined] / union[defined]
    return Metrics(per_class_iou=iou, miou=float(np.nanmean(iou)))


def iou_between(pred: np.ndarray, truth: np.ndarray, classes: int) -> Metrics:
    """IoU of two label grids (no model involved)."""
    inter = np.zeros(classes, dtype=np.int64)
    union = np.zeros(classes, dtype=np.int64)
    _accumulate_iou(pred, truth, classes, inter, union)
    return _metrics_from_counts(inter, union)


# ---------------------------------------------------------------------------
# Mode comparison
# ---------------------------------------------------------------------------


@dataclass
class CompareRow:
    mode: str
    seed: int
    miou: float
    per_class_iou: np.ndarray
    sec_per_step: float
    failed: bool = False
    error: str = ""


@dataclass
class ModeSummary:
    mode: str
    mean_miou: float
    std_miou: float
    mean_sec_per_step: float
    runs: int


@dataclass
class ComparisonTable:
    rows: list[CompareRow]
    classes: int
    trajectories: dict[tuple[str, int], list[AlphaTrajectory]]

    def summaries(self) -> list[ModeSummary]:
        out = []
        seen: list[str] = []
        for row in self.rows:
            if row.mode not in seen:
                seen.append(row.mode)
        for mode in seen:
            vals = [r.miou for r in self.rows if r.mode == mode and not r.failed]
            times = [
                r.sec_per_step for r in self.rows if r.mode == mode and not r.failed
            ]
            out.append(
                ModeSummary(
                    mode=mode,
                    mean_miou=float(np.mean(vals)) if vals else float("nan"),
                    std_miou=float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                    mean_sec_per_step=float(np.mean(times)) if times else float("nan"),
                    runs=len(vals),
                )
            )
        return out

    def any_failed(self) -> bool:
        return any(r.failed for r in self.rows)


def comparison_header(classes: int) -> str:
    cols = ["mode", "seed", "miou"]
    cols += [f"iou_class_{c}" for c in range(classes)]
    cols.append("sec_per_step")
    return ",".join(cols)


def compare_modes(
    modes: list[str],
    cfg: TrainConfig,
    seeds: list[int],
    noise_level: float,
    n_train: int = 24,
    n_val: int = 12,
    extent: tuple[int, int] = (64, 64),
    classes: int = 4,
    model_kwargs: dict | None = None,
) -> ComparisonTable:
    """Train every (mode, seed) cell on shared per-seed data; never stops early.

    Cells that raise a training error are marked failed and carried through
    so the rest of the table still fills in.
    """
    if not modes:
        raise ParameterError("compare_modes needs at least one mode")
    if not seeds:
        raise ParameterError("compare_modes needs at least one seed")
    model_kwargs = dict(model_kwargs or {})
    model_kwargs.setdefault("classes", classes)
    rows: list[CompareRow] = []
    trajectories: dict[tuple[str, int], list[AlphaTrajectory]] = {}
    for seed in seeds:
        data_rng = Rng(seed).child("data")
        train_ds = generate_dataset(
            n_train, extent, classes, noise_level, data_rng.child("train")
        )
        val_ds = generate_dataset(
            n_val, extent, classes, noise_level, data_rng.child("val")
        )
        for mode in modes:
            model = build_model(mode, rng=Rng(seed).child("model"), **model_kwargs)
            run_cfg = TrainConfig(
                learning_rate=cfg.learning_rate,
                momentum=cfg.momentum,
                steps=cfg.steps,
                batch_size=cfg.batch_size,
                seed=seed,
                crop_size=cfg.crop_size,
                log_interval=cfg.log_interval,
            )
            try:
                result = train(model, train_ds, run_cfg)
                metrics = evaluate(model, val_ds)
            except TrainingError as exc:
                rows.append(
                    CompareRow(
                        mode=mode,
                        seed=seed,
                        miou=float("nan"),
                        per_class_iou=np.full(classes, np.nan),
                        sec_per_step=float("nan"),
                        failed=True,
                        error=str(exc),
                    )
                )
                continue
            rows.append(
                CompareRow(
                    mode=mode,
                    seed=seed,
                    miou=metrics.miou,
                    per_class_iou=metrics.per_class_iou,
                    sec_per_step=result.sec_per_step,
                )
            )
            if result.trajectories:
                trajectories[(mode, seed)] = result.trajectories
    return ComparisonTable(rows=rows, classes=classes, trajectories=trajectories)
