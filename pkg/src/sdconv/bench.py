"""Per-step wall-clock overhead of each smoothing variant.

Every variant runs the same data, shapes, seed, and step count; only the
smoothing differs. Medians (with IQR) are reported because desktop timing
is long-tailed, and overheads are relative to the unsmoothed baseline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from sdconv.autodiff import Tape, backward
from sdconv.errors import ParameterError
from sdconv.segmentation import (
    MODES,
    ToyModel,
    TrainConfig,
    _sample_batch,
    build_model,
    generate_dataset,
)
from sdconv.tensor import Rng

BASELINE_VARIANT = "none"

MIN_MEASURED_STEPS = 30

# Variant names accepted by the harness; "<mode>_2d" forces the 2-D
# smoothing path where the separable fast path is the default.
VARIANT_MODES = {
    "none": ("none", "separable"),
    "average": ("average", "separable"),
    "average_2d": ("average", "2d"),
    "gaussian": ("gaussian", "separable"),
    "gaussian_2d": ("gaussian", "2d"),
    "learned": ("learned", "2d"),
    "aggregated": ("aggregated", "2d"),
}


def parse_variant(name: str) -> tuple[str, str]:
    if name not in VARIANT_MODES:
        raise ParameterError(
            f"unknown bench variant {name!r}; known: {sorted(VARIANT_MODES)}"
        )
    return VARIANT_MODES[name]


@dataclass
class BenchResult:
    variant: str
    median_ms: float
    iqr_ms: float
    steps_measured: int
    warmup_steps: int
    overhead_pct: float
    param_count: int
    flops_per_step: int
    per_rep_medians: list[float] = field(default_factory=list)


def flop_estimate(
    variant: str, model: ToyModel, extent: tuple[int, int]
) -> int:
    """Closed-form multiply-add count for one forward pass of one sample.

    Dense/dilated convs cost K^2*Cin*Cout*H*W; 2-D smoothing adds
    s^2*C*H*W per smoothed layer, the separable path 2s*C*H*W.
    """
    mode, impl = parse_variant(variant)
    h, w = extent
    hw = h * w
    k = model.stem_spec.kernel_size
    total = k * k * model.in_channels * model.hidden_channels * hw
    for b in model.blocks:
        kb = b.spec.kernel_size
        total += kb * kb * model.hidden_channels * model.hidden_channels * hw
        if mode != "none":
            s = b.spec.dilation
            per_pixel = 2 * s if impl == "separable" else s * s
            total += per_pixel * model.hidden_channels * hw
    total += model.hidden_channels * model.classes * hw
    return total


def _time_steps(
    model: ToyModel,
    data,
    cfg: TrainConfig,
    warmup: int,
    measured: int,
) -> list[float]:
    """Per-step wall times (ms) for forward + backward + update."""
    rng = Rng(cfg.seed).child("train")
    params = model.parameters()
    velocity = {name: np.zeros(p.shape) for name, p in params.items()}
    times: list[float] = []
    for step in range(warmup + measured):
        batch, labels = _sample_batch(data, cfg, rng)
        t0 = time.perf_counter()
        tape = Tape()
        xnode = tape.leaf(batch)
        logits = model.forward_tape(tape, xnode)
        loss = tape.cross_entropy(logits, labels)
        grads = backward(tape, loss)
        by_name = {n.name: g for n, g in grads.items() if n.name}
        for name, p in params.items():
            g = by_name[name].data
            velocity[name] = cfg.momentum * velocity[name] + g
            p.data -= cfg.learning_rate * velocity[name]
        elapsed = time.perf_counter() - t0
        if step >= warmup:
            times.append(elapsed * 1e3)
    return times


def bench_variants(
    variants: list[str],
    cfg: TrainConfig,
    reps: int = 3,
    warmup_steps: int = 5,
    measured_steps: int = MIN_MEASURED_STEPS,
    extent: tuple[int, int] = (64, 64),
    classes: int = 4,
    n_train: int = 8,
    model_kwargs: dict | None = None,
) -> list[BenchResult]:
    """Measure every variant sequentially with identical work, sorted by median."""
    if BASELINE_VARIANT not in variants:
        raise ParameterError(
            f"bench variants must include the {BASELINE_VARIANT!r} baseline"
        )
    if reps < 1:
        raise ParameterError(f"reps must be >= 1, got {reps}")
    if measured_steps < MIN_MEASURED_STEPS:
        raise ParameterError(
            f"measured steps must be >= {MIN_MEASURED_STEPS}, got {measured_steps}"
        )
    for name in variants:
        parse_variant(name)
    model_kwargs = dict(model_kwargs or {})
    model_kwargs.setdefault("classes", classes)
    data = generate_dataset(
        n_train, extent, classes, 0.5, Rng(cfg.seed).child("bench-data")
    )
    samples: dict[str, list[float]] = {name: [] for name in variants}
    rep_medians: dict[str, list[float]] = {name: [] for name in variants}
    for _rep in range(reps):
        for name in variants:
            mode, impl = parse_variant(name)
            model = build_model(
                mode,
                rng=Rng(cfg.seed).child("bench-model"),
                smoothing_impl=impl,
                **model_kwargs,
            )
            times = _time_steps(model, data, cfg, warmup_steps, measured_steps)
            samples[name].extend(times)
            rep_medians[name].append(float(np.median(times)))
    base_median = float(np.median(samples[BASELINE_VARIANT]))
    results = []
    for name in variants:
        mode, impl = parse_variant(name)
        model = build_model(
            mode,
            rng=Rng(cfg.seed).child("bench-model"),
            smoothing_impl=impl,
            **model_kwargs,
        )
        med = float(np.median(samples[name]))
        q1, q3 = np.percentile(samples[name], [25, 75])
        overhead = 0.0 if name == BASELINE_VARIANT else (med / base_median - 1.0) * 100.0
        results.append(
            BenchResult(
                variant=name,
                median_ms=med,
                iqr_ms=float(q3 - q1),
                steps_measured=measured_steps * reps,
                warmup_steps=warmup_steps,
                overhead_pct=overhead,
                param_count=model.parameter_count(),
                flops_per_step=flop_estimate(name, model, extent),
                per_rep_medians=rep_medians[name],
            )
        )
    results.sort(key=lambda r: r.median_ms)
    return results


def ordering_stable(results: list[BenchResult]) -> bool:
    """True when every repetition ranks the variants identically."""
    if not results:
        return True
    reps = len(results[0].per_rep_medians)
    orders = []
    for rep in range(reps):
        order = tuple(
            r.variant
            for r in sorted(results, key=lambda r: r.per_rep_medians[rep])
        )
        orders.append(order)
    return len(set(orders)) == 1
