"""Exact dependency tracing through stacks of (smoothed) dilated layers.

Dependencies are structural: a tap counts whenever its weight slot exists,
regardless of the numeric value, so the analysis characterizes the
architecture itself. Out-of-frame positions are zero padding and carry no
dependencies.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sdconv.conv import ConvSpec, FILTER_KINDS
from sdconv.errors import ParameterError


class ExtentTooSmall(ParameterError):
    """Extent leaves no interior pixel; carries the minimum required extent."""

    def __init__(self, extent: tuple[int, int], minimum: int):
        super().__init__(
            f"extent {extent[0]}x{extent[1]} has no interior pixel; "
            f"need at least {minimum}x{minimum}"
        )
        self.min_extent = (minimum, minimum)


@dataclass(frozen=True)
class LayerEntry:
    """One stack layer: conv geometry plus the structural smoothing window."""

    spec: ConvSpec
    smoothing: str = "none"
    smoothing_size: int = 1

    def __post_init__(self):
        if self.smoothing not in FILTER_KINDS:
            raise ParameterError(f"unknown smoothing kind {self.smoothing!r}")
        if self.smoothing_size < 1:
            raise ParameterError(
                f"smoothing size must be >= 1, got {self.smoothing_size}"
            )
        if self.smoothing == "none" and self.smoothing_size != 1:
            raise ParameterError("unsmoothed layers must use smoothing_size=1")

    @property
    def half_span(self) -> int:
        k, r = self.spec.kernel_size, self.spec.dilation
        return r * (k - 1) // 2 + self.smoothing_size // 2

    def offsets(self) -> list[tuple[int, int]]:
        """All (dy, dx) input offsets one output pixel reads through this layer."""
        k, r = self.spec.kernel_size, self.spec.dilation
        m = (k - 1) // 2
        q = self.smoothing_size // 2
        taps = [r * (i - m) for i in range(k)]
        window = range(-q, q + 1)
        out = set()
        for ty in taps:
            for tx in taps:
                for ny in window:
                    for nx in window:
                        out.add((ty + ny, tx + nx))
        return sorted(out)


@dataclass(frozen=True)
class LayerStack:
    layers: tuple[LayerEntry, ...]

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("layer stack must not be empty")

    @property
    def half_span(self) -> int:
        return sum(e.half_span for e in self.layers)

    @property
    def span(self) -> int:
        return 2 * self.half_span + 1


@dataclass
class DependencyMap:
    """Per output pixel, the set of input pixels it structurally depends on.

    ``deps[oh, ow, ih, iw]`` is True when output (oh, ow) reads input
    (ih, iw) through the stack. Pixels whose full receptive field stays
    inside the frame are "interior".
    """

    extent: tuple[int, int]
    deps: np.ndarray  # bool, (H, W, H, W)
    interior_margin: int

    def depends(self, h: int, w: int) -> set[tuple[int, int]]:
        ih, iw = np.nonzero(self.deps[h, w])
        return set(zip(ih.tolist(), iw.tolist()))

    def is_interior(self, h: int, w: int) -> bool:
        m = self.interior_margin
        return (
            m <= h < self.extent[0] - m and m <= w < self.extent[1] - m
        )

    def interior_pixels(self) -> list[tuple[int, int]]:
        m = self.interior_margin
        return [
            (h, w)
            for h in range(m, self.extent[0] - m)
            for w in range(m, self.extent[1] - m)
        ]


def trace_dependencies(stack: LayerStack, extent: tuple[int, int]) -> DependencyMap:
    """Propagate dependency sets layer by layer across the whole frame.

    A pixel after layer l depends on the union, over that layer's tap
    offsets, of the previous map at the offset position; offsets landing
    outside the frame hit zero padding and contribute nothing.
    """
    h, w = int(extent[0]), int(extent[1])
    margin = stack.half_span
    minimum = 2 * margin + 1
    if h < minimum or w < minimum:
        raise ExtentTooSmall((h, w), minimum)
    # identity map: each position depends on itself
    deps = np.zeros((h, w, h, w), dtype=bool)
    idx = np.arange(h * w)
    deps.reshape(h * w, h * w)[idx, idx] = True
    for entry in stack.layers:
        new = np.zeros_like(deps)
        for dy, dx in entry.offsets():
            oy0, oy1 = max(0, -dy), min(h, h - dy)
            ox0, ox1 = max(0, -dx), min(w, w - dx)
            if oy0 >= oy1 or ox0 >= ox1:
                continue
            new[oy0:oy1, ox0:ox1] |= deps[oy0 + dy : oy1 + dy, ox0 + dx : ox1 + dx]
        deps = new
    return DependencyMap(extent=(h, w), deps=deps, interior_margin=margin)


def gridding_score(dep_map: DependencyMap) -> float:
    """Fraction of adjacent interior output pairs with disjoint dependencies.

    Adjacency is the 4-neighborhood; 1.0 means fully gridded, 0.0 means
    every neighboring pair shares at least one input pixel.
    """
    h, w = dep_map.extent
    m = dep_map.interior_margin
    ih0, ih1 = m, h - m
    iw0, iw1 = m, w - m
    pairs = 0
    disjoint = 0
    for y in range(ih0, ih1):
        for x in range(iw0, iw1):
            a = dep_map.deps[y, x]
            if x + 1 < iw1:
                pairs += 1
                if not np.any(a & dep_map.deps[y, x + 1]):
                    disjoint += 1
            if y + 1 < ih1:
                pairs += 1
                if not np.any(a & dep_map.deps[y + 1, x]):
                    disjoint += 1
    if pairs == 0:
        raise ParameterError(
            "gridding score needs at least two adjacent interior pixels"
        )
    return disjoint / pairs


def export_dependency_art(dep_map: DependencyMap, center: tuple[int, int]) -> str:
    """Text grid marking the input pixels one output pixel depends on."""
    h, w = dep_map.extent
    cy, cx = center
    if not dep_map.is_interior(cy, cx):
        raise ParameterError(
            f"center {center} is not interior (margin {dep_map.interior_margin})"
        )
    mask = dep_map.deps[cy, cx]
    lines = []
    for y in range(h):
        lines.append("".join("#" if mask[y, x] else "." for x in range(w)))
    return "\n".join(lines) + "\n"
