"""Standard, dilated, and smoothed dilated 2-D convolutions.

All convolutions are stride-1 with zero "same" padding, so spatial extents
survive layer stacks unchanged. Smoothing filters are applied depthwise
(each channel independently); the dilated convolution then mixes channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sdconv.errors import ParameterError, UnsupportedKindError
from sdconv.tensor import Rng, Tensor

FILTER_KINDS = ("none", "average", "gaussian", "learned", "aggregated")

SEPARABLE_KINDS = ("none", "average", "gaussian")


@dataclass(frozen=True)
class ConvSpec:
    """Square K x K kernel with dilation rate r under zero-same padding."""

    kernel_size: int
    dilation: int = 1
    padding: str = "zero-same"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(
                f"kernel_size must be odd and >= 1, got {self.kernel_size}"
            )
        if self.dilation < 1:
            raise ParameterError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding != "zero-same":
            raise ParameterError(f"unsupported padding policy {self.padding!r}")

    @property
    def span(self) -> int:
        """Receptive span per axis: (K-1)*r + 1."""
        return (self.kernel_size - 1) * self.dilation + 1


@dataclass
class ConvWeights:
    """Channel-mixing kernel of shape (out_channels, in_channels, K, K)."""

    kernel: Tensor

    def __post_init__(self):
        o, i, kh, kw = self.kernel.shape
        if kh != kw:
            raise ParameterError(f"kernel must be square, got {kh}x{kw}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


@dataclass
class SmoothingFilter:
    """Depthwise interpolation filter with its realized s x s kernel."""

    kind: str
    size: int
    weights: np.ndarray
    sigma: float | None = None
    trainable: bool = False

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ParameterError(f"unknown smoothing kind {self.kind!r}")
        if self.weights.shape != (self.size, self.size):
            raise ParameterError(
                f"weights shape {self.weights.shape} != ({self.size}, {self.size})"
            )


# ---------------------------------------------------------------------------
# Low-level NCHW kernels (shared with autodiff).
# ---------------------------------------------------------------------------


def pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two trailing axes by p on every side."""
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _tap_patches(xp: np.ndarray, k: int, r: int, h: int, w: int) -> np.ndarray:
    """Strided view (N, C, K, K, H, W) of the K*K dilated tap windows."""
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], k, k, h, w),
        strides=(sn, sc, r * sh, r * sw, sh, sw),
        writeable=False,
    )


def conv2d_same_nchw(x: np.ndarray, kern: np.ndarray, r: int) -> np.ndarray:
    """Dilated channel-mixing convolution, zero-same padding, stride 1.

    x: (N, Cin, H, W); kern: (Cout, Cin, K, K); returns (N, Cout, H, W).
    """
    n, cin, h, w = x.shape
    k = kern.shape[2]
    p = r * (k - 1) // 2
    xp = pad_hw(x, p)
    pt = _tap_patches(xp, k, r, h, w)
    out = np.tensordot(kern, pt, axes=([1, 2, 3], [1, 2, 3]))  # (Cout, N, H, W)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_valid_nchw(x: np.ndarray, kern: np.ndarray, r: int) -> np.ndarray:
    """Dilated convolution without padding; output shrinks by (K-1)*r."""
    n, cin, h, w = x.shape
    k = kern.shape[2]
    span = (k - 1) * r
    ho, wo = h - span, w - span
    if ho <= 0 or wo <= 0:
        raise ParameterError(f"input {h}x{w} too small for valid span {span + 1}")
    pt = _tap_patches(x, k, r, ho, wo)
    out = np.tensordot(kern, pt, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def depthwise_same_nchw(x: np.ndarray, v2d: np.ndarray) -> np.ndarray:
    """Per-channel 2-D correlation with a shared s x s kernel, zero-same."""
    s = v2d.shape[0]
    q = s // 2
    n, c, h, w = x.shape
    xp = pad_hw(x, q)
    out = np.zeros_like(x)
    for a in range(s):
        for b in range(s):
            out += v2d[a, b] * xp[:, :, a : a + h, b : b + w]
    return out


def depthwise_sep_same_nchw(x: np.ndarray, v1d: np.ndarray) -> np.ndarray:
    """Two 1-D passes (horizontal then vertical) with a shared profile."""
    s = v1d.shape[0]
    q = s // 2
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h, w + 2 * q), dtype=x.dtype)
    xp[:, :, :, q : q + w] = x
    tmp = np.zeros_like(x)
    for b in range(s):
        tmp += v1d[b] * xp[:, :, :, b : b + w]
    xp2 = np.zeros((n, c, h + 2 * q, w), dtype=x.dtype)
    xp2[:, :, q : q + h, :] = tmp
    out = np.zeros_like(x)
    for a in range(s):
        out += v1d[a] * xp2[:, :, a : a + h, :]
    return out


def box_blur_same_nchw(x: np.ndarray, s: int) -> np.ndarray:
    """Average filter via prefix sums: O(1) per pixel regardless of s.

    Equivalent to the separable average up to prefix-sum rounding
    (~1e-13 at desk scales); its own adjoint, since the kernel is
    symmetric.
    """
    q = s // 2
    n, c, h, w = x.shape
    inv = 1.0 / s
    xp = np.zeros((n, c, h, w + 2 * q), dtype=x.dtype)
    xp[:, :, :, q : q + w] = x
    cs = np.zeros((n, c, h, w + 2 * q + 1), dtype=x.dtype)
    np.cumsum(xp, axis=3, out=cs[:, :, :, 1:])
    tmp = (cs[:, :, :, s:] - cs[:, :, :, :-s]) * inv
    xp2 = np.zeros((n, c, h + 2 * q, w), dtype=x.dtype)
    xp2[:, :, q : q + h, :] = tmp
    cs2 = np.zeros((n, c, h + 2 * q + 1, w), dtype=x.dtype)
    np.cumsum(xp2, axis=2, out=cs2[:, :, 1:, :])
    return (cs2[:, :, s:, :] - cs2[:, :, :-s, :]) * inv


# ---------------------------------------------------------------------------
# Public operations.
# ---------------------------------------------------------------------------


def dilated_conv2d(x: Tensor, w: ConvWeights, spec: ConvSpec) -> Tensor:
    """Dilated 2-D convolution; for dilation 1 this is a standard convolution."""
    if x.shape[1] != w.in_channels:
        raise ParameterError(
            f"input has {x.shape[1]} channels, weights expect {w.in_channels}"
        )
    if w.kernel_size != spec.kernel_size:
        raise ParameterError(
            f"weights kernel size {w.kernel_size} != spec {spec.kernel_size}"
        )
    return Tensor(conv2d_same_nchw(x.data, w.kernel.data, spec.dilation))


def gaussian_profile_1d(s: int, sigma: float) -> np.ndarray:
    """1-D factor of the (unnormalized) Gaussian kernel on [-s//2, s//2]."""
    q = s // 2
    offsets = np.arange(-q, q + 1, dtype=np.float64)
    amp = math.sqrt(1.0 / (2.0 * math.pi * sigma * sigma))
    return amp * np.exp(-(offsets**2) / (2.0 * sigma * sigma))


def build_smoothing_filter(
    kind: str,
    r: int,
    sigma: float | None = None,
    rng: Rng | None = None,
) -> SmoothingFilter:
    """Realize an interpolation filter of size s = r for dilation rate r.

    Average is the constant 1/r^2 kernel (unit mass). Gaussian uses the raw
    density values without discrete renormalization; the mass deficit is
    absorbed by downstream learned conv weights. Learned starts uniform in
    [-1/r, 1/r). ``none`` is the discrete delta.
    """
    if kind not in FILTER_KINDS:
        raise ParameterError(f"unknown smoothing kind {kind!r}")
    if kind == "aggregated":
        raise ParameterError("aggregated filters are built via new_aggregated()")
    if r < 1 or r % 2 == 0:
        raise ParameterError(f"smoothing requires odd dilation rate, got r={r}")
    s = r
    q = s // 2
    if kind == "none":
        weights = np.zeros((s, s), dtype=np.float64)
        weights[q, q] = 1.0
        return SmoothingFilter(kind="none", size=s, weights=weights)
    if kind == "average":
        weights = np.full((s, s), 1.0 / (r * r), dtype=np.float64)
        return SmoothingFilter(kind="average", size=s, weights=weights)
    if kind == "gaussian":
        if sigma is None or sigma <= 0:
            raise ParameterError("gaussian filter requires sigma > 0")
        offsets = np.arange(-q, q + 1, dtype=np.float64)
        yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
        weights = (1.0 / (2.0 * math.pi * sigma * sigma)) * np.exp(
            -(yy**2 + xx**2) / (2.0 * sigma * sigma)
        )
        return SmoothingFilter(kind="gaussian", size=s, weights=weights, sigma=sigma)
    # learned
    if rng is None:
        raise ParameterError("learned filter requires an rng for initialization")
    bound = 1.0 / r
    weights = rng.uniform(s * s, -bound, bound).reshape(s, s)
    return SmoothingFilter(kind="learned", size=s, weights=weights, trainable=True)


def separable_profile(v: SmoothingFilter) -> np.ndarray:
    """1-D profile whose outer product realizes v (fixed kinds only)."""
    if v.kind not in SEPARABLE_KINDS:
        raise UnsupportedKindError(
            f"smoothing kind {v.kind!r} has no guaranteed separable form"
        )
    s = v.size
    q = s // 2
    if v.kind == "none":
        profile = np.zeros(s, dtype=np.float64)
        profile[q] = 1.0
        return profile
    if v.kind == "average":
        return np.full(s, 1.0 / s, dtype=np.float64)
    assert v.sigma is not None
    return gaussian_profile_1d(s, v.sigma)


def smooth_channelwise(x: Tensor, v: SmoothingFilter) -> Tensor:
    """Apply v depthwise under zero-same padding; channels never mix."""
    if v.kind == "none":
        return x.copy()
    return Tensor(depthwise_same_nchw(x.data, v.weights))


def smooth_separable(x: Tensor, v: SmoothingFilter) -> Tensor:
    """Two-pass fast path for outer-product kinds (average, gaussian, none)."""
    profile = separable_profile(v)
    if v.kind == "none":
        return x.copy()
    return Tensor(depthwise_sep_same_nchw(x.data, profile))


def smoothed_dilated_conv2d(
    x: Tensor, v: SmoothingFilter, w: ConvWeights, spec: ConvSpec
) -> Tensor:
    """Smooth each channel with v, then apply the dilated convolution.

    The two-stage composition is the reference semantics.
    """
    if v.size != spec.dilation:
        raise ParameterError(
            f"filter size {v.size} must equal dilation rate {spec.dilation}"
        )
    return dilated_conv2d(smooth_channelwise(x, v), w, spec)


def fuse_effective_kernel(
    v: SmoothingFilter, w: ConvWeights, spec: ConvSpec
) -> ConvWeights:
    """Compose smoothing and dilated kernels into one dense kernel.

    Each composed coefficient is w[k] * v[n] placed at offset r*k + n; the
    extent is (K-1)*r + s per axis. A standard (r=1) convolution with the
    result matches the two-stage path wherever the dilated taps stay inside
    the frame; see smoothed_dilated_conv2d_fused for the boundary-exact
    application.
    """
    if v.size != spec.dilation:
        raise ParameterError(
            f"filter size {v.size} must equal dilation rate {spec.dilation}"
        )
    k, r, s = spec.kernel_size, spec.dilation, v.size
    extent = (k - 1) * r + s
    kern = w.kernel.data
    out_c, in_c = kern.shape[0], kern.shape[1]
    eff = np.zeros((out_c, in_c, extent, extent), dtype=np.float64)
    for k1 in range(k):
        for k2 in range(k):
            block = kern[:, :, k1, k2][:, :, None, None] * v.weights[None, None, :, :]
            eff[:, :, r * k1 : r * k1 + s, r * k2 : r * k2 + s] += block
    return ConvWeights(kernel=Tensor(eff))


def smoothed_dilated_conv2d_fused(
    x: Tensor, v: SmoothingFilter, w: ConvWeights, spec: ConvSpec
) -> Tensor:
    """Single-pass path using the fused kernel, exact on the whole frame.

    The dense convolution with the composed kernel alone over-counts near
    the border: it implicitly smooths at window centers that lie outside
    the frame, whereas the two-stage path zero-pads the smoothed feature
    map. Subtracting that out-of-frame leakage restores exact equality.
    """
    eff = fuse_effective_kernel(v, w, spec)
    n, c, h, wd = x.shape
    dense = conv2d_same_nchw(x.data, eff.kernel.data, 1)
    p = spec.dilation * (spec.kernel_size - 1) // 2
    if p == 0:
        return Tensor(dense)
    xbig = pad_hw(x.data, p)
    sbig = depthwise_same_nchw(xbig, v.weights)
    sbig[:, :, p : p + h, p : p + wd] = 0.0  # keep only out-of-frame centers
    leak = conv2d_valid_nchw(sbig, w.kernel.data, spec.dilation)
    return Tensor(dense - leak)
