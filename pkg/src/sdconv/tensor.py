"""Dense 4-D tensor type, deterministic RNG, and binary serialization.

Everything downstream carries data as a ``Tensor``: a contiguous float64
array in (batch, channel, height, width) row-major order. No broadcasting,
no views, no mixed precision.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Union

import numpy as np

from sdconv.errors import ParameterError

Shape4 = tuple[int, int, int, int]

BLOB_MAGIC = b"SDTENSR1"


class Tensor:
    """Contiguous float64 array of shape (N, C, H, W)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ParameterError(f"tensor data must be 4-D, got ndim={arr.ndim}")
        self.data = arr

    @property
    def shape(self) -> Shape4:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def get(self, n: int, c: int, h: int, w: int) -> float:
        return float(self.data[n, c, h, w])

    def set(self, n: int, c: int, h: int, w: int, value: float) -> None:
        self.data[n, c, h, w] = value

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return elementwise("scale", self, float(other))

    __rmul__ = __mul__

    def allclose(self, other: "Tensor", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape == other.shape and bool(
            np.allclose(self.data, other.data, atol=atol, rtol=rtol)
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _check_shape(shape: Shape4) -> Shape4:
    shape = tuple(int(s) for s in shape)  # type: ignore[assignment]
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ParameterError(f"shape must be four non-negative extents, got {shape}")
    return shape


def zeros(shape: Shape4) -> Tensor:
    """All-zero tensor of the given (N, C, H, W) shape."""
    return Tensor(np.zeros(_check_shape(shape), dtype=np.float64))


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape)


def from_array(arr: np.ndarray) -> Tensor:
    """Wrap an existing 4-D array (copied to contiguous float64)."""
    return Tensor(np.array(arr, dtype=np.float64))


class Rng:
    """Deterministic counter-based (Philox) random stream.

    Identical seeds produce identical sequences on every platform; child
    streams derived with :meth:`child` are independent and equally
    reproducible, which keeps parallel experiment cells seedable.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._spawn_key = _spawn_key
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, label: Union[int, str]) -> "Rng":
        """Derive an independent stream; same (seed, label) → same stream."""
        if isinstance(label, str):
            digest = hashlib.sha256(label.encode("utf-8")).digest()
            label = int.from_bytes(digest[:8], "little")
        return Rng(self.seed, self._spawn_key + (int(label) & 0xFFFFFFFFFFFFFFFF,))

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n doubles in [lo, hi)."""
        u = self._gen.random(n)
        return lo + u * (hi - lo)

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(n) * std

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self._spawn_key})"


def random_uniform(shape: Shape4, lo: float, hi: float, rng: Rng) -> Tensor:
    """Tensor with independent uniform values in [lo, hi)."""
    shape = _check_shape(shape)
    if not lo < hi:
        raise ParameterError(f"random_uniform requires lo < hi, got lo={lo} hi={hi}")
    n = int(np.prod(shape)) if 0 not in shape else 0
    values = rng.uniform(n, lo, hi)
    return Tensor(values.reshape(shape))


_ELEMENTWISE_OPS = ("add", "sub", "mul", "scale")


def elementwise(op: str, a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Pointwise add/sub/mul of equal-shape tensors, or scale by a scalar."""
    if op not in _ELEMENTWISE_OPS:
        raise ParameterError(f"unknown elementwise op {op!r}")
    if op == "scale":
        if isinstance(b, Tensor):
            raise ParameterError("scale expects a scalar second operand")
        return Tensor(a.data * float(b))
    if not isinstance(b, Tensor):
        raise ParameterError(f"{op} expects a Tensor second operand")
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return Tensor(a.data + b.data)
    if op == "sub":
        return Tensor(a.data - b.data)
    return Tensor(a.data * b.data)


def to_bytes(t: Tensor) -> bytes:
    """Serialize: 8-byte magic, four u64 LE extents, raw LE float64 payload."""
    header = BLOB_MAGIC + struct.pack("<4Q", *t.shape)
    payload = t.data.astype("<f8", copy=False).tobytes()
    return header + payload


def from_bytes(blob: bytes) -> Tensor:
    if blob[:8] != BLOB_MAGIC:
        raise ParameterError("bad tensor blob: magic mismatch")
    shape = struct.unpack("<4Q", blob[8:40])
    n = int(np.prod(shape)) if 0 not in shape else 0
    payload = blob[40:]
    if len(payload) != 8 * n:
        raise ParameterError(
            f"bad tensor blob: expected {8 * n} payload bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(data)


def save_tensor(t: Tensor, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(t))


def load_tensor(path: Union[str, Path]) -> Tensor:
    return from_bytes(Path(path).read_bytes())
