"""Reverse-mode gradients on a recording tape, plus a finite-difference oracle.

Every forward primitive used by the convolution stack has a backward rule
here. A tape is single-owner mutable state: record forward ops in order,
then replay the rules in reverse from a scalar loss. Gradients accumulate
(sum) when a node feeds multiple consumers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

import numpy as np

from sdconv.conv import (
    ConvSpec,
    SmoothingFilter,
    box_blur_same_nchw,
    conv2d_same_nchw,
    depthwise_same_nchw,
    depthwise_sep_same_nchw,
    pad_hw,
    separable_profile,
    _tap_patches,
)
from sdconv.errors import ParameterError
from sdconv.tensor import Tensor


class Node:
    """A tensor value tracked on a tape; trainable nodes receive gradients."""

    __slots__ = ("value", "trainable", "name", "requires_grad")

    def __init__(self, value: Tensor, trainable: bool = False, name: str | None = None):
        self.value = value
        self.trainable = trainable
        self.name = name
        self.requires_grad = trainable

    def __repr__(self) -> str:
        tag = self.name or "node"
        return f"Node({tag}, shape={self.value.shape}, trainable={self.trainable})"


@dataclass
class _Entry:
    output: Node
    inputs: tuple[Node, ...]
    rule: Callable[[np.ndarray], list[tuple[Node, np.ndarray]]]


# Module-level backward kernels; tests patch these to corrupt a rule.


def _conv_grad_x(g: np.ndarray, kern: np.ndarray, r: int) -> np.ndarray:
    flipped = np.ascontiguousarray(kern[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_same_nchw(g, flipped, r)


def _conv_grad_w(g: np.ndarray, xp: np.ndarray, k: int, r: int) -> np.ndarray:
    h, w = g.shape[2], g.shape[3]
    pt = _tap_patches(xp, k, r, h, w)
    return np.tensordot(g, pt, axes=([0, 2, 3], [0, 4, 5]))


def _smooth_grad_x(g: np.ndarray, v2d: np.ndarray) -> np.ndarray:
    return depthwise_same_nchw(g, v2d[::-1, ::-1])


def _smooth_grad_v(g: np.ndarray, xp: np.ndarray, s: int) -> np.ndarray:
    h, w = g.shape[2], g.shape[3]
    gflat = np.ascontiguousarray(g).ravel()
    dv = np.empty((s, s))
    for a in range(s):
        for b in range(s):
            window = np.ascontiguousarray(xp[:, :, a : a + h, b : b + w])
            dv[a, b] = np.dot(gflat, window.ravel())
    return dv


class Tape:
    """Ordered record of primitive applications with their backward rules."""

    def __init__(self):
        self._entries: list[_Entry] = []
        self._trainables: list[Node] = []

    def leaf(self, value: Tensor, trainable: bool = False, name: str | None = None) -> Node:
        node = Node(value, trainable=trainable, name=name)
        if trainable:
            self._trainables.append(node)
        return node

    def _record(self, out: Node, inputs: tuple[Node, ...], rule) -> Node:
        out.requires_grad = any(n.requires_grad for n in inputs)
        self._entries.append(_Entry(out, inputs, rule))
        return out

    @property
    def trainables(self) -> list[Node]:
        return list(self._trainables)

    # -- elementwise ------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        out = Node(Tensor(a.value.data + b.value.data))

        def rule(g):
            return [(a, g), (b, g)]

        return self._record(out, (a, b), rule)

    def sub(self, a: Node, b: Node) -> Node:
        out = Node(Tensor(a.value.data - b.value.data))

        def rule(g):
            return [(a, g), (b, -g)]

        return self._record(out, (a, b), rule)

    def mul(self, a: Node, b: Node) -> Node:
        out = Node(Tensor(a.value.data * b.value.data))
        av, bv = a.value.data, b.value.data

        def rule(g):
            return [(a, g * bv), (b, g * av)]

        return self._record(out, (a, b), rule)

    def scale(self, a: Node, c: float) -> Node:
        out = Node(Tensor(a.value.data * float(c)))

        def rule(g):
            return [(a, g * float(c))]

        return self._record(out, (a,), rule)

    def sum(self, a: Node) -> Node:
        """Reduce to a (1,1,1,1) scalar tensor."""
        out = Node(Tensor(np.full((1, 1, 1, 1), a.value.data.sum())))
        shape = a.value.shape

        def rule(g):
            return [(a, np.full(shape, float(g.reshape(()))))]

        return self._record(out, (a,), rule)

    def relu(self, a: Node) -> Node:
        mask = a.value.data > 0
        out = Node(Tensor(a.value.data * mask))

        def rule(g):
            return [(a, g * mask)]

        return self._record(out, (a,), rule)

    def bias_add(self, x: Node, b: Node) -> Node:
        """Add a per-channel (1, C, 1, 1) bias across the batch and pixels."""
        if b.value.shape[0] != 1 or b.value.shape[2:] != (1, 1):
            raise ParameterError(f"bias must be (1, C, 1, 1), got {b.value.shape}")
        out = Node(Tensor(x.value.data + b.value.data))
        need_x, need_b = x.requires_grad, b.requires_grad

        def rule(g):
            contribs = []
            if need_x:
                contribs.append((x, g))
            if need_b:
                contribs.append((b, g.sum(axis=(0, 2, 3), keepdims=True)))
            return contribs

        return self._record(out, (x, b), rule)

    # -- convolution stack -------------------------------------------------

    def conv(self, x: Node, w: Node, spec: ConvSpec) -> Node:
        """Dilated channel-mixing convolution; w holds (out, in, K, K).

        The im2col matrix built for the forward GEMM is kept and reused by
        the weight-gradient GEMM.
        """
        k, r = spec.kernel_size, spec.dilation
        if w.value.shape[2] != k:
            raise ParameterError(
                f"weights kernel size {w.value.shape[2]} != spec {k}"
            )
        p = r * (k - 1) // 2
        kern = w.value.data
        xd = x.value.data
        n, cin, h, wd = xd.shape
        cout = kern.shape[0]
        xp = pad_hw(xd, p)
        pt = _tap_patches(xp, k, r, h, wd)
        cols = np.ascontiguousarray(pt.transpose(1, 2, 3, 0, 4, 5)).reshape(
            cin * k * k, n * h * wd
        )
        out_flat = kern.reshape(cout, -1) @ cols
        out = Node(
            Tensor(
                np.ascontiguousarray(
                    out_flat.reshape(cout, n, h, wd).transpose(1, 0, 2, 3)
                )
            )
        )
        need_x, need_w = x.requires_grad, w.requires_grad

        def rule(g):
            contribs = []
            if need_w:
                g_flat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(
                    cout, n * h * wd
                )
                contribs.append((w, (g_flat @ cols.T).reshape(kern.shape)))
            if need_x:
                contribs.append((x, _conv_grad_x(g, kern, r)))
            return contribs

        return self._record(out, (x, w), rule)

    def smooth(self, x: Node, v: Node) -> Node:
        """Depthwise smoothing with a (1, 1, s, s) kernel node."""
        v2d = v.value.data[0, 0]
        s = v2d.shape[0]
        xp = pad_hw(x.value.data, s // 2)
        out = Node(Tensor(depthwise_same_nchw(x.value.data, v2d)))
        need_x, need_v = x.requires_grad, v.requires_grad

        def rule(g):
            contribs = []
            if need_x:
                contribs.append((x, _smooth_grad_x(g, v2d)))
            if need_v:
                contribs.append((v, _smooth_grad_v(g, xp, s)[None, None]))
            return contribs

        return self._record(out, (x, v), rule)

    def smooth_fixed(self, x: Node, v: SmoothingFilter, separable: bool = True) -> Node:
        """Smoothing with a constant (untrained) filter; gradient flows to x only.

        Fixed kinds default to the separable two-pass path; set
        ``separable=False`` to force the 2-D path (benchmark comparisons).
        """
        if v.kind == "none":
            return x
        need_x = x.requires_grad
        if separable and v.kind == "average":
            s = v.size
            out = Node(Tensor(box_blur_same_nchw(x.value.data, s)))

            def rule(g):
                if not need_x:
                    return []
                return [(x, box_blur_same_nchw(g, s))]

        elif separable:
            prof = separable_profile(v)
            out = Node(Tensor(depthwise_sep_same_nchw(x.value.data, prof)))

            def rule(g):
                if not need_x:
                    return []
                return [(x, depthwise_sep_same_nchw(g, prof[::-1]))]

        else:
            v2d = v.weights
            out = Node(Tensor(depthwise_same_nchw(x.value.data, v2d)))

            def rule(g):
                if not need_x:
                    return []
                return [(x, _smooth_grad_x(g, v2d))]

        return self._record(out, (x,), rule)

    # -- aggregation / loss -------------------------------------------------

    def softmax(self, a: Node) -> Node:
        """Softmax over all elements of the tensor (used on (1,1,1,m) logits)."""
        flat = a.value.data.ravel()
        z = flat - flat.max()
        e = np.exp(z)
        probs = (e / e.sum()).reshape(a.value.shape)
        out = Node(Tensor(probs))

        def rule(g):
            dot = float((probs * g).sum())
            return [(a, probs * (g - dot))]

        return self._record(out, (a,), rule)

    def combine(self, coeffs: Node, members: list[Node]) -> Node:
        """Weighted sum of equal-shape members by the flat coefficient vector."""
        cvec = coeffs.value.data.ravel()
        if len(members) != cvec.size:
            raise ParameterError(
                f"{cvec.size} coefficients for {len(members)} members"
            )
        mvals = [m.value.data for m in members]
        acc = np.zeros_like(mvals[0])
        for ci, mv in zip(cvec, mvals):
            acc = acc + ci * mv
        out = Node(Tensor(acc))
        cshape = coeffs.value.shape
        need_c = coeffs.requires_grad
        need_m = [m.requires_grad for m in members]

        def rule(g):
            contribs: list[tuple[Node, np.ndarray]] = []
            if need_c:
                dc = np.array([float((mv * g).sum()) for mv in mvals]).reshape(cshape)
                contribs.append((coeffs, dc))
            for needed, ci, m in zip(need_m, cvec, members):
                if needed:
                    contribs.append((m, ci * g))
            return contribs

        return self._record(out, (coeffs, *members), rule)

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean softmax cross-entropy over all pixels; labels are (N, H, W) ints."""
        z = logits.value.data
        m = z.max(axis=1, keepdims=True)
        zs = z - m
        lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
        logp = zs - lse
        n, c, h, w = z.shape
        ni, hi, wi = np.ogrid[:n, :h, :w]
        picked = logp[ni, labels, hi, wi]
        loss = -picked.mean()
        out = Node(Tensor(np.full((1, 1, 1, 1), loss)))
        probs = np.exp(logp)

        def rule(g):
            scale = float(np.asarray(g).reshape(()).item()) / (n * h * w)
            grad = probs.copy()
            grad[ni, labels, hi, wi] -= 1.0
            return [(logits, grad * scale)]

        return self._record(out, (logits,), rule)


def backward(
    tape: Tape, loss: Node, params: Iterable[Node] | None = None
) -> dict[Node, Tensor]:
    """Gradients of a scalar loss for every trainable node on the tape.

    Trainable nodes with no path to the loss get zero gradients.
    """
    if loss.value.shape != (1, 1, 1, 1):
        raise ParameterError(f"loss must be scalar (1,1,1,1), got {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    nodes: dict[int, Node] = {id(loss): loss}
    for entry in reversed(tape._entries):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        for node, contrib in entry.rule(g):
            key = id(node)
            nodes[key] = node
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib.copy() if contrib is g else contrib
    targets = list(tape.trainables)
    if params is not None:
        seen = {id(t) for t in targets}
        targets.extend(p for p in params if id(p) not in seen)
    out: dict[Node, Tensor] = {}
    for node in targets:
        g = grads.get(id(node))
        if g is None:
            g = np.zeros(node.value.shape)
        out[node] = Tensor(np.asarray(g).reshape(node.value.shape))
    return out


def finite_difference_gradient(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5
) -> Tensor:
    """Central differences (f(x+h e) - f(x-h e)) / (2h) per element."""
    if h <= 0:
        raise ParameterError(f"finite-difference step must be > 0, got {h}")
    flat = x.data.ravel()
    grad = np.zeros_like(flat)
    work = Tensor(x.data.copy())
    wflat = work.data.ravel()
    for i in range(flat.size):
        orig = wflat[i]
        wflat[i] = orig + h
        fp = float(f(work))
        wflat[i] = orig - h
        fm = float(f(work))
        wflat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - f| / max(|a|, |f|, 1e-8)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


class DifferentiableModel(Protocol):
    def parameters(self) -> dict[str, Tensor]: ...

    def loss(self, tape: Tape, x: Tensor) -> Node: ...


@dataclass
class GradReport:
    """Per-parameter max relative error of analytic vs finite differences."""

    per_parameter: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.per_parameter.values())

    def failing(self) -> list[str]:
        return [k for k, e in self.per_parameter.items() if e > self.tolerance]


def check_gradients(
    model: DifferentiableModel,
    x: Tensor,
    tolerance: float,
    h: float = 1e-5,
) -> GradReport:
    """Compare tape gradients of every parameter against central differences."""
    if tolerance <= 0:
        raise ParameterError(f"tolerance must be > 0, got {tolerance}")
    params = model.parameters()
    tape = Tape()
    loss = model.loss(tape, x)
    grads = backward(tape, loss)
    by_name = {
        node.name: g for node, g in grads.items() if node.name is not None
    }
    errors: dict[str, float] = {}
    for name, tensor in params.items():
        analytic = by_name[name].data

        def loss_with(probe: Tensor, _t: Tensor = tensor) -> float:
            saved = _t.data.copy()
            _t.data[...] = probe.data
            try:
                return float(model.loss(Tape(), x).value.data.reshape(()))
            finally:
                _t.data[...] = saved

        numeric = finite_difference_gradient(loss_with, tensor, h=h).data
        errors[name] = relative_error(analytic, numeric)
    return GradReport(per_parameter=errors, tolerance=tolerance)
