"""Tape gradients against the central finite-difference oracle."""
import numpy as np
import pytest

from sdconv.autodiff import (
    GradReport,
    Tape,
    backward,
    check_gradients,
    finite_difference_gradient,
    relative_error,
)
from sdconv.conv import ConvSpec, build_smoothing_filter
from sdconv.errors import ParameterError
from sdconv.tensor import Rng, Tensor


def scalar(node):
    return float(node.value.data.reshape(()))


def rand_tensor(shape, seed, lo=-1.0, hi=1.0):
    n = int(np.prod(shape))
    return Tensor(Rng(seed).uniform(n, lo, hi).reshape(shape))


def grad_of(grads, name):
    return next(g for n, g in grads.items() if n.name == name)


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = rand_tensor((1, 2, 3, 3), 1)
        tape = Tape()
        xn = tape.leaf(x, trainable=True, name="x")
        loss = tape.sum(xn)
        g = grad_of(backward(tape, loss), "x")
        assert np.array_equal(g.data, np.ones(x.shape))

    def test_linear_chain_scale(self):
        x = rand_tensor((1, 1, 2, 2), 2)
        tape = Tape()
        xn = tape.leaf(x, trainable=True, name="x")
        loss = tape.sum(tape.scale(xn, 3.0))
        g = grad_of(backward(tape, loss), "x")
        assert np.array_equal(g.data, np.full(x.shape, 3.0))

    def test_non_scalar_loss_rejected(self):
        x = rand_tensor((1, 1, 2, 2), 3)
        tape = Tape()
        xn = tape.leaf(x, trainable=True)
        with pytest.raises(ParameterError):
            backward(tape, xn)

    def test_unreached_parameter_gets_zero_gradient(self):
        x = rand_tensor((1, 1, 2, 2), 4)
        unused = rand_tensor((1, 1, 3, 3), 5)
        tape = Tape()
        xn = tape.leaf(x, trainable=True, name="x")
        un = tape.leaf(unused, trainable=True, name="unused")
        loss = tape.sum(xn)
        grads = backward(tape, loss)
        assert np.array_equal(grad_of(grads, "unused").data, np.zeros(unused.shape))

    def test_gradients_accumulate_over_consumers(self):
        x = rand_tensor((1, 1, 2, 2), 6)
        tape = Tape()
        xn = tape.leaf(x, trainable=True, name="x")
        loss = tape.sum(tape.add(xn, xn))
        g = grad_of(backward(tape, loss), "x")
        assert np.array_equal(g.data, np.full(x.shape, 2.0))

    def test_mul_rule(self):
        a = rand_tensor((1, 1, 2, 2), 7)
        b = rand_tensor((1, 1, 2, 2), 8)
        tape = Tape()
        an = tape.leaf(a, trainable=True, name="a")
        bn = tape.leaf(b, trainable=True, name="b")
        loss = tape.sum(tape.mul(an, bn))
        grads = backward(tape, loss)
        assert np.allclose(grad_of(grads, "a").data, b.data)
        assert np.allclose(grad_of(grads, "b").data, a.data)


class TestFiniteDifference:
    def test_sum_of_squares(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        g = finite_difference_gradient(lambda t: float((t.data**2).sum()), x)
        assert abs(g.data.reshape(()) - 4.0) < 1e-8

    def test_linear(self):
        x = rand_tensor((1, 1, 3, 3), 9)
        g = finite_difference_gradient(lambda t: float(t.data.sum()), x)
        assert np.allclose(g.data, 1.0, atol=1e-10)

    def test_bad_step_rejected(self):
        with pytest.raises(ParameterError):
            finite_difference_gradient(lambda t: 0.0, rand_tensor((1, 1, 1, 1), 1), h=0)


def fd_versus_tape(build, x, w_tensors, h=1e-5):
    """Max relative error of tape gradients vs central differences.

    build(tape, x_node, param_nodes) -> scalar node. w_tensors maps
    name -> Tensor for every trainable quantity including "x".
    """
    tape = Tape()
    nodes = {"x": tape.leaf(x, trainable=True, name="x")}
    for name, t in w_tensors.items():
        nodes[name] = tape.leaf(t, trainable=True, name=name)
    loss = build(tape, nodes)
    grads = backward(tape, loss)
    worst = {}
    all_tensors = {"x": x, **w_tensors}
    for name, tensor in all_tensors.items():
        analytic = grad_of(grads, name).data

        def f(probe, _name=name):
            saved = all_tensors[_name].data.copy()
            all_tensors[_name].data[...] = probe.data
            tape2 = Tape()
            nodes2 = {"x": tape2.leaf(x)}
            for nm, t in w_tensors.items():
                nodes2[nm] = tape2.leaf(t)
            val = scalar(build(tape2, nodes2))
            all_tensors[_name].data[...] = saved
            return val

        numeric = finite_difference_gradient(f, tensor, h=h).data
        worst[name] = relative_error(analytic, numeric)
    return worst


class TestConvGradients:
    def test_dilated_conv_matches_fd(self):
        spec = ConvSpec(3, 2)
        x = rand_tensor((1, 1, 7, 7), 10)
        w = rand_tensor((2, 1, 3, 3), 11)

        def build(tape, nodes):
            return tape.sum(tape.conv(nodes["x"], nodes["w"], spec))

        worst = fd_versus_tape(build, x, {"w": w})
        assert worst["x"] < 1e-6
        assert worst["w"] < 1e-6

    def test_conv_gradients_20_random_instances(self):
        rng = Rng(500)
        for i in range(20):
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 3))
            h = int(rng.integers(5, 10))
            r = int(rng.integers(1, 4))
            x = Tensor(rng.uniform(n * cin * h * h, -1, 1).reshape(n, cin, h, h))
            w = Tensor(rng.uniform(cout * cin * 9, -1, 1).reshape(cout, cin, 3, 3))
            spec = ConvSpec(3, r)

            def build(tape, nodes):
                return tape.sum(tape.conv(nodes["x"], nodes["w"], spec))

            worst = fd_versus_tape(build, x, {"w": w})
            assert max(worst.values()) < 1e-4, f"instance {i}: {worst}"

    def test_weighted_loss_through_relu(self):
        spec = ConvSpec(3, 2)
        x = rand_tensor((1, 2, 6, 6), 12)
        w = rand_tensor((2, 2, 3, 3), 13)
        mask = rand_tensor((1, 2, 6, 6), 14)

        def build(tape, nodes):
            y = tape.relu(tape.conv(nodes["x"], nodes["w"], spec))
            return tape.sum(tape.mul(y, tape.leaf(mask)))

        worst = fd_versus_tape(build, x, {"w": w})
        assert max(worst.values()) < 1e-4

    def test_adjoint_property(self):
        # <conv(x), u> == <x, conv_adjoint(u)> where the adjoint is what
        # backward applies to u
        rng = Rng(15)
        spec = ConvSpec(3, 2)
        x = Tensor(rng.uniform(1 * 2 * 8 * 8, -1, 1).reshape(1, 2, 8, 8))
        w = Tensor(rng.uniform(2 * 2 * 9, -1, 1).reshape(2, 2, 3, 3))
        u = Tensor(rng.uniform(1 * 2 * 8 * 8, -1, 1).reshape(1, 2, 8, 8))
        tape = Tape()
        xn = tape.leaf(x, trainable=True, name="x")
        y = tape.conv(xn, tape.leaf(w), spec)
        loss = tape.sum(tape.mul(y, tape.leaf(u)))  # = <conv(x), u>
        adjoint_u = grad_of(backward(tape, loss), "x")
        lhs = float((y.value.data * u.data).sum())
        rhs = float((x.data * adjoint_u.data).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_bias_add_gradient(self):
        x = rand_tensor((2, 3, 4, 4), 16)
        b = rand_tensor((1, 3, 1, 1), 17)

        def build(tape, nodes):
            y = tape.bias_add(nodes["x"], nodes["b"])
            return tape.sum(tape.mul(y, y))

        worst = fd_versus_tape(build, x, {"b": b})
        assert max(worst.values()) < 1e-5


class TestSmoothingGradients:
    def test_learned_filter_under_sum_loss(self):
        x = rand_tensor((1, 2, 7, 7), 20)
        v = rand_tensor((1, 1, 3, 3), 21)

        def build(tape, nodes):
            return tape.sum(tape.smooth(nodes["x"], nodes["v"]))

        worst = fd_versus_tape(build, x, {"v": v})
        assert worst["v"] < 1e-5
        assert worst["x"] < 1e-5

    def test_smoothed_dilated_conv_matches_fd(self):
        # gradient through smoothing + dilated conv, random instance
        spec = ConvSpec(3, 3)
        x = rand_tensor((1, 2, 9, 9), 5)
        v = rand_tensor((1, 1, 3, 3), 22)
        w = rand_tensor((2, 2, 3, 3), 23)

        def build(tape, nodes):
            s = tape.smooth(nodes["x"], nodes["v"])
            return tape.sum(tape.conv(s, nodes["w"], spec))

        worst = fd_versus_tape(build, x, {"v": v, "w": w})
        assert max(worst.values()) < 1e-5

    def test_smoothing_gradients_20_random_instances(self):
        rng = Rng(600)
        for i in range(20):
            cin = int(rng.integers(1, 4))
            h = int(rng.integers(5, 10))
            s = 3 if rng.integers(0, 2) else 5
            x = Tensor(rng.uniform(1 * cin * h * h, -1, 1).reshape(1, cin, h, h))
            v = Tensor(rng.uniform(s * s, -1, 1).reshape(1, 1, s, s))

            def build(tape, nodes):
                y = tape.smooth(nodes["x"], nodes["v"])
                return tape.sum(tape.mul(y, y))

            worst = fd_versus_tape(build, x, {"v": v})
            assert max(worst.values()) < 1e-4, f"instance {i}: {worst}"

    def test_fixed_filter_input_gradient(self):
        for kind, sep in [("average", True), ("average", False), ("gaussian", True)]:
            filt = build_smoothing_filter(kind, 3, sigma=1.0)
            x = rand_tensor((1, 2, 7, 7), 24)

            def build(tape, nodes, _f=filt, _sep=sep):
                y = tape.smooth_fixed(nodes["x"], _f, separable=_sep)
                return tape.sum(tape.mul(y, y))

            worst = fd_versus_tape(build, x, {})
            assert worst["x"] < 1e-5, (kind, sep)


class TestSoftmaxAndLosses:
    def test_softmax_gradient(self):
        logits = rand_tensor((1, 1, 1, 4), 30)
        target = rand_tensor((1, 1, 1, 4), 31)

        def build(tape, nodes):
            p = tape.softmax(nodes["x"])
            return tape.sum(tape.mul(p, tape.leaf(target)))

        worst = fd_versus_tape(build, logits, {})
        assert worst["x"] < 1e-6

    def test_cross_entropy_gradient(self):
        logits = rand_tensor((2, 3, 4, 4), 32)
        labels = np.asarray(Rng(33).integers(0, 3, 2 * 4 * 4)).reshape(2, 4, 4)

        def build(tape, nodes):
            return tape.cross_entropy(nodes["x"], labels)

        worst = fd_versus_tape(build, logits, {})
        assert worst["x"] < 1e-5

    def test_combine_gradients(self):
        coeffs = rand_tensor((1, 1, 1, 3), 34)
        m0 = rand_tensor((1, 1, 3, 3), 35)
        m1 = rand_tensor((1, 1, 3, 3), 36)
        m2 = rand_tensor((1, 1, 3, 3), 37)

        def build(tape, nodes):
            k = tape.combine(nodes["x"], [nodes["m0"], nodes["m1"], nodes["m2"]])
            return tape.sum(tape.mul(k, k))

        worst = fd_versus_tape(build, coeffs, {"m0": m0, "m1": m1, "m2": m2})
        assert max(worst.values()) < 1e-5


class TestCheckGradients:
    class TinyModel:
        """One conv + squared sum, linear in nothing."""

        def __init__(self, seed=40):
            self.w = rand_tensor((1, 1, 3, 3), seed)
            self.spec = ConvSpec(3, 1)

        def parameters(self):
            return {"w": self.w}

        def loss(self, tape, x):
            y = tape.conv(tape.leaf(x), tape.leaf(self.w, True, "w"), self.spec)
            return tape.sum(tape.mul(y, y))

    def test_passes_on_correct_gradients(self):
        model = self.TinyModel()
        x = rand_tensor((1, 1, 5, 5), 41)
        report = check_gradients(model, x, tolerance=1e-6)
        assert report.passed
        assert report.failing() == []

    def test_single_weight_linear_model_tight_tolerance(self):
        class OneWeight:
            def __init__(self):
                self.w = Tensor(np.full((1, 1, 1, 1), 0.7))

            def parameters(self):
                return {"w": self.w}

            def loss(self, tape, x):
                y = tape.conv(tape.leaf(x), tape.leaf(self.w, True, "w"), ConvSpec(1, 1))
                return tape.sum(y)

        x = rand_tensor((1, 1, 4, 4), 42)
        report = check_gradients(OneWeight(), x, tolerance=1e-8)
        assert report.passed

    def test_reports_failure_without_raising(self, monkeypatch):
        import sdconv.autodiff as ad

        orig = ad._conv_grad_x

        def corrupted(g, kern, r):
            return orig(g, kern, r) * 1.01

        monkeypatch.setattr(ad, "_conv_grad_x", corrupted)

        class TwoConv:
            def __init__(self):
                self.w1 = rand_tensor((1, 1, 3, 3), 43)
                self.w2 = rand_tensor((1, 1, 3, 3), 44)

            def parameters(self):
                return {"w1": self.w1, "w2": self.w2}

            def loss(self, tape, x):
                h = tape.conv(tape.leaf(x), tape.leaf(self.w1, True, "w1"), ConvSpec(3, 1))
                y = tape.conv(h, tape.leaf(self.w2, True, "w2"), ConvSpec(3, 1))
                return tape.sum(tape.mul(y, y))

        report = check_gradients(TwoConv(), rand_tensor((1, 1, 5, 5), 45), 1e-6)
        assert not report.passed
        assert "w1" in report.failing()  # w1's gradient flows through _conv_grad_x

    def test_impossible_tolerance_fails(self):
        model = self.TinyModel()
        x = rand_tensor((1, 1, 5, 5), 46)
        report = check_gradients(model, x, tolerance=1e-15)
        assert not report.passed
