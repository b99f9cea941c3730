"""Dependency tracing against the impulse-response oracle."""
import numpy as np
import pytest

from sdconv.conv import ConvSpec
from sdconv.errors import ParameterError
from sdconv.gridding import (
    DependencyMap,
    ExtentTooSmall,
    LayerEntry,
    LayerStack,
    export_dependency_art,
    gridding_score,
    trace_dependencies,
)

from oracles import impulse_dependencies


def layer(k=3, r=1, smoothing="none", size=None):
    if size is None:
        size = 1 if smoothing == "none" else r
    return LayerEntry(
        spec=ConvSpec(kernel_size=k, dilation=r),
        smoothing=smoothing,
        smoothing_size=size,
    )


def stack(*layers):
    return LayerStack(layers=tuple(layers))


class TestTraceDependencies:
    def test_standard_conv_neighborhood(self):
        m = trace_dependencies(stack(layer(3, 1)), (9, 9))
        deps = m.depends(4, 4)
        expect = {(4 + dy, 4 + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}
        assert deps == expect

    def test_dilated_conv_even_lattice(self):
        m = trace_dependencies(stack(layer(3, 2)), (11, 11))
        deps = m.depends(5, 5)
        expect = {(5 + dy, 5 + dx) for dy in (-2, 0, 2) for dx in (-2, 0, 2)}
        assert deps == expect
        assert len(deps) == 9

    def test_two_layer_r2_25_point_lattice(self):
        m = trace_dependencies(stack(layer(3, 2), layer(3, 2)), (15, 15))
        deps = m.depends(7, 7)
        offsets = (-4, -2, 0, 2, 4)
        expect = {(7 + dy, 7 + dx) for dy in offsets for dx in offsets}
        assert deps == expect

    def test_extent_too_small_carries_minimum(self):
        with pytest.raises(ExtentTooSmall) as exc_info:
            trace_dependencies(stack(layer(3, 2), layer(3, 2)), (7, 7))
        assert exc_info.value.min_extent == (9, 9)
        assert "9x9" in str(exc_info.value)

    def test_translation_consistency_interior(self):
        m = trace_dependencies(stack(layer(3, 2), layer(3, 3, "average", 3)), (19, 19))
        a = m.depends(9, 9)
        b = m.depends(10, 9)
        assert {(y + 1, x) for (y, x) in a} == b

    def test_span_formula_single_layer(self):
        # bounding box of the interior dependency set is (K-1)*r + s per axis
        for k, r, smoothing, s in [(3, 2, "none", 1), (3, 3, "average", 3), (5, 1, "gaussian", 3)]:
            m = trace_dependencies(stack(layer(k, r, smoothing, s)), (21, 21))
            deps = m.depends(10, 10)
            ys = [y for y, _ in deps]
            xs = [x for _, x in deps]
            want = (k - 1) * r + s
            assert max(ys) - min(ys) + 1 == want
            assert max(xs) - min(xs) + 1 == want


class TestOracleEquivalence:
    STACKS = [
        [layer(3, 1)],
        [layer(3, 2)],
        [layer(1, 1)],
        [layer(3, 2), layer(3, 2)],  # the two-layer gridded configuration
        [layer(3, 2, "average", 2), layer(3, 2, "average", 2)],
        [layer(3, 3, "average", 3)],
        [layer(3, 2), layer(3, 1)],
        [layer(3, 1, "gaussian", 3), layer(3, 2)],
        [layer(5, 1), layer(3, 2)],
    ]

    @pytest.mark.parametrize("layers", STACKS)
    def test_trace_equals_impulse_oracle(self, layers):
        st = stack(*layers)
        assert st.span <= 15
        extent = (17, 17)
        traced = trace_dependencies(st, extent)
        oracle = impulse_dependencies(st.layers, extent)
        assert np.array_equal(traced.deps, oracle)

    def test_oracle_equivalence_larger_extent(self):
        st = stack(layer(3, 2), layer(3, 2))
        extent = (31, 31)
        traced = trace_dependencies(st, extent)
        oracle = impulse_dependencies(st.layers, extent)
        assert np.array_equal(traced.deps, oracle)


class TestGriddingScore:
    def test_two_layer_unsmoothed_fully_gridded(self):
        m = trace_dependencies(stack(layer(3, 2), layer(3, 2)), (21, 21))
        assert gridding_score(m) == 1.0

    def test_average_smoothing_removes_gridding(self):
        m = trace_dependencies(
            stack(layer(3, 2, "average", 2), layer(3, 2, "average", 2)), (21, 21)
        )
        assert gridding_score(m) == 0.0

    def test_standard_conv_not_gridded(self):
        m = trace_dependencies(stack(layer(3, 1)), (9, 9))
        assert gridding_score(m) == 0.0

    def test_monotone_in_smoothing(self):
        # adding size >= 3 smoothing never shrinks dependencies or raises score
        base_layers = [layer(3, 2), layer(3, 3)]
        smoothed_layers = [layer(3, 2, "average", 3), layer(3, 3, "average", 3)]
        base = trace_dependencies(stack(*base_layers), (25, 25))
        smoothed = trace_dependencies(stack(*smoothed_layers), (25, 25))
        for h, w in smoothed.interior_pixels():
            assert base.depends(h, w) <= smoothed.depends(h, w)
        assert gridding_score(smoothed) <= gridding_score(base)

    def test_dependencies_within_bounds(self):
        m = trace_dependencies(stack(layer(3, 3), layer(3, 2)), (23, 23))
        for h in range(0, 23, 7):
            for w in range(0, 23, 7):
                for (y, x) in m.depends(h, w):
                    assert 0 <= y < 23 and 0 <= x < 23


class TestDependencyArt:
    def test_single_layer_dilated_marks(self):
        m = trace_dependencies(stack(layer(3, 2)), (11, 11))
        art = export_dependency_art(m, (5, 5))
        lines = art.splitlines()
        assert len(lines) == 11
        assert sum(row.count("#") for row in lines) == 9
        assert lines[3][3] == "#"
        assert lines[3][4] == "."
        assert lines[5][5] == "#"

    def test_k1_single_mark(self):
        m = trace_dependencies(stack(layer(1, 1)), (5, 5))
        art = export_dependency_art(m, (2, 2))
        assert sum(row.count("#") for row in art.splitlines()) == 1

    def test_smoothed_stack_contiguous_blob(self):
        m = trace_dependencies(
            stack(layer(3, 3, "average", 3), layer(3, 3, "average", 3)), (27, 27)
        )
        deps = m.depends(13, 13)
        ys = sorted({y for y, _ in deps})
        xs = sorted({x for _, x in deps})
        # contiguous coverage: every row/col in the bounding box is present
        assert ys == list(range(min(ys), max(ys) + 1))
        assert xs == list(range(min(xs), max(xs) + 1))
        art = export_dependency_art(m, (13, 13))
        assert art.splitlines()[13][13] == "#"

    def test_non_interior_center_rejected(self):
        m = trace_dependencies(stack(layer(3, 2)), (11, 11))
        with pytest.raises(ParameterError):
            export_dependency_art(m, (0, 0))


class TestLayerEntryValidation:
    def test_unknown_smoothing_rejected(self):
        with pytest.raises(ParameterError):
            LayerEntry(spec=ConvSpec(3, 1), smoothing="box", smoothing_size=3)

    def test_none_with_window_rejected(self):
        with pytest.raises(ParameterError):
            LayerEntry(spec=ConvSpec(3, 1), smoothing="none", smoothing_size=3)

    def test_empty_stack_rejected(self):
        with pytest.raises(ParameterError):
            LayerStack(layers=())
