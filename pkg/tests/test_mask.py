"""Adaptive mask tests: exact ring values, extent arithmetic, monotonicity,
and finite-difference checks on the span gradient."""

import math

import numpy as np
import pytest

from spanattn import errors
from spanattn.gradcheck import grad_check
from spanattn.mask import MaskGrid, SpanParam, create_adaptive_mask, head_masks, kernel_extent
from spanattn.tensor import Tensor, mul, tensor_sum


def chebyshev(extent):
    c = (extent - 1) // 2
    idx = np.arange(extent) - c
    return np.maximum(np.abs(idx)[:, None], np.abs(idx)[None, :])


class TestKernelExtent:
    def test_reference_examples(self):
        assert kernel_extent([2.0], 2, 32) == 9
        assert kernel_extent([40.0], 2, 32) == 65
        assert kernel_extent([0.0], 2, 32) == 5

    def test_max_over_heads_with_ceil(self):
        assert kernel_extent([1.2, 0.3], 2, 32) == 9  # ceil(3.2) = 4

    def test_empty_span_list(self):
        with pytest.raises(errors.EmptySpanList):
            kernel_extent([], 2, 32)

    def test_monotone_in_every_span(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            zs = list(rng.uniform(0, 40, 3))
            base = kernel_extent(zs, 2, 32)
            i = rng.integers(0, 3)
            zs[i] += rng.uniform(0, 5)
            assert kernel_extent(zs, 2, 32) >= base

    def test_always_odd_and_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            s = int(rng.integers(1, 33))
            e = kernel_extent(list(rng.uniform(0, 3 * s, 2)), int(rng.integers(1, 4)), s)
            assert e % 2 == 1
            assert e <= 2 * s + 1


class TestCreateAdaptiveMask:
    def test_reference_grid_z2_r2_extent9(self):
        grid = create_adaptive_mask(9, SpanParam(z=2.0, ramp=2))
        d = chebyshev(9)
        expected = np.where(d <= 2, 1.0, np.where(d == 3, 0.5, 0.0))
        np.testing.assert_array_equal(grid.values.data, expected)

    def test_span_zero_collapses_to_center(self):
        grid = create_adaptive_mask(3, SpanParam(z=0.0, ramp=1))
        expected = np.zeros((3, 3))
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(grid.values.data, expected)

    def test_fractional_span_ramp_value_and_gradient(self):
        span = SpanParam(z=1.5, ramp=2)
        grid = create_adaptive_mask(7, span)
        d = chebyshev(7)
        np.testing.assert_allclose(grid.values.data[d == 2], 0.75)

        probe = np.zeros((7, 7))
        probe[d == 2] = 1.0
        report = grad_check(
            lambda: tensor_sum(mul(create_adaptive_mask(7, span).values, Tensor(probe))),
            [("z", span.z)], tol=1e-6)
        assert report.passed, str(report)
        # dM/dz is 1/R on the ramp; the d==2 ring has 5^2 - 3^2 = 16 cells
        np.testing.assert_allclose(span.z.grad, 16 * 0.5)

    def test_even_extent_rejected(self):
        with pytest.raises(errors.EvenExtent):
            create_adaptive_mask(4, SpanParam())

    def test_center_is_one_and_radially_nonincreasing(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            span = SpanParam(z=float(rng.uniform(0, 6)), ramp=int(rng.integers(1, 4)))
            e = kernel_extent([span.value], span.ramp, 32)
            m = create_adaptive_mask(e, span).values.data
            c = (e - 1) // 2
            assert m[c, c] == 1.0
            d = chebyshev(e)
            for ring in range(1, c + 1):
                assert m[d == ring].max() <= m[d == ring - 1].min() + 1e-15

    def test_support_bound(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            z = float(rng.uniform(0, 5))
            ramp = int(rng.integers(1, 4))
            e = kernel_extent([z], ramp, 32)
            m = create_adaptive_mask(e, SpanParam(z=z, ramp=ramp)).values.data
            d = chebyshev(e)
            np.testing.assert_array_equal(m > 0, d < z + ramp)

    def test_monotone_in_z(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            z = float(rng.uniform(0, 4))
            dz = float(rng.uniform(0, 2))
            lo = create_adaptive_mask(13, SpanParam(z=z, ramp=2)).values.data
            hi = create_adaptive_mask(13, SpanParam(z=z + dz, ramp=2)).values.data
            assert (hi >= lo - 1e-15).all()

    def test_saturated_when_span_covers_extent(self):
        grid = create_adaptive_mask(5, SpanParam(z=2.0, ramp=2))
        np.testing.assert_array_equal(grid.values.data, np.ones((5, 5)))

    def test_gradient_matches_fd_away_from_kinks(self):
        rng = np.random.default_rng(10)
        checked = 0
        while checked < 10:
            z = float(rng.uniform(0.1, 5.0))
            if min(z % 1.0, 1.0 - (z % 1.0)) < 0.05:
                continue  # integer-distance kinks excluded
            span = SpanParam(z=z, ramp=2)
            e = kernel_extent([z], 2, 32)
            probe = Tensor(rng.standard_normal((e, e)))
            report = grad_check(
                lambda: tensor_sum(mul(create_adaptive_mask(e, span).values, probe)),
                [("z", span.z)], tol=1e-6)
            assert report.passed, f"z={z}: {report}"
            checked += 1


class TestHeadMasks:
    def test_two_heads_on_shared_extent(self):
        masks = head_masks([SpanParam(2.0, 2), SpanParam(0.0, 2)], 9)
        d = chebyshev(9)
        expected0 = np.where(d <= 2, 1.0, np.where(d == 3, 0.5, 0.0))
        np.testing.assert_array_equal(masks[0].values.data, expected0)
        expected1 = np.clip((2.0 + 0.0 - d) / 2.0, 0.0, 1.0)
        np.testing.assert_array_equal(masks[1].values.data, expected1)
        assert masks[1].values.data[d == 2].max() == 0.0

    def test_singleton_matches_create(self):
        span = SpanParam(1.0, 2)
        single = head_masks([span], 7)
        direct = create_adaptive_mask(7, span)
        np.testing.assert_array_equal(single[0].values.data, direct.values.data)

    def test_equal_spans_give_identical_masks(self):
        masks = head_masks([SpanParam(1.5, 2) for _ in range(4)], 9)
        for m in masks[1:]:
            np.testing.assert_array_equal(m.values.data, masks[0].values.data)

    def test_extent_too_small(self):
        with pytest.raises(errors.ExtentTooSmall):
            head_masks([SpanParam(3.0, 2)], 5)

    def test_input_size_clamp_permits_small_extent(self):
        # reach is clamped at the image size, so 2*S+1 is always enough
        masks = head_masks([SpanParam(40.0, 2)], 9, input_size=4)
        np.testing.assert_array_equal(masks[0].values.data, np.ones((9, 9)))


class TestSpanParam:
    def test_projection_clamps_in_place(self):
        span = SpanParam(z=50.0, ramp=2)
        span.project_(32)
        assert span.value == 32.0
        span.z.data[...] = -3.0
        span.project_(32)
        assert span.value == 0.0

    def test_ramp_validation(self):
        with pytest.raises(ValueError):
            SpanParam(z=1.0, ramp=0)

    def test_mask_flat_view(self):
        grid = create_adaptive_mask(3, SpanParam(0.5, 1))
        assert grid.flat.shape == (9,)
