"""Tensor engine tests: hand-computed values, adjoint identities, and
finite-difference oracles (all gradient checks in float64)."""

import math

import numpy as np
import pytest

from spanattn import errors
from spanattn.gradcheck import grad_check
from spanattn.tensor import (
    Tensor,
    add,
    avg_pool2d,
    backward,
    batch_norm,
    clamp,
    concat,
    conv2d,
    cross_entropy,
    div,
    elementwise,
    exp,
    fold,
    matmul,
    mul,
    narrow,
    no_grad,
    pad2d,
    relu,
    reshape,
    softmax_masked,
    stack,
    tensor_mean,
    tensor_sum,
    transpose,
    unfold,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, *shape, requires_grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_exp_values(self):
        y = exp(t64([0.0, 1.0]))
        np.testing.assert_allclose(y.data, [1.0, math.e], rtol=1e-15)

    def test_clamp_saturated_value_and_zero_grad(self):
        x = t64(5.0, requires_grad=True)
        y = clamp(x, 0.0, 3.0)
        assert y.item() == 3.0
        backward(tensor_sum(y))
        assert x.grad == 0.0

    def test_relu_values_and_backward(self):
        x = t64([-2.0, 3.0], requires_grad=True)
        y = relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 3.0])
        backward(tensor_sum(y))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_matches_finite_differences(self, rng):
        # sample away from the kink at 0
        x = Tensor(rng.standard_normal(6) + np.sign(rng.standard_normal(6)) * 0.2,
                   requires_grad=True)
        w = Tensor(rng.standard_normal(6))
        report = grad_check(lambda: tensor_sum(mul(relu(x), w)), [("x", x)], tol=1e-6)
        assert report.passed, str(report)

    def test_broadcasting_trailing_dims(self):
        a = t64(np.ones((2, 3)), requires_grad=True)
        b = t64([1.0, 2.0, 3.0], requires_grad=True)
        y = mul(a, b)
        assert y.shape == (2, 3)
        backward(tensor_sum(y))
        np.testing.assert_array_equal(a.grad, [[1, 2, 3], [1, 2, 3]])
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            add(t64(np.ones((2, 3))), t64(np.ones((4,))))

    def test_division_by_zero(self):
        with pytest.raises(errors.DivisionByZero):
            div(t64([1.0, 2.0]), t64([1.0, 0.0]))

    def test_elementwise_dispatcher(self):
        y = elementwise("add", t64([1.0]), t64([2.0]))
        assert y.item() == 3.0
        z = elementwise("clamp", t64([-1.0, 0.5, 2.0]), lo=0.0, hi=1.0)
        np.testing.assert_array_equal(z.data, [0.0, 0.5, 1.0])
        with pytest.raises(ValueError):
            elementwise("nope", t64([1.0]))

    def test_dtype_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert add(x, 1.0).dtype == np.float32
        y = Tensor(np.ones(3, dtype=np.float64))
        assert mul(y, 2.0).dtype == np.float64

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_ops_match_finite_differences(self, op, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)) + 3.0, requires_grad=True)  # keep away from 0
        fn = {"add": add, "sub": sub_, "mul": mul, "div": div}[op]
        report = grad_check(lambda: tensor_sum(mul(fn(a, b), fn(a, b))),
                            [("a", a), ("b", b)], tol=1e-5)
        assert report.passed, str(report)

    def test_exp_matches_finite_differences(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        report = grad_check(lambda: tensor_sum(exp(x)), [("x", x)], tol=1e-5)
        assert report.passed, str(report)

    def test_clamp_composition_away_from_kinks(self, rng):
        x = Tensor(np.array([-1.7, -0.4, 0.3, 0.6, 1.8]), requires_grad=True)
        report = grad_check(lambda: tensor_sum(mul(clamp(x, -1.0, 1.0), x)),
                            [("x", x)], tol=1e-4)
        assert report.passed, str(report)


def sub_(a, b):
    from spanattn.tensor import sub
    return sub(a, b)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        y = matmul(t64(np.eye(2)), a)
        np.testing.assert_array_equal(y.data, a.data)

    def test_hand_product(self):
        y = matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
        np.testing.assert_array_equal(y.data, [[11.0]])

    def test_gradients_match_finite_differences(self, rng):
        a = rand64(rng, 4, 5, requires_grad=True)
        b = rand64(rng, 5, 3, requires_grad=True)
        w = rand64(rng, 4, 3)
        report = grad_check(lambda: tensor_sum(mul(matmul(a, b), w)),
                            [("a", a), ("b", b)], tol=1e-6)
        assert report.passed, str(report)

    def test_batched_broadcast(self, rng):
        a = rand64(rng, 2, 3, 4, requires_grad=True)
        b = rand64(rng, 4, 5, requires_grad=True)
        y = matmul(a, b)
        assert y.shape == (2, 3, 5)
        report = grad_check(lambda: tensor_sum(mul(matmul(a, b), matmul(a, b))),
                            [("a", a), ("b", b)], tol=1e-5)
        assert report.passed, str(report)

    def test_inner_extent_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


# ---------------------------------------------------------------------------
# unfold / fold
# ---------------------------------------------------------------------------

class TestUnfold:
    def test_degenerate_window(self):
        y = unfold(t64([[[5.0]]]), kernel_size=1)
        np.testing.assert_array_equal(y.data, [[5.0]])

    def test_hand_enumerated_padding(self):
        x = t64(np.arange(1.0, 10.0).reshape(1, 3, 3))
        cols = unfold(x, kernel_size=3, stride=1, padding=1)
        assert cols.shape == (9, 9)
        np.testing.assert_array_equal(cols.data[:, 4], np.arange(1.0, 10.0))
        np.testing.assert_array_equal(cols.data[:, 0], [0, 0, 0, 0, 1, 2, 0, 4, 5])

    def test_fold_of_ones_counts_window_membership(self):
        # brute-force membership count oracle
        c, h, w, k, pad = 2, 4, 5, 3, 1
        counts = np.zeros((c, h, w))
        for i in range(h):
            for j in range(w):
                for r in range(-(k // 2), k // 2 + 1):
                    for s in range(-(k // 2), k // 2 + 1):
                        if 0 <= i + r < h and 0 <= j + s < w:
                            counts[:, i + r, j + s] += 1
        ones = t64(np.ones((c * k * k, h * w)))
        folded = fold(ones, (h, w), kernel_size=k, stride=1, padding=pad)
        np.testing.assert_array_equal(folded.data, counts)

    def test_adjoint_identity(self, rng):
        # <unfold(x), y> == <x, fold(y)>
        x = rand64(rng, 3, 6, 5)
        cols = unfold(x, kernel_size=3, stride=2, padding=1)
        y = rand64(rng, *cols.shape)
        lhs = float((cols.data * y.data).sum())
        rhs = float((x.data * fold(y, (6, 5), 3, stride=2, padding=1).data).sum())
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_backward_scatter_adds(self, rng):
        x = rand64(rng, 1, 3, 3, requires_grad=True)
        cols = unfold(x, kernel_size=3, stride=1, padding=1)
        backward(tensor_sum(cols))
        counts = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float64)
        np.testing.assert_array_equal(x.grad, counts[None])

    def test_even_kernel_rejected(self):
        with pytest.raises(errors.EvenKernel):
            unfold(t64(np.ones((1, 4, 4))), kernel_size=2)

    def test_nonpositive_stride_rejected(self):
        with pytest.raises(errors.NonPositiveStride):
            unfold(t64(np.ones((1, 4, 4))), kernel_size=3, stride=0)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d_reference(x, w, stride=1, padding=1):
    """Direct 6-loop cross-correlation, used as an independent oracle."""
    b, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wid + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, cout, oh, ow))
    for bi in range(b):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for r in range(k):
                            for s in range(k):
                                acc += xp[bi, ci, i * stride + r, j * stride + s] * w[co, ci, r, s]
                    out[bi, co, i, j] = acc
    return out


class TestConv2d:
    def test_all_ones_center_sums_window(self):
        x = t64(np.ones((1, 1, 3, 3)))
        w = t64(np.ones((1, 1, 3, 3)))
        y = conv2d(x, w, padding=1)
        assert y.data[0, 0, 1, 1] == 9.0

    def test_delta_kernel_is_identity(self, rng):
        x = rand64(rng, 2, 3, 5, 5)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = conv2d(x, t64(w), padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_six_loop_reference(self, rng):
        x = rand64(rng, 2, 3, 8, 8)
        w = rand64(rng, 4, 3, 3, 3)
        y = conv2d(x, w, stride=1, padding=1)
        ref = conv2d_reference(x.data, w.data)
        np.testing.assert_allclose(y.data, ref, atol=1e-10)

    def test_strided_matches_reference(self, rng):
        x = rand64(rng, 2, 3, 8, 8)
        w = rand64(rng, 4, 3, 3, 3)
        y = conv2d(x, w, stride=2, padding=1)
        ref = conv2d_reference(x.data, w.data, stride=2)
        assert y.shape == (2, 4, 4, 4)
        np.testing.assert_allclose(y.data, ref, atol=1e-10)

    def test_gradients_match_finite_differences(self, rng):
        x = rand64(rng, 1, 2, 4, 4, requires_grad=True)
        w = rand64(rng, 3, 2, 3, 3, requires_grad=True)
        bias = rand64(rng, 3, requires_grad=True)
        probe = rand64(rng, 1, 3, 4, 4)
        report = grad_check(
            lambda: tensor_sum(mul(conv2d(x, w, padding=1, bias=bias), probe)),
            [("x", x), ("w", w), ("bias", bias)], tol=1e-6)
        assert report.passed, str(report)

    def test_one_by_one_kernel_path(self, rng):
        x = rand64(rng, 2, 4, 6, 6, requires_grad=True)
        w = rand64(rng, 8, 4, 1, 1, requires_grad=True)
        y = conv2d(x, w, stride=2)
        ref = conv2d_reference(x.data, w.data, stride=2, padding=0)
        np.testing.assert_allclose(y.data, ref, atol=1e-12)
        report = grad_check(lambda: tensor_sum(mul(conv2d(x, w, stride=2),
                                                   conv2d(x, w, stride=2))),
                            [("x", x), ("w", w)], tol=1e-5)
        assert report.passed, str(report)

    def test_channel_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            conv2d(t64(np.ones((1, 3, 4, 4))), t64(np.ones((2, 4, 3, 3))))


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def _stats(self, c):
        return np.zeros(c), np.ones(c)

    def test_normalized_channel_unchanged(self, rng):
        x = rng.standard_normal((8, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        rm, rv = self._stats(2)
        y = batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=True)
        np.testing.assert_allclose(y.data, x, atol=1e-4)

    def test_constant_channel_zeros(self):
        x = t64(np.full((4, 1, 2, 2), 7.0))
        rm, rv = self._stats(1)
        y = batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)), rm, rv, training=True)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-8)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((16, 3, 2, 2)) * 2.0 + 5.0
        rm, rv = self._stats(3)
        batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), rm, rv, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        n = 16 * 4
        np.testing.assert_allclose(
            rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-12)

    def test_eval_mode_uses_running_stats(self, rng):
        x = rand64(rng, 4, 2, 3, 3)
        rm = np.array([1.0, -1.0])
        rv = np.array([4.0, 0.25])
        y = batch_norm(x, t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=False)
        expected = (x.data - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(y.data, expected, rtol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        x = rand64(rng, 3, 2, 2, 2, requires_grad=True)
        gamma = Tensor(np.array([1.3, 0.7]), requires_grad=True)
        beta = Tensor(np.array([0.1, -0.2]), requires_grad=True)
        probe = rand64(rng, 3, 2, 2, 2)

        def f():
            rm, rv = self._stats(2)
            return tensor_sum(mul(batch_norm(x, gamma, beta, rm, rv, training=True), probe))

        report = grad_check(f, [("x", x), ("gamma", gamma), ("beta", beta)], tol=1e-5)
        assert report.passed, str(report)

    def test_degenerate_batch(self):
        rm, rv = self._stats(1)
        with pytest.raises(errors.DegenerateBatch):
            batch_norm(t64(np.ones((1, 1, 1, 1))), t64(np.ones(1)), t64(np.zeros(1)),
                       rm, rv, training=True)


# ---------------------------------------------------------------------------
# masked softmax
# ---------------------------------------------------------------------------

class TestSoftmaxMasked:
    def test_two_way_uniform(self):
        out = softmax_masked(t64([0.0, 0.0, 0.0]), t64([1.0, 1.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0], atol=1e-9)

    def test_all_ones_mask_is_softmax(self, rng):
        logits = rand64(rng, 4, 6)
        out = softmax_masked(logits, t64(np.ones(6)))
        e = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
        np.testing.assert_allclose(out.data, e / e.sum(axis=-1, keepdims=True), atol=1e-9)

    def test_hand_computed_masked_normalizer(self):
        out = softmax_masked(t64([math.log(2.0), 0.0]), t64([1.0, 0.5]))
        np.testing.assert_allclose(out.data, [0.8, 0.2], atol=1e-9)

    def test_nonnegative_and_normalized(self, rng):
        logits = rand64(rng, 5, 8)
        mask = Tensor(rng.uniform(0, 1, 8))
        mask.data[2] = 0.7  # ensure some entry >= 0.5
        out = softmax_masked(logits, mask, eps=1e-12)
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_all_masked_without_epsilon(self):
        with pytest.raises(errors.AllMaskedWithoutEpsilon):
            softmax_masked(t64([1.0, 2.0]), t64([0.0, 0.0]), eps=0.0)

    def test_gradients_flow_to_logits_and_mask(self, rng):
        logits = rand64(rng, 3, 5, requires_grad=True)
        mask = Tensor(rng.uniform(0.2, 1.0, 5), requires_grad=True)
        probe = rand64(rng, 3, 5)
        report = grad_check(
            lambda: tensor_sum(mul(softmax_masked(logits, mask), probe)),
            [("logits", logits), ("mask", mask)], tol=1e-6)
        assert report.passed, str(report)

    def test_broadcast_mask_over_heads(self, rng):
        logits = rand64(rng, 2, 3, 4, 5, requires_grad=True)
        mask = Tensor(rng.uniform(0.2, 1.0, (3, 1, 5)), requires_grad=True)
        probe = rand64(rng, 2, 3, 4, 5)
        report = grad_check(
            lambda: tensor_sum(mul(softmax_masked(logits, mask), probe)),
            [("logits", logits), ("mask", mask)], tol=1e-6)
        assert report.passed, str(report)


# ---------------------------------------------------------------------------
# backward / tape
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_grad_is_ones(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_grad(self):
        x = t64([1.0, 2.0], requires_grad=True)
        backward(tensor_sum(mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = t64([1.0, 2.0], requires_grad=True)
        y = mul(x, x)
        with pytest.raises(errors.NonScalarLoss):
            backward(y)

    def test_stale_tape_on_second_backward(self):
        x = t64([1.0, 2.0], requires_grad=True)
        loss = tensor_sum(mul(x, x))
        backward(loss)
        with pytest.raises(errors.StaleTape):
            backward(loss)

    def test_retain_tape_allows_replay(self):
        x = t64([1.0, 2.0], requires_grad=True)
        loss = tensor_sum(mul(x, x))
        backward(loss, retain_tape=True)
        x.zero_grad()
        backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_no_grad_suppresses_recording(self):
        x = t64([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad

    def test_diamond_dependency_accumulates(self):
        x = t64([3.0], requires_grad=True)
        y = mul(x, x)      # x^2
        z = add(y, y)      # 2 x^2 -> dz/dx = 4x = 12
        backward(tensor_sum(z))
        np.testing.assert_allclose(x.grad, [12.0])


# ---------------------------------------------------------------------------
# shape / pooling ops
# ---------------------------------------------------------------------------

class TestShapeOps:
    def test_reshape_transpose_roundtrip_grads(self, rng):
        x = rand64(rng, 2, 3, 4, requires_grad=True)
        y = transpose(reshape(x, (6, 4)), (1, 0))
        backward(tensor_sum(mul(y, y)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_narrow_and_concat(self, rng):
        x = rand64(rng, 5, 3, requires_grad=True)
        a = narrow(x, 0, 1, 2)
        b = narrow(x, 0, 3, 2)
        y = concat([a, b], axis=0)
        np.testing.assert_array_equal(y.data, x.data[1:5])
        backward(tensor_sum(y))
        expected = np.zeros((5, 3))
        expected[1:5] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_narrow_out_of_bounds(self):
        with pytest.raises(errors.ShapeMismatch):
            narrow(t64(np.ones((3, 2))), 0, 2, 2)

    def test_stack(self, rng):
        a = rand64(rng, 2, 2, requires_grad=True)
        b = rand64(rng, 2, 2, requires_grad=True)
        y = stack([a, b], axis=0)
        assert y.shape == (2, 2, 2)
        backward(tensor_sum(mul(y, y)))
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 2 * b.data)

    def test_pad2d(self, rng):
        x = rand64(rng, 1, 2, 3, 3, requires_grad=True)
        y = pad2d(x, 2)
        assert y.shape == (1, 2, 7, 7)
        assert (y.data[:, :, :2, :] == 0).all()
        backward(tensor_sum(mul(y, y)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_avg_pool(self, rng):
        x = rand64(rng, 2, 3, 4, 4, requires_grad=True)
        y = avg_pool2d(x, 2)
        assert y.shape == (2, 3, 2, 2)
        np.testing.assert_allclose(y.data[0, 0, 0, 0], x.data[0, 0, :2, :2].mean())
        backward(tensor_sum(y))
        np.testing.assert_allclose(x.grad, 0.25)

    def test_mean_axis(self, rng):
        x = rand64(rng, 3, 4, requires_grad=True)
        y = tensor_mean(x, axis=1)
        np.testing.assert_allclose(y.data, x.data.mean(axis=1))
        backward(tensor_sum(y))
        np.testing.assert_allclose(x.grad, 0.25)


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(t64(np.zeros((2, 10))), np.array([3, 7]))
        np.testing.assert_allclose(loss.item(), math.log(10.0), rtol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        logits = rand64(rng, 4, 6, requires_grad=True)
        labels = np.array([0, 2, 5, 1])
        report = grad_check(lambda: cross_entropy(logits, labels),
                            [("logits", logits)], tol=1e-6)
        assert report.passed, str(report)


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

class TestGradCheck:
    def test_linear_map_near_machine_epsilon(self, rng):
        x = rand64(rng, 4, requires_grad=True)
        w = rand64(rng, 4)
        report = grad_check(lambda: tensor_sum(mul(x, w)), [("x", x)], tol=1e-9)
        assert report.passed
        assert report.max_rel_err < 1e-9

    def test_nondeterministic_function_detected(self):
        x = t64([1.0], requires_grad=True)
        state = {"n": 0}

        def f():
            state["n"] += 1
            return tensor_sum(mul(x, float(state["n"])))

        with pytest.raises(errors.NonDeterministicFunction):
            grad_check(f, [("x", x)])

    def test_report_formatting(self, rng):
        x = rand64(rng, 2, requires_grad=True)
        report = grad_check(lambda: tensor_sum(mul(x, x)), [("x", x)], tol=1e-6)
        text = str(report)
        assert "PASS" in text and "max rel err" in text


# ---------------------------------------------------------------------------
# blanket finite-difference property over the differentiable op set
# ---------------------------------------------------------------------------

def test_all_ops_match_finite_differences_at_random_points():
    rng = np.random.default_rng(42)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5, requires_grad=True)
    gamma = Tensor(np.array([1.1, 0.9]), requires_grad=True)
    beta = Tensor(np.array([0.0, 0.1]), requires_grad=True)
    probe = Tensor(rng.standard_normal((2, 2, 4, 4)))

    def f():
        y = conv2d(x, w, padding=1)
        y = batch_norm(y, gamma, beta, np.zeros(2), np.ones(2), training=True)
        y = relu(add(y, 0.3))
        y = mul(y, probe)
        return tensor_sum(exp(mul(tensor_mean(y), 0.1)))

    report = grad_check(f, [("x", x), ("w", w), ("gamma", gamma), ("beta", beta)], tol=1e-5)
    assert report.passed, str(report)
