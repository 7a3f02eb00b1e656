import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncdistill import autodiff as ad
from uncdistill.autodiff import EngineError, NonFiniteError, Tensor


def t(arr, **kw):
    return Tensor(np.asarray(arr, dtype=np.float64), **kw)


class TestTensorBasics:
    def test_rejects_non_4d(self):
        with pytest.raises(EngineError, match="4-D"):
            Tensor(np.zeros((3, 3)))

    def test_scalar_item(self):
        assert ad.scalar(2.5).item() == pytest.approx(2.5)
        with pytest.raises(EngineError):
            t(np.zeros((1, 2, 1, 1))).item()

    def test_dtype_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float64))
        with pytest.raises(EngineError, match="dtype"):
            ad.add(a, b)

    def test_finite_checks_flag(self):
        x = t(np.full((1, 1, 1, 1), 1e308))
        with np.errstate(over="ignore"):
            with ad.finite_checks():
                with pytest.raises(NonFiniteError):
                    ad.mul(x, x)
            # off by default: the same op goes through
            assert np.isinf(ad.mul(x, x).data).all()


class TestConv2d:
    def test_all_ones_3x3_pad1(self):
        # hand-computed: overlap counts 4 / 6 / 9 for corner / edge / center
        x = t(np.ones((1, 1, 3, 3)))
        w = t(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, padding=1).data[0, 0]
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
        np.testing.assert_array_equal(out, expected)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = t(rng.normal(size=(2, 1, 5, 7)))
        w = t(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(ad.conv2d(x, w).data, x.data)

    def test_zero_weight_zero_bias(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(1, 3, 4, 4)))
        w = t(np.zeros((2, 3, 3, 3)))
        b = t(np.zeros((1, 2, 1, 1)))
        assert not ad.conv2d(x, w, b, padding=1).data.any()

    def test_channel_mismatch_names_both_shapes(self):
        x = t(np.zeros((1, 3, 4, 4)))
        w = t(np.zeros((2, 4, 3, 3)))
        with pytest.raises(EngineError) as exc:
            ad.conv2d(x, w, padding=1)
        assert "(1, 3, 4, 4)" in str(exc.value)
        assert "(2, 4, 3, 3)" in str(exc.value)

    def test_non_integral_output_rejected(self):
        x = t(np.zeros((1, 1, 5, 5)))
        w = t(np.zeros((1, 1, 2, 2)))
        with pytest.raises(EngineError, match="not integral"):
            ad.conv2d(x, w, stride=2)

    def test_stride2_matches_direct_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        out = ad.conv2d(t(x), t(w), stride=2, padding=1).data
        # independent oracle: direct nested-loop cross-correlation
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for b in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        ref[b, o, i, j] = (patch * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


class TestUnaryOps:
    def test_relu(self):
        x = t(np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3))
        np.testing.assert_array_equal(
            ad.apply_unary(x, "relu").data.ravel(), [0, 0, 3])

    def test_sigmoid_zero(self):
        assert ad.apply_unary(ad.scalar(0.0), "sigmoid").item() == pytest.approx(0.5)

    def test_log1p_value(self):
        # ln(1.5) evaluated independently
        assert ad.apply_unary(ad.scalar(0.5, np.float64), "log1p").item() == \
            pytest.approx(np.log(1.5), abs=1e-12)

    def test_log1p_domain_fault(self):
        with pytest.raises(EngineError, match="domain"):
            ad.log1p(ad.scalar(-1.0))

    def test_unknown_kind(self):
        with pytest.raises(EngineError, match="unknown kind"):
            ad.apply_unary(ad.scalar(0.0), "tanh")


class TestSoftmaxChannels:
    def test_symmetric_logits(self):
        x = t(np.zeros((1, 2, 1, 1)))
        np.testing.assert_allclose(ad.softmax_channels(x).data.ravel(), [0.5, 0.5])

    def test_closed_form(self):
        x = t(np.array([0.0, np.log(3.0)]).reshape(1, 2, 1, 1))
        np.testing.assert_allclose(ad.softmax_channels(x).data.ravel(),
                                   [0.25, 0.75], atol=1e-12)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance_and_sums(self, seed, shift):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=5.0, size=(2, 4, 3, 3))
        a = ad.softmax_channels(t(logits)).data
        b = ad.softmax_channels(t(logits + shift)).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_extreme_logits_stay_finite(self):
        x = t(np.array([1000.0, -1000.0]).reshape(1, 2, 1, 1))
        with ad.finite_checks():
            out = ad.softmax_channels(x)
        np.testing.assert_allclose(out.data.ravel(), [1.0, 0.0])


class TestMaxpool2:
    def test_simple_blocks(self):
        x = t(np.array([[1, 2], [3, 4]], dtype=float).reshape(1, 1, 2, 2))
        assert ad.maxpool2(x).item() == 4.0
        x = t(np.array([[5, 1], [1, 1]], dtype=float).reshape(1, 1, 2, 2))
        assert ad.maxpool2(x).item() == 5.0

    def test_odd_extent_rejected(self):
        with pytest.raises(EngineError, match="even"):
            ad.maxpool2(t(np.zeros((1, 1, 3, 4))))

    def test_tie_gradient_goes_to_first_row_major(self):
        x = t(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = ad.sum_over(ad.maxpool2(x))
        out.backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_constant_input(self):
        x = t(np.full((1, 2, 4, 4), 7.0))
        np.testing.assert_array_equal(ad.maxpool2(x).data, np.full((1, 2, 2, 2), 7.0))


class TestUpsampleBilinear2x:
    def test_constant(self):
        x = t(np.full((1, 1, 3, 5), 2.5))
        np.testing.assert_allclose(ad.upsample_bilinear2x(x).data,
                                   np.full((1, 1, 6, 10), 2.5))

    def test_single_pixel(self):
        x = t(np.full((1, 1, 1, 1), 3.25))
        np.testing.assert_array_equal(ad.upsample_bilinear2x(x).data,
                                      np.full((1, 1, 2, 2), 3.25))

    def test_half_pixel_weights_1x2(self):
        # hand evaluation of the half-pixel sample positions
        x = t(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
        out = ad.upsample_bilinear2x(x).data
        np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
        np.testing.assert_allclose(out[0, 0, 1], [0.0, 0.25, 0.75, 1.0])

    def test_matches_gather_oracle(self):
        # oracle: explicit per-output-pixel gather at (o + 0.5)/2 - 0.5
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 5, 4))
        out = ad.upsample_bilinear2x(t(x)).data

        def coords(n):
            pos = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0, n - 1)
            i0 = np.floor(pos).astype(int)
            return i0, np.minimum(i0 + 1, n - 1), pos - i0

        i0, i1, wi = coords(5)
        j0, j1, wj = coords(4)
        rows = x[:, :, i0] * (1 - wi)[None, None, :, None] + \
            x[:, :, i1] * wi[None, None, :, None]
        ref = rows[:, :, :, j0] * (1 - wj) + rows[:, :, :, j1] * wj
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


class TestBackward:
    def test_square_sum_gradient(self):
        x = t(np.array([1.0, -2.0, 3.0]).reshape(1, 1, 1, 3), requires_grad=True)
        ad.sum_over(ad.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad.ravel(), [2.0, -4.0, 6.0])

    def test_unused_parameter_gets_zero(self):
        x = t(np.ones((1, 1, 1, 2)), requires_grad=True)
        y = t(np.ones((1, 1, 1, 2)), requires_grad=True)
        # y sits on the tape but cannot influence the value
        loss = ad.add(ad.sum_over(ad.mul(x, x)), ad.scale(ad.sum_over(y), 0.0))
        loss.backward()
        np.testing.assert_array_equal(y.grad, np.zeros_like(y.data))

    def test_mean_gradient(self):
        x = t(np.arange(6.0).reshape(1, 1, 2, 3), requires_grad=True)
        ad.mean_over(x).backward()
        np.testing.assert_allclose(x.grad, np.full_like(x.data, 1.0 / 6.0))

    def test_non_scalar_loss_rejected(self):
        x = t(np.ones((1, 1, 1, 2)), requires_grad=True)
        with pytest.raises(EngineError, match="scalar"):
            ad.mul(x, x).backward()

    def test_fanout_accumulates(self):
        # grad of f(x) + g(x) equals grad f + grad g
        x0 = np.array([0.3, -1.2, 2.0]).reshape(1, 1, 1, 3)

        def run(build):
            x = t(x0, requires_grad=True)
            build(x).backward()
            return x.grad.copy()

        g_sum = run(lambda x: ad.add(ad.sum_over(ad.mul(x, x)),
                                     ad.sum_over(ad.sigmoid(x))))
        g_f = run(lambda x: ad.sum_over(ad.mul(x, x)))
        g_g = run(lambda x: ad.sum_over(ad.sigmoid(x)))
        np.testing.assert_allclose(g_sum, g_f + g_g, rtol=1e-12)

    def test_no_grad_skips_tape(self):
        x = t(np.ones((1, 1, 2, 2)), requires_grad=True)
        with ad.no_grad():
            out = ad.relu(x)
        assert out._backward is None and not out.requires_grad
