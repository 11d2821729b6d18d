"""Equivariance/invariance properties and oracles for the temporal primitives."""

import time

import numpy as np
import pytest

from tempsr import autodiff as ad
from tempsr import temporal_ops as tops
from tempsr.autodiff import ShapeError, Tensor


def permute_stack(x: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return x[:, perm]


def attention_oracle(x, wq, wk, wv, scale_on="temporal"):
    """Per-pixel dense oracle: explicit Q, K, V and softmax for every pixel."""
    b, t, f, h, w = x.shape
    f_out = wv.shape[1]
    divisor = np.sqrt(t) if scale_on == "temporal" else np.sqrt(wq.shape[1])
    out = np.zeros((b, t, f_out, h, w), dtype=np.float64)
    for bi in range(b):
        for y in range(h):
            for xx in range(w):
                X = x[bi, :, :, y, xx].astype(np.float64)
                q, k, v = X @ wq, X @ wk, X @ wv
                scores = q @ k.T / divisor
                e = np.exp(scores - scores.max(axis=-1, keepdims=True))
                a = e / e.sum(axis=-1, keepdims=True)
                out[bi, :, :, y, xx] = a @ v
    return out


class TestTemporalSelfAttention:
    def test_single_frame_is_value_projection(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 4, 3, 3))
        wq, wk, wv = (rng.normal(size=(4, 4)) for _ in range(3))
        out = tops.temporal_self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv))
        expected = np.einsum("btfhw,fg->btghw", x, wv)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10)

    def test_zero_input_gives_zero_output(self):
        rng = np.random.default_rng(1)
        x = np.zeros((1, 3, 4, 2, 2))
        wq, wk, wv = (rng.normal(size=(4, 4)) for _ in range(3))
        out = tops.temporal_self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv))
        np.testing.assert_array_equal(out.data, np.zeros_like(x))

    def test_matches_per_pixel_dense_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 4, 2, 2))
        wq, wk, wv = (rng.normal(size=(4, 4)) for _ in range(3))
        out = tops.temporal_self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv))
        np.testing.assert_allclose(out.data, attention_oracle(x, wq, wk, wv), rtol=1e-5, atol=1e-8)

    def test_feature_scaling_mode(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 4, 5, 2, 2))
        wq, wk, wv = (rng.normal(size=(5, 3)) for _ in range(3))
        out = tops.temporal_self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv), scale_on="feature")
        np.testing.assert_allclose(out.data, attention_oracle(x, wq, wk, wv, "feature"), rtol=1e-5, atol=1e-8)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 5, 4, 3, 3))
        wq, wk, wv = (rng.normal(size=(4, 4)) for _ in range(3))
        base = tops.temporal_self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv)).data
        perm = rng.permutation(5)
        permuted = tops.temporal_self_attention(Tensor(permute_stack(x, perm)), Tensor(wq), Tensor(wk), Tensor(wv)).data
        np.testing.assert_allclose(permuted, permute_stack(base, perm), atol=1e-6)

    def test_feature_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 2, 2)))
        with pytest.raises(ShapeError, match="F=4"):
            tops.temporal_self_attention(x, Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))))

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(scale=10.0, size=(1, 6, 4, 2, 2))
        wq, wk = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        a = tops.attention_weights(x, wq, wk)
        np.testing.assert_allclose(a.sum(axis=-1), np.ones(a.shape[:-1]), atol=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(1, 3, 3, 2, 2)), requires_grad=True)
        wq = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        wk = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        wv = Tensor(rng.normal(size=(3, 3)), requires_grad=True)

        def f(x, wq, wk, wv):
            y = tops.temporal_self_attention(x, wq, wk, wv)
            return ad.mean_over_axes(ad.mul(y, y), axes=tuple(range(5)))

        assert ad.check_gradients(f, [x, wq, wk, wv]).passed

    def test_quadratic_runtime_scaling(self):
        # sanity benchmark; generous bound so scheduler noise cannot flake it
        rng = np.random.default_rng(7)
        f = 2
        wq, wk, wv = (Tensor(rng.normal(size=(f, f)).astype(np.float32)) for _ in range(3))

        def run(t):
            x = Tensor(rng.normal(size=(1, t, f, 8, 8)).astype(np.float32))
            times = []
            for _ in range(9):
                t0 = time.perf_counter()
                tops.temporal_self_attention(x, wq, wk, wv)
                times.append(time.perf_counter() - t0)
            return min(times)

        run(32)  # warm caches
        ratio = run(96) / max(run(32), 1e-9)
        assert ratio < 18.0, f"tripling T scaled runtime by {ratio:.1f}x, expected quadratic (~9x)"


class TestSharedConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 2, 4, 4))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0, 0, 0] = 1.0
        w[1, 1, 0, 0] = 1.0
        out = tops.shared_conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, x, rtol=1e-12)

    def test_equals_loop_over_slices(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 4, 3, 5, 5))
        w = rng.normal(size=(6, 3, 3, 3))
        bias = rng.normal(size=6)
        out = tops.shared_conv2d(Tensor(x), Tensor(w), Tensor(bias))
        for t in range(4):
            per_slice = ad.conv2d(Tensor(x[:, t]), Tensor(w), Tensor(bias))
            np.testing.assert_allclose(out.data[:, t], per_slice.data, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 6, 3, 4, 4))
        w = rng.normal(size=(3, 3, 3, 3))
        bias = rng.normal(size=3)
        base = tops.shared_conv2d(Tensor(x), Tensor(w), Tensor(bias)).data
        perm = rng.permutation(6)
        permuted = tops.shared_conv2d(Tensor(permute_stack(x, perm)), Tensor(w), Tensor(bias)).data
        np.testing.assert_allclose(permuted, permute_stack(base, perm), atol=1e-6)


class TestTemporalMean:
    def test_single_frame_identity(self):
        rng = np.random.default_rng(20)
        x = rng.normal(size=(2, 1, 3, 4, 4))
        out = tops.temporal_mean(Tensor(x))
        np.testing.assert_array_equal(out.data, x[:, 0])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(2, 7, 3, 4, 4)).astype(np.float32)
        base = tops.temporal_mean(Tensor(x)).data
        for _ in range(5):
            perm = rng.permutation(7)
            out = tops.temporal_mean(Tensor(permute_stack(x, perm))).data
            np.testing.assert_allclose(out, base, atol=1e-6)

    def test_scalar_stack(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1, 1)
        out = tops.temporal_mean(Tensor(x))
        assert out.data.reshape(()) == 2.0


class TestPixelShuffle:
    def test_r1_identity(self):
        rng = np.random.default_rng(30)
        x = rng.normal(size=(2, 3, 4, 4))
        out = tops.pixel_shuffle(Tensor(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_stated_convention(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(1, 9, 1, 1)
        out = tops.pixel_shuffle(Tensor(x), 3)
        np.testing.assert_array_equal(out.data[0, 0], [[1, 2, 3], [4, 5, 6], [7, 8, 9]])

    def test_round_trip(self):
        rng = np.random.default_rng(31)
        x = rng.normal(size=(2, 3, 6, 10))
        back = tops.pixel_shuffle(tops.pixel_unshuffle(Tensor(x), 2), 2)
        np.testing.assert_array_equal(back.data, x)
        y = rng.normal(size=(2, 8, 3, 5))
        fwd = tops.pixel_unshuffle(tops.pixel_shuffle(Tensor(y), 2), 2)
        np.testing.assert_array_equal(fwd.data, y)

    def test_divisibility_error(self):
        with pytest.raises(ShapeError, match="divisible"):
            tops.pixel_shuffle(Tensor(np.zeros((1, 7, 2, 2))), 2)

    def test_gradients(self):
        rng = np.random.default_rng(32)
        x = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)

        def f(x):
            y = tops.pixel_shuffle(x, 2)
            return ad.mean_over_axes(ad.mul(y, y), axes=(0, 1, 2, 3))

        assert ad.check_gradients(f, [x]).passed


class TestBilinearUpsample:
    def test_constant_preserved(self):
        x = np.full((1, 1, 3, 3), 4.25)
        out = tops.bilinear_upsample(Tensor(x), 3)
        np.testing.assert_allclose(out.data, np.full((1, 1, 9, 9), 4.25), rtol=1e-12)

    def test_r1_identity(self):
        rng = np.random.default_rng(40)
        x = rng.normal(size=(2, 2, 5, 5))
        out = tops.bilinear_upsample(Tensor(x), 1)
        np.testing.assert_allclose(out.data, x, rtol=1e-12)

    def test_ramp_corners_and_interior(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        out = tops.bilinear_upsample(Tensor(x), 3).data[0, 0]
        assert out[0, 0] == 0.0
        assert out[5, 5] == 3.0
        # independent two-pass 1-D oracle: interpolate rows, then columns
        pos = np.arange(6) / 5.0
        rows = np.stack([np.interp(pos, [0, 1], x[0, 0, i]) for i in range(2)])
        expected = np.stack([np.interp(pos, [0, 1], rows[:, j]) for j in range(6)], axis=1)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_single_pixel_input(self):
        x = np.array([[7.0]]).reshape(1, 1, 1, 1)
        out = tops.bilinear_upsample(Tensor(x), 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 7.0))

    def test_gradients(self):
        rng = np.random.default_rng(41)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)

        def f(x):
            y = tops.bilinear_upsample(x, 2)
            return ad.mean_over_axes(ad.mul(y, y), axes=(0, 1, 2, 3))

        assert ad.check_gradients(f, [x]).passed


class TestDynamicConv:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(50)
        x = rng.normal(size=(2, 3, 4, 5, 5))
        ker = np.zeros((2, 3, 3, 3))
        ker[:, :, 1, 1] = 1.0
        out = tops.dynamic_conv2d(Tensor(x), Tensor(ker))
        np.testing.assert_allclose(out.data, x, rtol=1e-12)

    def test_matches_per_slice_conv(self):
        rng = np.random.default_rng(51)
        x = rng.normal(size=(1, 2, 3, 4, 4))
        ker = rng.normal(size=(1, 2, 3, 3))
        out = tops.dynamic_conv2d(Tensor(x), Tensor(ker))
        for t in range(2):
            w = np.zeros((3, 3, 3, 3))
            for f in range(3):
                w[f, f] = ker[0, t]
            per = ad.conv2d(Tensor(x[:, t]), Tensor(w), Tensor(np.zeros(3)))
            np.testing.assert_allclose(out.data[:, t], per.data, atol=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(52)
        x = Tensor(rng.normal(size=(1, 2, 2, 3, 3)), requires_grad=True)
        ker = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)

        def f(x, ker):
            y = tops.dynamic_conv2d(x, ker)
            return ad.mean_over_axes(ad.mul(y, y), axes=tuple(range(5)))

        assert ad.check_gradients(f, [x, ker]).passed


EQUIVARIANT_OPS = {
    "attention": lambda x, rng: tops.temporal_self_attention(
        x, *(Tensor(rng.normal(size=(x.shape[2], x.shape[2]))) for _ in range(3))
    ),
    "shared_conv": lambda x, rng: tops.shared_conv2d(
        x, Tensor(rng.normal(size=(x.shape[2], x.shape[2], 3, 3))), Tensor(rng.normal(size=x.shape[2]))
    ),
}


@pytest.mark.parametrize("op_name", sorted(EQUIVARIANT_OPS))
def test_equivariance_suite(op_name):
    """f(P∘x) == P∘f(x) over 20 random permutations x 10 random inputs."""
    rng = np.random.default_rng(99)
    op = EQUIVARIANT_OPS[op_name]
    for _ in range(10):
        x = rng.normal(size=(1, 6, 3, 4, 4)).astype(np.float32)
        op_rng = np.random.default_rng(7)
        base = op(Tensor(x), op_rng).data
        for _ in range(20):
            perm = rng.permutation(6)
            op_rng = np.random.default_rng(7)
            out = op(Tensor(permute_stack(x, perm)), op_rng).data
            np.testing.assert_allclose(out, permute_stack(base, perm), rtol=1e-5, atol=1e-5)


def test_invariance_suite_temporal_mean():
    rng = np.random.default_rng(98)
    for _ in range(10):
        x = rng.normal(size=(1, 6, 3, 4, 4)).astype(np.float32)
        base = tops.temporal_mean(Tensor(x)).data
        for _ in range(20):
            perm = rng.permutation(6)
            out = tops.temporal_mean(Tensor(permute_stack(x, perm))).data
            np.testing.assert_allclose(out, base, rtol=1e-5, atol=1e-5)
