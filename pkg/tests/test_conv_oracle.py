"""Convolution and transposed convolution against the brute-force oracles."""

import numpy as np
import pytest

import oracles
from rrunet3d.engine import conv_kernels as ck
from rrunet3d.engine import ops
from rrunet3d.engine.tensor import ShapeError, Tensor


def t(arr, dtype=np.float32):
    return Tensor(np.asarray(arr, dtype=dtype))


class TestConv3dExamples:
    def test_all_ones_valid(self):
        x = np.ones((1, 1, 3, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 3, 3, 3), dtype=np.float32)
        spec = ops.ConvSpec(1, 1, (3, 3, 3), padding="valid", has_bias=False)
        out = ops.conv3d(t(x), t(w), None, spec)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == pytest.approx(27.0)

    def test_dirac_kernel_is_identity(self, rng):
        x = rng.standard_normal((1, 1, 4, 5, 6)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1, 1] = 1.0
        spec = ops.ConvSpec(1, 1, (3, 3, 3), has_bias=False)
        np.testing.assert_allclose(ops.conv3d(t(x), t(w), None, spec).data, x, atol=1e-6)

    def test_random_same_stride1_vs_oracle(self, rng):
        x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
        spec = ops.ConvSpec(2, 3, (3, 3, 3), has_bias=False)
        got = ops.conv3d(t(x), t(w), None, spec).data
        ref = oracles.conv3d_bruteforce(x, w)
        np.testing.assert_allclose(got, ref, atol=1e-5)

    def test_channel_mismatch(self, rng):
        spec = ops.ConvSpec(3, 2, (3, 3, 3))
        with pytest.raises(ShapeError):
            ops.conv3d(t(rng.standard_normal((1, 2, 4, 4, 4))),
                       t(rng.standard_normal((2, 3, 3, 3, 3))), None, spec)

    def test_non_finite_input(self):
        x = np.full((1, 1, 3, 3, 3), np.nan, dtype=np.float32)
        w = np.ones((1, 1, 3, 3, 3), dtype=np.float32)
        spec = ops.ConvSpec(1, 1, (3, 3, 3), has_bias=False)
        from rrunet3d.engine.tensor import NonFiniteError
        with pytest.raises(NonFiniteError):
            ops.conv3d(t(x), t(w), None, spec)


class TestConvTransposeExamples:
    def test_single_voxel_broadcast(self):
        x = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        w = np.ones((1, 1, 2, 2, 2), dtype=np.float32)
        spec = ops.ConvSpec(1, 1, (2, 2, 2), (2, 2, 2), has_bias=False)
        out = ops.conv_transpose3d(t(x), t(w), None, spec)
        assert out.shape == (1, 1, 2, 2, 2)
        np.testing.assert_allclose(out.data, 1.0)

    def test_zero_input(self, rng):
        x = np.zeros((1, 2, 2, 2, 2), dtype=np.float32)
        w = rng.standard_normal((2, 1, 2, 2, 2)).astype(np.float32)
        spec = ops.ConvSpec(1, 2, (2, 2, 2), (2, 2, 2), has_bias=False)
        np.testing.assert_array_equal(ops.conv_transpose3d(t(x), t(w), None, spec).data, 0.0)

    def test_random_vs_scatter_oracle(self, rng):
        x = rng.standard_normal((1, 2, 3, 3, 3)).astype(np.float32)
        w = rng.standard_normal((2, 3, 2, 2, 2)).astype(np.float32)
        spec = ops.ConvSpec(3, 2, (2, 2, 2), (2, 2, 2), has_bias=False)
        got = ops.conv_transpose3d(t(x), t(w), None, spec).data
        ref = oracles.conv_transpose3d_scatter(x, w, stride=(2, 2, 2))
        np.testing.assert_allclose(got, ref, atol=1e-5)

    def test_inconsistent_valid_geometry_rejected(self, rng):
        # valid padding with span 3 > stride 1 can never land back on n = m.
        spec = ops.ConvSpec(1, 1, (3, 3, 3), (1, 1, 1), padding="valid", has_bias=False)
        with pytest.raises(ShapeError):
            ops.conv_transpose3d(t(rng.standard_normal((1, 1, 3, 3, 3))),
                                 t(rng.standard_normal((1, 1, 3, 3, 3))), None, spec)


def _random_case(rng, padding, stride, dilation):
    n = int(rng.integers(1, 3))
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    span = dilation * (k - 1) + 1
    lo = span if padding == "valid" else 1
    sp = tuple(int(rng.integers(lo, lo + 4)) for _ in range(3))
    x = rng.standard_normal((n, c_in) + sp).astype(np.float32)
    w = (rng.standard_normal((c_out, c_in, k, k, k)) * 0.5).astype(np.float32)
    b = (rng.standard_normal(c_out) * 0.1).astype(np.float32)
    return x, w, b, k


class TestRandomizedAgainstOracle:
    @pytest.mark.parametrize("backend", ["direct", "im2col"])
    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2])
    def test_conv3d_grid(self, rng, backend, padding, stride, dilation):
        ck.set_conv_backend(backend)
        try:
            for _ in range(3):
                x, w, b, k = _random_case(rng, padding, stride, dilation)
                spec = ops.ConvSpec(x.shape[1], w.shape[0], (k, k, k),
                                    (stride,) * 3, (dilation,) * 3, padding)
                got = ops.conv3d(t(x), t(w), t(b.reshape(1, -1, 1, 1, 1)), spec).data
                ref = oracles.conv3d_bruteforce(x, w, b, (stride,) * 3,
                                                (dilation,) * 3, padding)
                np.testing.assert_allclose(got, ref, atol=1e-5)
        finally:
            ck.set_conv_backend("direct")

    @pytest.mark.parametrize("padding,stride,dilation", [
        ("same", 1, 1), ("same", 2, 1), ("same", 1, 2), ("same", 2, 2),
        ("valid", 2, 1),
    ])
    def test_conv_transpose_grid(self, rng, padding, stride, dilation):
        for _ in range(3):
            c_in = int(rng.integers(1, 4))
            c_out = int(rng.integers(1, 4))
            if padding == "valid":
                k, dil = 2, 1  # span must stay <= stride for valid adjoints
            else:
                k, dil = int(rng.integers(1, 4)), dilation
            sp = tuple(int(rng.integers(1, 4)) for _ in range(3))
            x = rng.standard_normal((1, c_out) + sp).astype(np.float32)
            w = (rng.standard_normal((c_out, c_in, k, k, k)) * 0.5).astype(np.float32)
            spec = ops.ConvSpec(c_in, c_out, (k, k, k), (stride,) * 3, (dil,) * 3, padding, False)
            got = ops.conv_transpose3d(t(x), t(w), None, spec).data
            ref = oracles.conv_transpose3d_scatter(x, w, None, (stride,) * 3,
                                                   (dil,) * 3, padding)
            np.testing.assert_allclose(got, ref, atol=1e-5)


class TestShapeLaw:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2])
    @pytest.mark.parametrize("extent", [4, 5, 6, 7])
    @pytest.mark.parametrize("kernel", [1, 2, 3])
    def test_same_padding_output_extent(self, stride, dilation, extent, kernel):
        out = ck.conv_output_extent(extent, kernel, stride, dilation, "same")
        assert out == -(-extent // stride)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2])
    def test_valid_output_extent(self, stride, dilation):
        extent, kernel = 9, 3
        out = ck.conv_output_extent(extent, kernel, stride, dilation, "valid")
        assert out == (extent - dilation * (kernel - 1) - 1) // stride + 1


class TestAdjointness:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2])
    @pytest.mark.parametrize("kernel", [2, 3])
    def test_inner_product_identity(self, rng, stride, dilation, kernel):
        c_in, c_out, m = 2, 3, 2
        n_sp = m * stride
        x = rng.standard_normal((1, c_in, n_sp, n_sp, n_sp))
        w = rng.standard_normal((c_out, c_in, kernel, kernel, kernel))
        y = rng.standard_normal((1, c_out, m, m, m))
        spec = ops.ConvSpec(c_in, c_out, (kernel,) * 3, (stride,) * 3,
                            (dilation,) * 3, "same", False)
        fx = ops.conv3d(t(x, np.float64), t(w, np.float64), None, spec).data
        bty = ops.conv_transpose3d(t(y, np.float64), t(w, np.float64), None, spec).data
        lhs = float((fx * y).sum())
        rhs = float((x * bty).sum())
        assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1e-8)


class TestBackendsAgree:
    def test_direct_vs_im2col(self, rng):
        for _ in range(8):
            padding = str(rng.choice(["same", "valid"]))
            stride = int(rng.integers(1, 3))
            dilation = int(rng.integers(1, 3))
            x, w, b, k = _random_case(rng, padding, stride, dilation)
            spec = ops.ConvSpec(x.shape[1], w.shape[0], (k, k, k),
                                (stride,) * 3, (dilation,) * 3, padding)
            bt = t(b.reshape(1, -1, 1, 1, 1))
            ck.set_conv_backend("direct")
            a = ops.conv3d(t(x), t(w), bt, spec).data
            ck.set_conv_backend("im2col")
            c = ops.conv3d(t(x), t(w), bt, spec).data
            ck.set_conv_backend("direct")
            np.testing.assert_allclose(a, c, atol=1e-5)
