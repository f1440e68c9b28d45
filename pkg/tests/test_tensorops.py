"""Tensor primitives against brute-force oracles."""

import numpy as np
import pytest

from capsroute.errors import ConfigError, DimensionError, DivergenceError
from capsroute.tensorops import (
    ConvSpec,
    check_finite,
    col2im,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    im2col,
    matmul,
)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv2d(x, kernels, stride):
    n, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += x[b, ch, i * stride + a, j * stride + bb] * kernels[o, ch, a, bb]
                    out[b, o, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_row_times_column(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((4, 5))
            b = rng.standard_normal((5, 6))
            c = rng.standard_normal((6, 3))
            np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-9)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.ones((1, 1, 1, 1))
        out = conv2d_forward(x, k, ConvSpec(1, 1, 1, 1, 1))
        np.testing.assert_array_equal(out, x)

    def test_diagonal_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        k = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
        out = conv2d_forward(x, k, ConvSpec(2, 2, 1, 1, 1))
        np.testing.assert_array_equal(out, [[[[5.0]]]])

    def test_matches_loop_oracle_strided(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 10, 10))
        k = rng.standard_normal((4, 3, 3, 3))
        spec = ConvSpec(3, 3, 2, 3, 4, trim=True)
        np.testing.assert_allclose(conv2d_forward(x, k, spec), naive_conv2d(x, k, 2), atol=1e-10)

    def test_matches_loop_oracle_random_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            c = int(rng.integers(1, 4))
            f = int(rng.integers(1, 4))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            h = kh + stride * int(rng.integers(0, 4))
            w = kw + stride * int(rng.integers(0, 4))
            x = rng.standard_normal((int(rng.integers(1, 3)), c, h, w))
            k = rng.standard_normal((f, c, kh, kw))
            out = conv2d_forward(x, k, ConvSpec(kh, kw, stride, c, f))
            np.testing.assert_allclose(out, naive_conv2d(x, k, stride), atol=1e-10)

    def test_non_integral_output_is_config_error(self):
        with pytest.raises(ConfigError):
            ConvSpec(3, 3, 2, 1, 1).out_hw(10, 10)

    def test_trim_floors_partial_windows(self):
        assert ConvSpec(3, 3, 2, 1, 1, trim=True).out_hw(10, 10) == (4, 4)
        assert ConvSpec(9, 9, 2, 1, 1, trim=True).out_hw(20, 20) == (6, 6)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ConfigError):
            ConvSpec(5, 5, 1, 1, 1).out_hw(3, 3)

    def test_col2im_scatter_adds_every_entry(self):
        rng = np.random.default_rng(4)
        spec = ConvSpec(2, 2, 1, 1, 1)
        x = rng.standard_normal((1, 1, 4, 4))
        cols, _, _ = im2col(x, spec)
        back = col2im(np.ones_like(cols), x.shape, spec)
        assert back.sum() == cols.size
        # interior pixels are covered by all four 2x2 windows
        assert back[0, 0, 1, 1] == 4.0


class TestGradCheck:
    def test_quadratic_is_exact(self):
        def f(x):
            return float(np.sum(x**2)), 2.0 * x

        x = np.array([1.0, 2.0])
        assert grad_check(f, x, eps=1e-5) < 1e-8

    def test_reports_corrupted_gradient(self):
        def f(x):
            return float(np.sum(x**2)), 2.5 * x  # wrong scale

        assert grad_check(f, np.array([1.0, 2.0]), eps=1e-5) > 0.1

    def test_nonfinite_objective_raises(self):
        def f(x):
            return float("nan"), x

        with pytest.raises(DivergenceError):
            grad_check(f, np.array([1.0]), eps=1e-5)


def test_check_finite():
    check_finite(np.ones(3), "ok")
    with pytest.raises(DivergenceError):
        check_finite(np.array([1.0, np.nan]), "bad")
