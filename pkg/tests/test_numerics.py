"""Kernel-level checks: matmul, conv1d, FFT convolution, expm, batchnorm, activations."""

import math

import numpy as np
import pytest

from lmuformer import ConfigError, NumericError, RngSpec
from lmuformer.numerics import (
    BN_EPS,
    activation,
    batchnorm_apply,
    batchnorm_stats,
    check_finite,
    conv1d,
    expm,
    fft_linear_conv,
    matmul,
)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = np.eye(2)
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, b), b)


def test_matmul_projector():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    v = np.array([[5.0], [7.0]])
    assert np.array_equal(matmul(p, v), np.array([[5.0], [0.0]]))


def test_matmul_triple_loop_oracle():
    """Random 3x4 @ 4x2 against a scalar triple loop."""
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(a, b) - want)) <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ConfigError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


# ---------------------------------------------------------------------------
# conv1d


def conv1d_direct(x, w, bias, stride=1, lookahead=0):
    """O(T*K) reference: out[t] = sum_j w[j] . x[t + j - (K-1-lookahead)]."""
    T, cin = x.shape
    K, _, cout = w.shape
    shift = K - 1 - lookahead
    t_out = -(-T // stride)
    out = np.zeros((t_out, cout))
    for o in range(t_out):
        t = o * stride
        for j in range(K):
            src = t + j - shift
            if 0 <= src < T:
                out[o] += x[src] @ w[j]
    return out + bias


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 3))
    w = np.eye(3)[None, :, :]  # K=1 channel identity
    y = conv1d(x, w, np.zeros(3))
    assert np.allclose(y, x, atol=1e-12)


def test_conv1d_impulse_alignment():
    # K=3, lookahead=2: out[t] pulls from [t, t+1, t+2]
    x = np.zeros((6, 1))
    x[0, 0] = 1.0
    w = np.array([2.0, 3.0, 5.0]).reshape(3, 1, 1)
    y = conv1d(x, w, np.zeros(1), lookahead=2)
    assert np.allclose(y[:, 0], [2.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    # and the full direct-sum oracle over every t / alignment choice
    rng = np.random.default_rng(1)
    xr = rng.normal(size=(11, 2))
    wr = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=4)
    for la in range(3):
        got = conv1d(xr, wr, b, lookahead=la)
        want = conv1d_direct(xr, wr, b, lookahead=la)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_conv1d_stride_shape():
    x = np.zeros((8, 1))
    w = np.zeros((3, 1, 2))
    y = conv1d(x, w, np.zeros(2), stride=2, lookahead=1)
    assert y.shape == (4, 2)


def test_conv1d_stride_matches_direct():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(13, 2))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    for stride in (2, 3):
        got = conv1d(x, w, b, stride=stride, lookahead=2)
        want = conv1d_direct(x, w, b, stride=stride, lookahead=2)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_conv1d_lookahead_out_of_range():
    x = np.zeros((4, 1))
    w = np.zeros((3, 1, 1))
    with pytest.raises(ConfigError):
        conv1d(x, w, np.zeros(1), lookahead=3)
    with pytest.raises(ConfigError):
        conv1d(x, w, np.zeros(1), lookahead=-1)


def test_conv1d_linearity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(16, 3))
    y = rng.normal(size=(16, 3))
    w = rng.normal(size=(3, 3, 2))
    zero = np.zeros(2)
    a, b = 1.7, -0.4
    lhs = conv1d(a * x + b * y, w, zero, lookahead=1)
    rhs = a * conv1d(x, w, zero, lookahead=1) + b * conv1d(y, w, zero, lookahead=1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


# ---------------------------------------------------------------------------
# fft_linear_conv


def test_fft_conv_delta_kernel():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(20, 3))
    h = np.zeros((5, 3))
    h[0] = 1.0
    assert np.allclose(fft_linear_conv(h, u), u, atol=1e-12)


def test_fft_conv_shift_kernel():
    rng = np.random.default_rng(5)
    u = rng.normal(size=(12, 2))
    h = np.zeros((4, 2))
    h[1] = 1.0
    y = fft_linear_conv(h, u)
    assert np.allclose(y[0], 0.0, atol=1e-12)
    assert np.allclose(y[1:], u[:-1], atol=1e-12)


def fft_conv_direct(h, u):
    L, d = h.shape
    T = u.shape[0]
    y = np.zeros((T, d))
    for t in range(T):
        for j in range(min(t, L - 1) + 1):
            y[t] += h[j] * u[t - j]
    return y


def test_fft_conv_direct_oracle():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(7, 3))
    u = rng.normal(size=(33, 3))
    got = fft_linear_conv(h, u)
    want = fft_conv_direct(h, u)
    rel = np.max(np.abs(got - want)) / np.max(np.abs(want))
    assert rel <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_fft_conv_property_random_sizes(seed):
    """Random T<=256, L<=64 agree with direct convolution to 1e-8 relative."""
    rng = np.random.default_rng(100 + seed)
    T = int(rng.integers(2, 257))
    L = int(rng.integers(1, 65))
    d = int(rng.integers(1, 5))
    h = rng.normal(size=(L, d))
    u = rng.normal(size=(T, d))
    got = fft_linear_conv(h, u)
    want = fft_conv_direct(h, u)
    rel = np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-30)
    assert rel <= 1e-8


# ---------------------------------------------------------------------------
# expm


def test_expm_zero_matrix():
    assert np.allclose(expm(np.zeros((3, 3))), np.eye(3), atol=1e-15)


def test_expm_diagonal():
    m = np.diag([0.5, -1.25])
    want = np.diag([math.exp(0.5), math.exp(-1.25)])
    assert np.allclose(expm(m), want, rtol=1e-12)


def test_expm_taylor_oracle():
    rng = np.random.default_rng(8)
    m = rng.normal(size=(4, 4))
    m *= 0.9 / np.linalg.norm(m, 2)
    want = np.zeros((4, 4))
    term = np.eye(4)
    for k in range(31):
        want = want + term
        term = term @ m / (k + 1)
    got = expm(m)
    rel = np.max(np.abs(got - want)) / np.max(np.abs(want))
    assert rel <= 1e-9


def test_expm_inverse_property():
    rng = np.random.default_rng(9)
    for _ in range(5):
        m = rng.normal(size=(5, 5))
        m *= 2.0 / np.linalg.norm(m, 2)
        prod = expm(m) @ expm(-m)
        assert np.max(np.abs(prod - np.eye(5))) <= 1e-8


def test_expm_nonfinite_rejected():
    m = np.zeros((2, 2))
    m[0, 1] = np.nan
    with pytest.raises(NumericError):
        expm(m)


# ---------------------------------------------------------------------------
# batchnorm


def test_batchnorm_eval_identity():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 8, 3))
    y = batchnorm_apply(x, np.zeros(3), np.ones(3), np.ones(3), np.zeros(3))
    # eps skews the unit-variance case by ~5e-6 relative; that is the formula
    assert np.allclose(y, x, atol=2e-5)
    assert np.allclose(y, x / math.sqrt(1.0 + BN_EPS), atol=1e-12)


def test_batchnorm_constant_input_train():
    x = np.full((3, 5, 2), 1.234)
    mean, var = batchnorm_stats(x, axes=(0, 1))
    beta = np.array([0.25, -1.5])
    y = batchnorm_apply(x, mean, var, np.ones(2), beta)
    assert np.allclose(y, np.broadcast_to(beta, x.shape), atol=1e-12)


def test_batchnorm_train_moment_oracle():
    # data std ~10 so the eps/var bias stays far below the 1e-6 budget
    rng = np.random.default_rng(11)
    x = 10.0 * rng.normal(size=(16, 32, 4))
    gamma = np.array([1.0, 0.5, 2.0, 1.5])
    beta = np.array([0.0, 1.0, -2.0, 0.25])
    mean, var = batchnorm_stats(x, axes=(0, 1))
    y = batchnorm_apply(x, mean, var, gamma, beta)
    assert np.max(np.abs(y.mean(axis=(0, 1)) - beta)) <= 1e-6
    assert np.max(np.abs(y.var(axis=(0, 1)) - gamma**2)) <= 1e-6


def test_batchnorm_zero_size_reduction():
    with pytest.raises(ConfigError):
        batchnorm_stats(np.zeros((0, 4, 2)), axes=(0, 1))


def test_batchnorm_eval_is_exact_affine():
    """Pin the formula with stored stats, not scale-invariance."""
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 3))
    mean = rng.normal(size=3)
    var = rng.uniform(0.5, 2.0, size=3)
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    for scale in (1.0, 3.0):
        got = batchnorm_apply(scale * x, mean, var, gamma, beta)
        want = gamma * (scale * x - mean) / np.sqrt(var + BN_EPS) + beta
        assert np.max(np.abs(got - want)) <= 1e-12


# ---------------------------------------------------------------------------
# activations


def test_relu_points():
    assert activation(np.array(-1.0), "relu") == 0.0
    assert activation(np.array(2.0), "relu") == 2.0


def test_gelu_zero():
    assert activation(np.array(0.0), "gelu") == 0.0


def test_gelu_erf_oracle():
    # exact-erf form, checked against the stdlib erf
    for v in (1.0, -0.5, 2.3):
        want = 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))
        assert abs(float(activation(np.array(v), "gelu")) - want) <= 1e-10


def test_sigmoid_and_identity():
    x = np.array([-1.0, 0.0, 3.0])
    assert np.allclose(activation(x, "sigmoid"), 1.0 / (1.0 + np.exp(-x)), atol=1e-12)
    assert np.array_equal(activation(x, "identity"), x)


def test_unknown_activation():
    with pytest.raises(ConfigError):
        activation(np.zeros(3), "swish")


# ---------------------------------------------------------------------------
# rng + finiteness contract


def test_rngspec_determinism():
    a = RngSpec(42).generator().normal(size=100)
    b = RngSpec(42).generator().normal(size=100)
    assert np.array_equal(a, b)
    c = RngSpec(43).generator().normal(size=100)
    assert not np.array_equal(a, c)


def test_check_finite_rejects_nan_inf():
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]), "x")
    with pytest.raises(NumericError):
        check_finite(np.array([np.inf]), "x")
