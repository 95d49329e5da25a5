"""Dense numeric kernels shared by every other module.

All kernels are pure functions over numpy arrays. Arrays follow the
(batch, time, channel) axis convention where applicable. Two precisions are
supported globally: float32 (default, used for training/inference) and
float64 (used by verification builds and most oracle tests); switch with
:func:`set_default_dtype` or the :func:`precision` context manager.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm as _scipy_expm
from scipy.special import erf as _erf

from .errors import ConfigError, NumericError

_DEFAULT_DTYPE = np.float32

ACTIVATIONS = ("gelu", "relu", "sigmoid", "identity")

BN_EPS = 1e-5


def set_default_dtype(dtype) -> None:
    """Set the global working precision (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the global working precision."""
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(saved)


def as_array(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or _DEFAULT_DTYPE)


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


@dataclass(frozen=True)
class RngSpec:
    """Seeded counter-based RNG stream (Philox): same seed, same bits, any platform."""

    seed: int
    algorithm: str = "philox"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "philox":
            raise ConfigError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.Philox(self.seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain matrix product with an explicit inner-extent check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ConfigError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def conv1d(x: np.ndarray, w: np.ndarray, bias=None, stride: int = 1,
           lookahead: int = 0) -> np.ndarray:
    """1D convolution over (T, Cin) input with kernel (K, Cin, Cout).

    Alignment: output position t consumes inputs [t-(K-1-lookahead), t+lookahead],
    zero-padded outside [0, T). With stride s, output t' reads around input s*t'
    and T' = ceil(T/s). lookahead=0 is strictly causal; lookahead=K-1 is
    anti-causal; the centered kernel is lookahead=(K-1)//2.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    K, cin, cout = w.shape
    if x.ndim != 2 or x.shape[1] != cin:
        raise ConfigError(f"conv1d input {x.shape} incompatible with kernel {w.shape}")
    if not 0 <= lookahead <= K - 1:
        raise ConfigError(f"lookahead {lookahead} outside [0, {K - 1}]")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    T = x.shape[0]
    # pad so every tap is in range, then gather strided windows
    left = K - 1 - lookahead
    xp = np.zeros((left + T + lookahead, cin), dtype=x.dtype)
    xp[left:left + T] = x
    t_out = -(-T // stride)  # ceil
    idx = np.arange(t_out)[:, None] * stride + np.arange(K)[None, :]
    windows = xp[idx]  # (T', K, Cin)
    y = np.einsum("tkc,kcd->td", windows, w, optimize=True)
    if bias is not None:
        y = y + np.asarray(bias)
    return y.astype(x.dtype, copy=False)


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1)).bit_length()


def fft_linear_conv(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-channel causal linear convolution y[t] = sum_j h[j] * u[t-j] via FFT.

    h is (L, d), u is (T, d); both are zero-padded to the next power of two
    >= T+L-1 so the circular convolution equals the linear one, and the
    result is truncated back to T.
    """
    h = np.asarray(h)
    u = np.asarray(u)
    if h.ndim != u.ndim or h.shape[1:] != u.shape[1:]:
        raise ConfigError(f"fft_linear_conv channel mismatch: {h.shape} vs {u.shape}")
    T, L = u.shape[0], h.shape[0]
    n = next_pow2(T + L - 1)
    y = np.fft.irfft(np.fft.rfft(u, n=n, axis=0) * np.fft.rfft(h, n=n, axis=0),
                     n=n, axis=0)[:T]
    return y.astype(u.dtype, copy=False)


def fft_outer_conv(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Causal convolution of every channel of u (..., T, H) with every kernel
    column of h (L, d), giving (..., T, H, d). Used by the parallel LMU scan,
    where one shared (L, d) impulse response drives H independent memories.
    """
    h = np.asarray(h)
    u = np.asarray(u)
    T, L = u.shape[-2], h.shape[0]
    n = next_pow2(T + L - 1)
    U = np.fft.rfft(u, n=n, axis=-2)            # (..., F, H)
    Hf = np.fft.rfft(h, n=n, axis=0)            # (F, d)
    prod = U[..., None] * Hf[:, None, :]        # (..., F, H, d)
    y = np.fft.irfft(prod, n=n, axis=-3)[..., :T, :, :]
    return y.astype(u.dtype, copy=False)


def correlate_causal(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of fft_linear_conv in its u argument: y[t] = sum_j h[j] * g[t+j]."""
    h = np.asarray(h)
    g = np.asarray(g)
    T, L = g.shape[0], h.shape[0]
    n = next_pow2(T + L - 1)
    y = np.fft.irfft(np.conj(np.fft.rfft(h, n=n, axis=0)) * np.fft.rfft(g, n=n, axis=0),
                     n=n, axis=0)[:T]
    return y.real.astype(g.dtype, copy=False)


def expm(m: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling-and-squaring Pade)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"expm expects a square matrix, got {m.shape}")
    check_finite(m, "expm input")
    out = _scipy_expm(m)
    return check_finite(out, "expm output")


def batchnorm_stats(x: np.ndarray, axes) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/variance reducing over `axes` (biased variance)."""
    if any(x.shape[a] == 0 for a in axes):
        raise ConfigError("batchnorm over a zero-size reduction")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    return mean, var


def batchnorm_apply(x: np.ndarray, mean, var, gamma, beta,
                    eps: float = BN_EPS) -> np.ndarray:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, broadcasting over channels."""
    inv = gamma / np.sqrt(var + eps)
    return (x - mean) * inv + beta


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise activation. GELU uses the exact erf form."""
    if kind == "identity":
        return np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "gelu":
        x = np.asarray(x)
        return (0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))).astype(x.dtype, copy=False)
    raise ConfigError(f"unknown activation kind {kind!r}")


def activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """d activation / dx, elementwise."""
    if kind == "identity":
        return np.ones_like(x)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "sigmoid":
        s = activation(x, "sigmoid")
        return s * (1.0 - s)
    if kind == "gelu":
        x = np.asarray(x)
        cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (cdf + x * pdf).astype(x.dtype, copy=False)
    raise ConfigError(f"unknown activation kind {kind!r}")
