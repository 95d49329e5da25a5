"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` records the closure that propagates its adjoint to its
parents; ``backward()`` topologically sorts the recorded graph and runs the
closures once each, accumulating gradients additively. Ops only record when
gradients are globally enabled (see :func:`no_grad`) and some input requires
them, so eval-mode forwards carry no tape.

The spiking firing function is the one op whose backward is not the true
derivative: the forward emits hard 0/1 spikes while the backward substitutes
a surrogate density (straight-through). A smoothed mode replaces the hard
step by the surrogate's antiderivative so the whole network becomes
differentiable and finite-difference checkable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from . import numerics
from .errors import ConfigError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None):
        self.data = np.asarray(data, dtype=numerics.default_dtype()) \
            if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Backpropagate from this (scalar) tensor through the recorded tape."""
        if self.data.size != 1:
            raise ConfigError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:  # iterative DFS: graphs have O(T) depth
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=numerics.default_dtype()))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward):
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if rg:
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _backward=backward)
    return Tensor(data)


# -- arithmetic --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        bval = np.asarray(b, dtype=a.data.dtype)

        def backward_const(g):
            a.accumulate(_unbroadcast(g * bval, a.shape))

        return _make(a.data * bval, (a,), backward_const)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def reciprocal(a):
    a = as_tensor(a)
    out_data = 1.0 / a.data

    def backward(g):
        a.accumulate(_unbroadcast(-g * out_data * out_data, a.shape))

    return _make(out_data, (a,), backward)


def square(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(_unbroadcast(2.0 * g * a.data, a.shape))

    return _make(a.data * a.data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a.accumulate(_unbroadcast(g * (0.5 / out_data), a.shape))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate(_unbroadcast(g * out_data, a.shape))

    return _make(out_data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = numerics.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.shape

    def backward(g):
        a.accumulate(g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        a.accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate(gp)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def index_time(a, t):
    """Select time step t from (B, T, ...) keeping the rest of the shape."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, t] = g
        a.accumulate(full)

    return _make(a.data[:, t], (a,), backward)


def stack_time(steps):
    """Stack per-step (B, ...) tensors into (B, T, ...)."""
    steps = [as_tensor(s) for s in steps]

    def backward(g):
        for t, s in enumerate(steps):
            if s.requires_grad:
                s.accumulate(g[:, t])

    return _make(np.stack([s.data for s in steps], axis=1), steps, backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out_data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g / n, a.shape).copy())

    return _make(out_data, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


# -- activations --------------------------------------------------------------

def relu(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), backward)


def gelu(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * numerics.activation_grad(a.data, "gelu"))

    return _make(numerics.activation(a.data, "gelu"), (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = numerics.activation(a.data, "sigmoid")

    def backward(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def activate(a, kind: str):
    if kind == "identity":
        return as_tensor(a)
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigError(f"unknown activation kind {kind!r}")


# -- spiking firing function ---------------------------------------------------

def surrogate_grad(x: np.ndarray, kind: str, width: float) -> np.ndarray:
    """Surrogate spike derivative, used only in backward passes.

    triangle: max(0, 1-|x|/w)/w; arctan: w/(1+(pi*w*x)^2). Both integrate to 1,
    so their antiderivatives ramp 0 -> 1 like a smoothed firing function.
    """
    if width <= 0:
        raise ConfigError("surrogate width must be positive")
    if kind == "triangle":
        return np.maximum(0.0, 1.0 - np.abs(x) / width) / width
    if kind == "arctan":
        z = math.pi * width * x
        return width / (1.0 + z * z)
    raise ConfigError(f"unknown surrogate kind {kind!r}")


def smoothed_fire(x: np.ndarray, kind: str, width: float) -> np.ndarray:
    """Antiderivative of the surrogate: a smooth 0 -> 1 firing ramp."""
    if kind == "triangle":
        w = width
        y = np.where(x <= 0,
                     np.square(np.maximum(x + w, 0.0)) / (2 * w * w),
                     1.0 - np.square(np.maximum(w - x, 0.0)) / (2 * w * w))
        return y.astype(x.dtype, copy=False)
    if kind == "arctan":
        return (np.arctan(math.pi * width * x) / math.pi + 0.5).astype(x.dtype, copy=False)
    raise ConfigError(f"unknown surrogate kind {kind!r}")


def spike(a, kind: str = "triangle", width: float = 1.0, smooth: bool = False):
    """Firing function on (membrane - threshold): hard 0/1 forward, surrogate
    backward. With smooth=True the forward is the surrogate's antiderivative
    (then forward and backward are mutually consistent)."""
    a = as_tensor(a)
    if smooth:
        out_data = smoothed_fire(a.data, kind, width)
    else:
        out_data = (a.data >= 0).astype(a.data.dtype)

    def backward(g):
        a.accumulate(g * surrogate_grad(a.data, kind, width))

    return _make(out_data, (a,), backward)


# -- structured ops ------------------------------------------------------------

def conv1d(x, w, bias=None, stride: int = 1, lookahead: int = 0):
    """Batched 1D convolution: x (B, T, Cin), w (K, Cin, Cout) -> (B, T', Cout).

    Same alignment contract as numerics.conv1d.
    """
    x, w = as_tensor(x), as_tensor(w)
    K, cin, cout = w.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise ConfigError(f"conv1d input {x.shape} incompatible with kernel {w.shape}")
    if not 0 <= lookahead <= K - 1:
        raise ConfigError(f"lookahead {lookahead} outside [0, {K - 1}]")
    if K == 1 and stride == 1:
        return _conv1d_pointwise(x, w, bias)
    B, T, _ = x.shape
    left = K - 1 - lookahead
    xp = np.zeros((B, left + T + lookahead, cin), dtype=x.data.dtype)
    xp[:, left:left + T] = x.data
    t_out = -(-T // stride)
    idx = np.arange(t_out) * stride  # window start positions within xp
    windows = np.stack([xp[:, idx + k] for k in range(K)], axis=2)  # (B, T', K, Cin)
    out_data = np.einsum("btkc,kcd->btd", windows, w.data, optimize=True)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data
        parents.append(bias)

    def backward(g):
        if w.requires_grad:
            w.accumulate(np.einsum("btkc,btd->kcd", windows, g, optimize=True))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, idx + k] += g @ w.data[k].T
            x.accumulate(gxp[:, left:left + T])

    return _make(out_data, parents, backward)


def _conv1d_pointwise(x, w, bias):
    """K=1 stride=1 conv as a time-batched matmul; avoids the im2col copy."""
    out_data = x.data @ w.data[0]
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data
        parents.append(bias)

    def backward(g):
        if w.requires_grad:
            w.accumulate(np.tensordot(x.data, g, axes=([0, 1], [0, 1]))[None])
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            x.accumulate(g @ w.data[0].T)

    return _make(out_data, parents, backward)


def lif_fused(x, tau: float, v_th: float, v_reset: float, kind: str = "triangle",
              width: float = 1.0, smooth: bool = False):
    """Whole LIF run (tau form) over x (B, T, ...) as one graph node.

    Forward is the sequential membrane recurrence; backward is handwritten
    backprop-through-time over the stored pre-reset potentials, equivalent to
    composing the per-step ops but without per-step graph overhead.
    """
    x = as_tensor(x)
    d = x.data
    T = d.shape[1]
    inv_tau = 1.0 / tau
    u_h = np.empty_like(d)
    s = np.empty_like(d)
    v = np.full(d.shape[:1] + d.shape[2:], v_reset, dtype=d.dtype)
    for t in range(T):
        uh_t = v + (d[:, t] - (v - v_reset)) * inv_tau
        if smooth:
            s_t = smoothed_fire(uh_t - v_th, kind, width)
        else:
            s_t = (uh_t >= v_th).astype(d.dtype)
        u_h[:, t] = uh_t
        s[:, t] = s_t
        v = uh_t * (1.0 - s_t) + v_reset * s_t

    def backward(g):
        gx = np.empty_like(d)
        gv = np.zeros(d.shape[:1] + d.shape[2:], dtype=d.dtype)
        for t in reversed(range(T)):
            uh_t = u_h[:, t]
            # v_t = u_h*(1-s) + v_reset*s; s = F(u_h - v_th)
            gs_total = g[:, t] + gv * (v_reset - uh_t)
            gu = gv * (1.0 - s[:, t]) + gs_total * surrogate_grad(uh_t - v_th, kind, width)
            gx[:, t] = gu * inv_tau
            gv = gu * (1.0 - inv_tau)
        x.accumulate(gx)

    return _make(s, (x,), backward)


def fft_causal_scan(u, kernel: np.ndarray):
    """Memory trajectories of an LTI recurrence evaluated as an FFT convolution.

    u: (B, T, H) drive signals; kernel: (L, d) impulse response (a frozen
    constant, not differentiated). Returns (B, T, H, d). The adjoint in u is
    the time-reversed (transposed) convolution, also via FFT.
    """
    u = as_tensor(u)
    kernel = np.asarray(kernel, dtype=u.data.dtype)
    B, T, H = u.shape
    n = numerics.next_pow2(T + kernel.shape[0] - 1)
    Hf = np.fft.rfft(kernel, n=n, axis=0)  # (F, d)
    U = np.fft.rfft(u.data, n=n, axis=1)   # (B, F, H)
    out_data = np.fft.irfft(U[..., None] * Hf[None, :, None, :], n=n, axis=1)[:, :T]
    out_data = out_data.astype(u.data.dtype, copy=False)

    def backward(g):
        G = np.fft.rfft(g, n=n, axis=1)  # (B, F, H, d)
        gu = np.fft.irfft(np.einsum("bfhd,fd->bfh", G, np.conj(Hf)), n=n, axis=1)[:, :T]
        u.accumulate(gu.real.astype(u.data.dtype, copy=False))

    return _make(out_data, (u,), backward)


def softmax_cross_entropy(logits, labels: np.ndarray):
    """Mean cross-entropy of integer labels; returns (scalar loss, probs)."""
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    B = logits.shape[0]
    nll = -(z[np.arange(B), labels] - np.log(ez.sum(axis=1)))
    loss_data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(B), labels] -= 1.0
        logits.accumulate(g * gl / B)

    return _make(loss_data, (logits,), backward), probs


def gelu_erf(x: np.ndarray) -> np.ndarray:  # convenience re-export for oracles
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))
