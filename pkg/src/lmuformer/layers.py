"""Trainable layers: conv1d, batchnorm, linear, and differentiable LIF runs.

Each layer owns autodiff.Tensor parameters and offers two faces: a
differentiable `forward` on (B, T, C) tensors for training, and numpy
forms (`eval_np`, `step`) reused verbatim by the streaming session so the
eval and streaming routes share per-step arithmetic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff, numerics
from .errors import ConfigError
from .spiking import AffineNorm, LIFConfig


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) in the working dtype."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(numerics.default_dtype())


class Conv1d:
    """1D convolution over (time, channels) with explicit lookahead.

    Output position t reads inputs t*stride-(K-1-lookahead) .. t*stride+lookahead
    (zeros outside the sequence), so lookahead bounds the algorithmic delay.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 1, stride: int = 1,
                 lookahead: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        if not 0 <= lookahead <= kernel - 1:
            raise ConfigError(f"lookahead {lookahead} outside [0, {kernel - 1}]")
        if stride < 1:
            raise ConfigError("stride must be >= 1")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.lookahead = kernel, stride, lookahead
        rng = rng or np.random.default_rng(0)
        fan_in = kernel * in_ch
        self.w = autodiff.Tensor(uniform_init(rng, (kernel, in_ch, out_ch), fan_in),
                                 requires_grad=True)
        self.b = (autodiff.Tensor(uniform_init(rng, (out_ch,), fan_in), requires_grad=True)
                  if bias else None)

    def forward(self, x: autodiff.Tensor) -> autodiff.Tensor:
        return autodiff.conv1d(x, self.w, self.b, stride=self.stride,
                               lookahead=self.lookahead)

    def eval_np(self, x: np.ndarray) -> np.ndarray:
        bias = None if self.b is None else self.b.data
        return numerics.conv1d(x, self.w.data, bias, stride=self.stride,
                               lookahead=self.lookahead)

    def step(self, window: np.ndarray) -> np.ndarray:
        """Single output from one full window (K, C_in); the streaming form."""
        acc = window[0] @ self.w.data[0]
        for k in range(1, self.kernel):
            acc = acc + window[k] @ self.w.data[k]
        if self.b is not None:
            acc = acc + self.b.data
        return acc

    def eval_np_stepwise(self, x: np.ndarray) -> np.ndarray:
        """Per-position evaluation through step(); arithmetic matches streaming
        bitwise, unlike the batched einsum of eval_np."""
        T = x.shape[0]
        left = self.kernel - 1 - self.lookahead
        xp = np.zeros((left + T + self.lookahead, self.in_ch), dtype=x.dtype)
        xp[left:left + T] = x
        t_out = -(-T // self.stride)
        out = np.empty((t_out, self.out_ch), dtype=x.dtype)
        for t in range(t_out):
            out[t] = self.step(xp[t * self.stride:t * self.stride + self.kernel])
        return out

    def named_params(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out

    def named_buffers(self, prefix: str) -> dict:
        return {}


class BatchNorm:
    """Per-channel batchnorm over (batch, time); exact backward in train mode."""

    def __init__(self, channels: int, eps: float = numerics.BN_EPS, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dt = numerics.default_dtype()
        self.gamma = autodiff.Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = autodiff.Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def forward(self, x: autodiff.Tensor, train: bool) -> autodiff.Tensor:
        if train:
            mu = autodiff.mean(x, axis=(0, 1))
            var = autodiff.mean(autodiff.square(x - mu), axis=(0, 1))
            inv = autodiff.reciprocal(autodiff.sqrt(var + self.eps))
            xhat = (x - mu) * inv
            n = x.shape[0] * x.shape[1]
            unbias = n / max(n - 1, 1)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.data).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data * unbias).astype(self.running_var.dtype)
            return xhat * self.gamma + self.beta
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * inv * self.gamma + self.beta

    def eval_np(self, x: np.ndarray) -> np.ndarray:
        return numerics.batchnorm_apply(x, self.running_mean, self.running_var,
                                        self.gamma.data, self.beta.data, self.eps)

    def affine(self) -> AffineNorm:
        return AffineNorm(mean=self.running_mean, var=self.running_var,
                          gamma=self.gamma.data, beta=self.beta.data)

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def named_buffers(self, prefix: str) -> dict:
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}

    def load_buffers(self, prefix: str, buffers: dict) -> None:
        self.running_mean = buffers[f"{prefix}.running_mean"]
        self.running_var = buffers[f"{prefix}.running_var"]


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.w = autodiff.Tensor(uniform_init(rng, (in_features, out_features), in_features),
                                 requires_grad=True)
        self.b = autodiff.Tensor(uniform_init(rng, (out_features,), in_features),
                                 requires_grad=True)

    def forward(self, x: autodiff.Tensor) -> autodiff.Tensor:
        return autodiff.matmul(x, self.w) + self.b

    def eval_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def named_buffers(self, prefix: str) -> dict:
        return {}


SPIKE_RECORDER: list | None = None


def record_density(spikes: np.ndarray) -> None:
    """Log one population's output density when sparsity measurement is on.

    Every spiking population in the vectorized forward must report here, in
    call order, so the op-count walk can line densities up with layers.
    """
    global SPIKE_RECORDER
    if SPIKE_RECORDER is not None:
        SPIKE_RECORDER.append(float((spikes != 0).mean()))


def lif_run(x: autodiff.Tensor, cfg: LIFConfig, smooth: bool = False) -> autodiff.Tensor:
    """lif_run_tensor with the fused single-node implementation when possible."""
    if cfg.formulation == "tau_form":
        out = autodiff.lif_fused(x, cfg.tau, cfg.v_th, cfg.v_reset,
                                 cfg.surrogate, cfg.surrogate_width, smooth)
    else:
        out = lif_run_tensor(x, cfg, smooth)
    record_density(out.data)
    return out


def lif_run_tensor(x: autodiff.Tensor, cfg: LIFConfig, smooth: bool = False) -> autodiff.Tensor:
    """Differentiable LIF population over x (B, T, ...) -> spike trains.

    Hard 0/1 spikes forward with surrogate backward; smooth=True swaps the
    firing function for its smooth ramp so finite differences apply.
    """
    B, T = x.shape[0], x.shape[1]
    rest = x.shape[2:]
    dt = x.data.dtype
    v = autodiff.Tensor(np.full((B,) + rest, cfg.v_reset, dtype=dt))
    s_prev = autodiff.Tensor(np.zeros((B,) + rest, dtype=dt))
    steps = []
    for t in range(T):
        x_t = autodiff.index_time(x, t)
        if cfg.formulation == "tau_form":
            u_h = v + (x_t - (v - cfg.v_reset)) * (1.0 / cfg.tau)
            s = autodiff.spike(u_h - cfg.v_th, cfg.surrogate, cfg.surrogate_width, smooth)
            v = u_h * (1.0 - s) + cfg.v_reset * s
        else:
            v = v * cfg.lam + x_t - s_prev * cfg.v_th
            s = autodiff.spike(v - cfg.v_th, cfg.surrogate, cfg.surrogate_width, smooth)
            s_prev = s
        steps.append(s)
    return autodiff.stack_time(steps)
