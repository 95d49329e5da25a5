"""Leaky integrate-and-fire dynamics and the spiking LMU cell.

Two LIF formulations are provided. The tau form integrates a current U into
a membrane potential, fires on threshold, and hard-resets:

    U_H[t] = U_V[t-1] + (U[t] - (U_V[t-1] - v_reset)) / tau
    S[t]   = 1 if U_H[t] >= v_th else 0
    U_V[t] = U_H[t] * (1 - S[t]) + v_reset * S[t]

The lambda form leaks by a factor in [0, 1] and soft-resets by subtracting
v_th times the neuron's own previous spike:

    u[t] = lam * u[t-1] + x[t] - v_th * S[t-1],   S[t] = 1 if u[t] >= v_th.

Both fire at equality (>= v_th). The spiking LMU cell chains pointwise
conv -> batchnorm -> LIF populations around the LTI memory update; its
per-step form is the streaming/eval reference, evaluated with identical
arithmetic by the stream session so the two routes agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .errors import ConfigError, ContractError
from .lmu import LMUMatrices

SURROGATES = ("triangle", "arctan")


@dataclass(frozen=True)
class LIFConfig:
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    lam: float = 0.5
    formulation: str = "tau_form"
    surrogate: str = "triangle"
    surrogate_width: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda leak must lie in [0, 1]")
        if self.surrogate_width <= 0:
            raise ConfigError("surrogate width must be positive")
        if self.formulation not in ("tau_form", "lambda_form"):
            raise ConfigError(f"unknown LIF formulation {self.formulation!r}")
        if self.surrogate not in SURROGATES:
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")


@dataclass
class LIFState:
    u_v: np.ndarray
    last_spike: np.ndarray

    @classmethod
    def zeros(cls, shape, cfg: LIFConfig) -> "LIFState":
        dt = numerics.default_dtype()
        return cls(np.full(shape, cfg.v_reset, dtype=dt), np.zeros(shape, dtype=dt))


def assert_binary(x: np.ndarray, what: str = "spike tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.size and not np.all((x == 0) | (x == 1)):
        raise ContractError(f"{what} must be binary 0/1")
    return x


def lif_step_tau(state: LIFState, u: np.ndarray, cfg: LIFConfig) -> tuple[np.ndarray, LIFState]:
    u = np.asarray(u, dtype=state.u_v.dtype)
    u_h = state.u_v + (u - (state.u_v - cfg.v_reset)) / cfg.tau
    s = (u_h >= cfg.v_th).astype(u_h.dtype)
    u_v = u_h * (1.0 - s) + cfg.v_reset * s
    return s, LIFState(u_v, s)


def lif_step_lambda(state: LIFState, x: np.ndarray, cfg: LIFConfig) -> tuple[np.ndarray, LIFState]:
    x = np.asarray(x, dtype=state.u_v.dtype)
    u = cfg.lam * state.u_v + x - cfg.v_th * state.last_spike
    s = (u >= cfg.v_th).astype(u.dtype)
    return s, LIFState(u, s)


def lif_step(state: LIFState, x: np.ndarray, cfg: LIFConfig) -> tuple[np.ndarray, LIFState]:
    step = lif_step_tau if cfg.formulation == "tau_form" else lif_step_lambda
    return step(state, x, cfg)


def lif_sequence(x: np.ndarray, cfg: LIFConfig,
                 state: LIFState | None = None) -> tuple[np.ndarray, LIFState]:
    """Run one LIF population over x (T, ...); returns (spikes, final state)."""
    x = np.asarray(x, dtype=numerics.default_dtype())
    if state is None:
        state = LIFState.zeros(x.shape[1:], cfg)
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        out[t], state = lif_step(state, x[t], cfg)
    return out, state


def surrogate_grad(x: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    """Backward-pass stand-in for dS/d(U_H - v_th); integrates to 1 over x."""
    x = np.asarray(x)
    w = cfg.surrogate_width
    if cfg.surrogate == "triangle":
        return np.maximum(0.0, 1.0 - np.abs(x) / w) / w
    return w / (1.0 + (np.pi * w * x) ** 2)


@dataclass(frozen=True)
class AffineNorm:
    """Eval-mode batchnorm: a frozen per-channel affine transform."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return numerics.batchnorm_apply(x, self.mean, self.var, self.gamma, self.beta)

    @classmethod
    def identity(cls, channels: int) -> "AffineNorm":
        dt = numerics.default_dtype()
        z = np.zeros(channels, dtype=dt)
        o = np.ones(channels, dtype=dt)
        return cls(mean=z, var=o, gamma=o, beta=z.copy())


@dataclass
class SpikingLMUCellWeights:
    """Pointwise projections of the merged cell.

    w_in:  (C_in, C)        spike conv driving the input LIF population
    w_out: (C*d + C_in, C_out)  readout conv over concat(M_S, X_S)
    """

    w_in: np.ndarray
    b_in: np.ndarray
    bn_in: AffineNorm
    w_out: np.ndarray
    b_out: np.ndarray
    bn_out: AffineNorm

    @property
    def channels(self) -> int:
        return self.w_in.shape[1]

    def check(self, order: int) -> None:
        c_in, c = self.w_in.shape
        if self.w_out.shape[0] != c * order + c_in:
            raise ConfigError("readout width must be channels*order + input channels")


@dataclass
class SpikingLMUCellState:
    lif_in: LIFState
    m: np.ndarray            # (C, d) real-valued memory M[t]
    lif_mem: LIFState        # its last_spike is M_S[t-1]
    lif_out: LIFState

    @classmethod
    def zeros(cls, channels: int, order: int, out_channels: int,
              cfg: LIFConfig) -> "SpikingLMUCellState":
        return cls(
            lif_in=LIFState.zeros((channels,), cfg),
            m=np.zeros((channels, order), dtype=numerics.default_dtype()),
            lif_mem=LIFState.zeros((channels, order), cfg),
            lif_out=LIFState.zeros((out_channels,), cfg),
        )


def spiking_lmu_cell_step(x_s: np.ndarray, state: SpikingLMUCellState,
                          weights: SpikingLMUCellWeights, mats: LMUMatrices,
                          cfg: LIFConfig, memory_spike_feedback: bool = True,
                          ) -> tuple[np.ndarray, SpikingLMUCellState]:
    """One time step of the merged spiking cell.

    memory_spike_feedback=True runs the published recurrence on the spiked
    memory M_S[t-1]; False recurs on the real-valued M[t-1] (LTI mode), with
    spiking applied only at the readout.
    """
    x_s = assert_binary(np.asarray(x_s, dtype=numerics.default_dtype()), "cell input")
    a_bar, b_bar = mats.cast()

    u = weights.bn_in.apply(x_s @ weights.w_in + weights.b_in)
    u_s, lif_in = lif_step_tau(state.lif_in, u, cfg)

    carrier = state.lif_mem.last_spike if memory_spike_feedback else state.m
    m = carrier @ a_bar.T + u_s[:, None] * b_bar
    m_s, lif_mem = lif_step_tau(state.lif_mem, m, cfg)

    feat = np.concatenate([m_s.reshape(-1), x_s])
    v = weights.bn_out.apply(feat @ weights.w_out + weights.b_out)
    o, lif_out = lif_step_tau(state.lif_out, v, cfg)
    return o, SpikingLMUCellState(lif_in=lif_in, m=m, lif_mem=lif_mem, lif_out=lif_out)


def spiking_lmu_cell_sequence(x_s: np.ndarray, weights: SpikingLMUCellWeights,
                              mats: LMUMatrices, cfg: LIFConfig,
                              memory_spike_feedback: bool = True,
                              state: SpikingLMUCellState | None = None,
                              ) -> tuple[np.ndarray, SpikingLMUCellState]:
    """Run the cell over x_s (T, C_in) by composing single steps."""
    x_s = np.asarray(x_s, dtype=numerics.default_dtype())
    weights.check(mats.order)
    if state is None:
        state = SpikingLMUCellState.zeros(weights.channels, mats.order,
                                          weights.w_out.shape[1], cfg)
    out = np.empty((x_s.shape[0], weights.w_out.shape[1]), dtype=x_s.dtype)
    for t in range(x_s.shape[0]):
        out[t], state = spiking_lmu_cell_step(x_s[t], state, weights, mats, cfg,
                                              memory_spike_feedback)
    return out, state


def direct_encode(x: np.ndarray, w: np.ndarray, bias: np.ndarray, bn: AffineNorm,
                  cfg: LIFConfig, stride: int = 1, lookahead: int = 0) -> np.ndarray:
    """Real input (T, C) -> binary (T', C'): conv1d -> batchnorm -> LIF."""
    y = bn.apply(numerics.conv1d(x, w, bias, stride=stride, lookahead=lookahead))
    spikes, _ = lif_sequence(y, cfg)
    return spikes
