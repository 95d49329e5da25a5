"""Architectural blocks: patch embedding, channel mixer, LMU block.

Every block exposes `forward` (differentiable, batched over (B, T, C)) and
`eval_stepwise` (numpy, one sequence, per-step reductions). The stepwise
route shares its per-step arithmetic with the streaming session, which is
what makes streaming/batch equivalence bitwise for spiking eval; reductions
batched over time (einsum, BLAS) are not bit-reproducible across shapes, so
the vectorized forward is held to float tolerance instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff, numerics, spiking
from .errors import ConfigError
from .layers import BatchNorm, Conv1d, Linear, lif_run, record_density, uniform_init
from .lmu import LMUConfig, LMUMatrices, build_matrices, lmu_scan_tensor, lmu_step, LMUState, PLMUWeights, plmu_forward
from .spiking import LIFConfig, SpikingLMUCellWeights


@dataclass(frozen=True)
class PatchEmbedLayerSpec:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    lookahead: int = 2

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("kernel and stride must be >= 1")
        if not 0 <= self.lookahead <= self.kernel - 1:
            raise ConfigError("lookahead outside kernel support")


@dataclass(frozen=True)
class PatchEmbedConfig:
    layers: tuple
    spiking: bool = False

    def __post_init__(self):
        layers = tuple(PatchEmbedLayerSpec(**l) if isinstance(l, dict) else l
                       for l in self.layers)
        object.__setattr__(self, "layers", layers)
        for a, b in zip(layers, layers[1:]):
            if a.out_ch != b.in_ch:
                raise ConfigError("patch embed channel chain mismatch")


def patch_embed_delay(cfg: PatchEmbedConfig) -> int:
    """1-based index of the first input sample that completes output 1.

    Each layer adds lookahead samples of waiting, magnified by all upstream
    strides (one late sample at depth i costs prod(strides above) raw samples).
    """
    delay, upstream = 1, 1
    for layer in cfg.layers:
        delay += layer.lookahead * upstream
        upstream *= layer.stride
    return delay


class PatchEmbed:
    """Stacked conv1d -> batchnorm -> activation; spiking uses LIF activations,
    making the first layer a direct spike encoder for real-valued input."""

    def __init__(self, cfg: PatchEmbedConfig, lif: LIFConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.lif = lif
        self.convs = [Conv1d(l.in_ch, l.out_ch, l.kernel, l.stride, l.lookahead, rng=rng)
                      for l in cfg.layers]
        self.bns = [BatchNorm(l.out_ch) for l in cfg.layers]

    @property
    def out_channels(self) -> int:
        return self.cfg.layers[-1].out_ch

    @property
    def delay(self) -> int:
        return patch_embed_delay(self.cfg)

    def forward(self, x: autodiff.Tensor, train: bool, smooth: bool = False) -> autodiff.Tensor:
        for conv, bn in zip(self.convs, self.bns):
            x = bn.forward(conv.forward(x), train)
            x = lif_run(x, self.lif, smooth) if self.cfg.spiking else autodiff.gelu(x)
        return x

    def eval_stepwise(self, x: np.ndarray) -> np.ndarray:
        for conv, bn in zip(self.convs, self.bns):
            x = bn.eval_np(conv.eval_np_stepwise(x))
            if self.cfg.spiking:
                x, _ = spiking.lif_sequence(x, self.lif)
            else:
                x = numerics.activation(x, "gelu")
        return x

    def named_params(self, prefix: str) -> dict:
        out = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out.update(conv.named_params(f"{prefix}.{i}.conv"))
            out.update(bn.named_params(f"{prefix}.{i}.bn"))
        return out

    def named_buffers(self, prefix: str) -> dict:
        out = {}
        for i, bn in enumerate(self.bns):
            out.update(bn.named_buffers(f"{prefix}.{i}.bn"))
        return out

    def load_buffers(self, prefix: str, buffers: dict) -> None:
        for i, bn in enumerate(self.bns):
            bn.load_buffers(f"{prefix}.{i}.bn", buffers)


@dataclass(frozen=True)
class ChannelMixerConfig:
    channels: int
    ratio: int = 2
    spiking: bool = False

    def __post_init__(self):
        if self.ratio < 1:
            raise ConfigError("mixer expansion ratio must be >= 1")


class ChannelMixer:
    """Time-local two-conv mixer: x + Conv2(act2(BN2(Conv1(act1(BN1(x)))))).

    Activations are GELU/ReLU, or LIF populations in the spiking variant;
    the residual always adds the floating-point block input.
    """

    def __init__(self, cfg: ChannelMixerConfig, lif: LIFConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.lif = lif
        hidden = cfg.channels * cfg.ratio
        self.bn1 = BatchNorm(cfg.channels)
        self.conv1 = Conv1d(cfg.channels, hidden, kernel=1, rng=rng)
        self.bn2 = BatchNorm(hidden)
        self.conv2 = Conv1d(hidden, cfg.channels, kernel=1, rng=rng)

    def forward(self, x: autodiff.Tensor, train: bool, smooth: bool = False) -> autodiff.Tensor:
        h = self.bn1.forward(x, train)
        h = lif_run(h, self.lif, smooth) if self.cfg.spiking else autodiff.gelu(h)
        h = self.conv1.forward(h)
        h = self.bn2.forward(h, train)
        h = lif_run(h, self.lif, smooth) if self.cfg.spiking else autodiff.relu(h)
        return self.conv2.forward(h) + x

    def eval_stepwise(self, x: np.ndarray) -> np.ndarray:
        h = self.bn1.eval_np(x)
        if self.cfg.spiking:
            h, _ = spiking.lif_sequence(h, self.lif)
        else:
            h = numerics.activation(h, "gelu")
        h = self.conv1.eval_np_stepwise(h)
        h = self.bn2.eval_np(h)
        if self.cfg.spiking:
            h, _ = spiking.lif_sequence(h, self.lif)
        else:
            h = numerics.activation(h, "relu")
        return self.conv2.eval_np_stepwise(h) + x

    def named_params(self, prefix: str) -> dict:
        out = {}
        out.update(self.bn1.named_params(f"{prefix}.bn1"))
        out.update(self.conv1.named_params(f"{prefix}.conv1"))
        out.update(self.bn2.named_params(f"{prefix}.bn2"))
        out.update(self.conv2.named_params(f"{prefix}.conv2"))
        return out

    def named_buffers(self, prefix: str) -> dict:
        out = {}
        out.update(self.bn1.named_buffers(f"{prefix}.bn1"))
        out.update(self.bn2.named_buffers(f"{prefix}.bn2"))
        return out

    def load_buffers(self, prefix: str, buffers: dict) -> None:
        self.bn1.load_buffers(f"{prefix}.bn1", buffers)
        self.bn2.load_buffers(f"{prefix}.bn2", buffers)


@dataclass(frozen=True)
class LMUBlockConfig:
    channels: int
    order: int
    theta: float
    variant: str = "block"
    spiking: bool = False
    discretization: str = "zoh"
    parallel_train: bool = True
    memory_spike_feedback: bool = True  # spiking only; False = LTI memory mode
    in_channels: int | None = None      # naive cells may take a narrower input

    def __post_init__(self):
        if self.variant not in ("naive", "block"):
            raise ConfigError(f"unknown block variant {self.variant!r}")
        if self.variant == "block" and self.in_channels not in (None, self.channels):
            raise ConfigError("residual block requires in_channels == channels")
        LMUConfig(self.order, self.theta, self.discretization)  # validates

    @property
    def cell_in(self) -> int:
        return self.channels if self.in_channels is None else self.in_channels


class PLMUCell:
    """Parallelizable LMU: per-head drive u = act_u(x W_u + b_u), frozen LTI
    memory scan, readout o = act_o(m W_m + x W_x + b_o). One head per channel.
    """

    def __init__(self, cfg: LMUBlockConfig, rng: np.random.Generator,
                 act_u: str = "identity", act_o: str = "gelu"):
        C, d, cin = cfg.channels, cfg.order, cfg.cell_in
        self.cfg = cfg
        self.act_u, self.act_o = act_u, act_o
        self.mats = build_matrices(LMUConfig(d, cfg.theta, cfg.discretization))
        self.w_u = autodiff.Tensor(uniform_init(rng, (cin, C), cin), requires_grad=True)
        self.b_u = autodiff.Tensor(uniform_init(rng, (C,), cin), requires_grad=True)
        self.w_m = autodiff.Tensor(uniform_init(rng, (C * d, C), C * d), requires_grad=True)
        self.w_x = autodiff.Tensor(uniform_init(rng, (cin, C), cin), requires_grad=True)
        self.b_o = autodiff.Tensor(uniform_init(rng, (C,), cin), requires_grad=True)

    def forward(self, x: autodiff.Tensor, train: bool, smooth: bool = False) -> autodiff.Tensor:
        B, T = x.shape[0], x.shape[1]
        C, d = self.cfg.channels, self.cfg.order
        u = autodiff.activate(autodiff.matmul(x, self.w_u) + self.b_u, self.act_u)
        m = lmu_scan_tensor(u, self.mats, parallel=self.cfg.parallel_train)
        mf = autodiff.reshape(m, (B, T, C * d))
        o = autodiff.matmul(mf, self.w_m) + autodiff.matmul(x, self.w_x) + self.b_o
        return autodiff.activate(o, self.act_o)

    def export_weights(self) -> PLMUWeights:
        return PLMUWeights(W_u=self.w_u.data.T, b_u=self.b_u.data,
                           W_m=self.w_m.data.T, W_x=self.w_x.data.T,
                           b_o=self.b_o.data, act_u=self.act_u, act_o=self.act_o)

    def eval_stepwise(self, x: np.ndarray) -> np.ndarray:
        return plmu_forward(x, self.export_weights(), self.mats, parallel=False)

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.w_u": self.w_u, f"{prefix}.b_u": self.b_u,
                f"{prefix}.w_m": self.w_m, f"{prefix}.w_x": self.w_x,
                f"{prefix}.b_o": self.b_o}

    def named_buffers(self, prefix: str) -> dict:
        return {}

    def load_buffers(self, prefix: str, buffers: dict) -> None:
        pass


class SpikingLMUCell:
    """Merged spiking cell: U = BN(conv(X_S)); U_S = LIF(U);
    M[t] = A_bar M_S[t-1] + B_bar U_S[t]; M_S = LIF(M);
    O = LIF(BN(conv(concat(M_S, X_S)))).

    memory_spike_feedback=False replaces the spiked-memory recurrence by the
    LTI recurrence on M (spiking kept at the readout), which is what makes
    the scan FFT-parallelizable during training.
    """

    def __init__(self, cfg: LMUBlockConfig, lif: LIFConfig, rng: np.random.Generator):
        C, d, cin = cfg.channels, cfg.order, cfg.cell_in
        self.cfg = cfg
        self.lif = lif
        self.mats = build_matrices(LMUConfig(d, cfg.theta, cfg.discretization))
        self.conv_in = Conv1d(cin, C, kernel=1, rng=rng)
        self.bn_in = BatchNorm(C)
        self.conv_out = Conv1d(C * d + cin, C, kernel=1, rng=rng)
        self.bn_out = BatchNorm(C)

    def forward(self, x: autodiff.Tensor, train: bool, smooth: bool = False) -> autodiff.Tensor:
        B, T = x.shape[0], x.shape[1]
        C, d = self.cfg.channels, self.cfg.order
        u = self.bn_in.forward(self.conv_in.forward(x), train)
        u_s = lif_run(u, self.lif, smooth)
        if self.cfg.memory_spike_feedback:
            m_s_seq = self._spiked_memory(u_s, smooth)
        else:
            m = lmu_scan_tensor(u_s, self.mats, parallel=self.cfg.parallel_train)
            m_s_seq = lif_run(m, self.lif, smooth)
        feat = autodiff.concat([autodiff.reshape(m_s_seq, (B, T, C * d)), x], axis=2)
        v = self.bn_out.forward(self.conv_out.forward(feat), train)
        return lif_run(v, self.lif, smooth)

    def _spiked_memory(self, u_s: autodiff.Tensor,
                       smooth: bool = False) -> autodiff.Tensor:
        """Published recurrence M[t] = A_bar M_S[t-1] + B_bar U_S[t], unrolled
        per step because the spiked feedback makes it non-LTI."""
        B, T, C = u_s.shape
        a_bar, b_bar = self.mats.cast()
        lif = self.lif
        a_t = autodiff.Tensor(a_bar.T)
        m_s = autodiff.Tensor(np.zeros((B, C, self.cfg.order), dtype=a_bar.dtype))
        v = autodiff.Tensor(np.full((B, C, self.cfg.order), lif.v_reset, dtype=a_bar.dtype))
        steps = []
        for t in range(T):
            u_t = autodiff.reshape(autodiff.index_time(u_s, t), (B, C, 1))
            m = autodiff.matmul(m_s, a_t) + u_t * b_bar
            u_h = v + (m - (v - lif.v_reset)) * (1.0 / lif.tau)
            s = autodiff.spike(u_h - lif.v_th, lif.surrogate, lif.surrogate_width, smooth)
            v = u_h * (1.0 - s) + lif.v_reset * s
            m_s = s
            steps.append(s)
        out = autodiff.stack_time(steps)
        record_density(out.data)  # this population bypasses lif_run
        return out

    def export_weights(self) -> SpikingLMUCellWeights:
        return SpikingLMUCellWeights(
            w_in=self.conv_in.w.data[0], b_in=self.conv_in.b.data,
            bn_in=self.bn_in.affine(),
            w_out=self.conv_out.w.data[0], b_out=self.conv_out.b.data,
            bn_out=self.bn_out.affine())

    def eval_stepwise(self, x: np.ndarray) -> np.ndarray:
        out, _ = spiking.spiking_lmu_cell_sequence(
            x, self.export_weights(), self.mats, self.lif,
            memory_spike_feedback=self.cfg.memory_spike_feedback)
        return out

    def named_params(self, prefix: str) -> dict:
        out = {}
        out.update(self.conv_in.named_params(f"{prefix}.conv_in"))
        out.update(self.bn_in.named_params(f"{prefix}.bn_in"))
        out.update(self.conv_out.named_params(f"{prefix}.conv_out"))
        out.update(self.bn_out.named_params(f"{prefix}.bn_out"))
        return out

    def named_buffers(self, prefix: str) -> dict:
        out = {}
        out.update(self.bn_in.named_buffers(f"{prefix}.bn_in"))
        out.update(self.bn_out.named_buffers(f"{prefix}.bn_out"))
        return out

    def load_buffers(self, prefix: str, buffers: dict) -> None:
        self.bn_in.load_buffers(f"{prefix}.bn_in", buffers)
        self.bn_out.load_buffers(f"{prefix}.bn_out", buffers)


class LMUBlock:
    """naive: the cell alone. block: BN -> activation -> cell -> conv(K=1) ->
    BN, plus a residual from the block input to the floating-point BN output.
    """

    def __init__(self, cfg: LMUBlockConfig, lif: LIFConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.lif = lif
        C = cfg.channels
        if cfg.spiking:
            self.cell = SpikingLMUCell(cfg, lif, rng)
        else:
            self.cell = PLMUCell(cfg, rng)
        if cfg.variant == "block":
            self.bn_pre = BatchNorm(C)
            self.conv_post = Conv1d(C, C, kernel=1, rng=rng)
            self.bn_post = BatchNorm(C)

    def forward(self, x: autodiff.Tensor, train: bool, smooth: bool = False) -> autodiff.Tensor:
        if self.cfg.variant == "naive":
            return self.cell.forward(x, train, smooth)
        h = self.bn_pre.forward(x, train)
        h = lif_run(h, self.lif, smooth) if self.cfg.spiking else autodiff.gelu(h)
        h = self.cell.forward(h, train, smooth)
        h = self.bn_post.forward(self.conv_post.forward(h), train)
        return h + x

    def eval_stepwise(self, x: np.ndarray) -> np.ndarray:
        if self.cfg.variant == "naive":
            return self.cell.eval_stepwise(x)
        h = self.bn_pre.eval_np(x)
        if self.cfg.spiking:
            h, _ = spiking.lif_sequence(h, self.lif)
        else:
            h = numerics.activation(h, "gelu")
        h = self.cell.eval_stepwise(h)
        h = self.bn_post.eval_np(self.conv_post.eval_np_stepwise(h))
        return h + x

    def named_params(self, prefix: str) -> dict:
        out = {}
        if self.cfg.variant == "block":
            out.update(self.bn_pre.named_params(f"{prefix}.bn_pre"))
        out.update(self.cell.named_params(f"{prefix}.cell"))
        if self.cfg.variant == "block":
            out.update(self.conv_post.named_params(f"{prefix}.conv_post"))
            out.update(self.bn_post.named_params(f"{prefix}.bn_post"))
        return out

    def named_buffers(self, prefix: str) -> dict:
        out = {}
        if self.cfg.variant == "block":
            out.update(self.bn_pre.named_buffers(f"{prefix}.bn_pre"))
        out.update(self.cell.named_buffers(f"{prefix}.cell"))
        if self.cfg.variant == "block":
            out.update(self.bn_post.named_buffers(f"{prefix}.bn_post"))
        return out

    def load_buffers(self, prefix: str, buffers: dict) -> None:
        if self.cfg.variant == "block":
            self.bn_pre.load_buffers(f"{prefix}.bn_pre", buffers)
            self.bn_post.load_buffers(f"{prefix}.bn_post", buffers)
        self.cell.load_buffers(f"{prefix}.cell", buffers)
