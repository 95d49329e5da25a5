"""Sample-by-sample stateful inference and the prefix-accuracy sweep.

A StreamSession owns per-conv ring buffers (size K, honoring stride phase
and lookahead), LMU memories, and LIF states. Per-step arithmetic reuses
the layers' step functions, so a finished session reproduces the stepwise
eval forward bitwise; the batched eval forward differs only by reduction
order (float tolerance).

A conv with lookahead L cannot emit output t until input t*stride+L has
arrived, which is what delays the first emission. The batch evaluation
implicitly pads every conv layer's own input with L trailing zeros;
`finish()` reproduces that by flushing each layer in order with its own
zero pad (not by feeding zeros through the whole network, whose biased
responses to zero input would differ from per-layer padding).
"""

from __future__ import annotations

import copy
import csv

import numpy as np

from . import numerics
from .errors import ConfigError, ContractError
from .lmu import LMUState, lmu_step
from .model import Model
from .spiking import (LIFState, SpikingLMUCellState, lif_step_tau,
                      spiking_lmu_cell_step)


class _ConvStage:
    """Ring buffer in front of one conv layer; emits on stride boundaries."""

    def __init__(self, conv):
        self.conv = conv
        self.buf = np.zeros((conv.kernel, conv.in_ch), dtype=numerics.default_dtype())
        self.seen = 0
        self.emitted = 0

    def push(self, x: np.ndarray):
        if self.conv.kernel > 1:
            self.buf[:-1] = self.buf[1:]
        self.buf[-1] = x
        i = self.seen
        self.seen += 1
        la, s = self.conv.lookahead, self.conv.stride
        if i >= la and (i - la) % s == 0:
            self.emitted += 1
            return self.conv.step(self.buf)
        return None

    def finish(self) -> list:
        """Outputs still owed for the inputs seen so far, fed from this
        layer's own trailing zero pad (batch semantics: ceil(seen/stride)
        output positions)."""
        target = -(-self.seen // self.conv.stride)
        zero = np.zeros(self.conv.in_ch, dtype=self.buf.dtype)
        out = []
        while self.emitted < target:
            y = self.push(zero)
            if y is not None:
                out.append(y)
        return out


class _EmbedStage:
    def __init__(self, conv, bn, spiking: bool, lif_cfg):
        self.conv = _ConvStage(conv)
        self.bn = bn.affine()
        self.spiking = spiking
        self.lif_cfg = lif_cfg
        self.lif = LIFState.zeros((conv.out_ch,), lif_cfg) if spiking else None

    def _post(self, y: np.ndarray) -> np.ndarray:
        y = self.bn.apply(y)
        if self.spiking:
            s, self.lif = lif_step_tau(self.lif, y, self.lif_cfg)
            return s
        return numerics.activation(y, "gelu")

    def push(self, x):
        y = self.conv.push(x)
        return None if y is None else self._post(y)

    def finish(self) -> list:
        return [self._post(y) for y in self.conv.finish()]


class _BlockStage:
    def __init__(self, block):
        self.block = block
        cfg = block.cfg
        self.spiking = cfg.spiking
        self.lif_cfg = block.lif
        self.cell_w = block.cell.export_weights()
        if self.spiking:
            self.cell_state = SpikingLMUCellState.zeros(
                cfg.channels, cfg.order, cfg.channels, block.lif)
            if cfg.variant == "block":
                self.lif_pre = LIFState.zeros((cfg.cell_in,), block.lif)
        else:
            self.m = LMUState.zeros(cfg.channels, cfg.order)
        self.mats = block.cell.mats
        if cfg.variant == "block":
            self.bn_pre = block.bn_pre.affine()
            self.bn_post = block.bn_post.affine()

    def _cell_step(self, h):
        if self.spiking:
            o, self.cell_state = spiking_lmu_cell_step(
                h, self.cell_state, self.cell_w, self.mats, self.lif_cfg,
                memory_spike_feedback=self.block.cfg.memory_spike_feedback)
            return o
        w = self.cell_w
        u = numerics.activation(h @ w.W_u.T + w.b_u, w.act_u)
        self.m = lmu_step(self.m, u, self.mats)
        o = self.m.m.reshape(-1) @ w.W_m.T + h @ w.W_x.T + w.b_o
        return numerics.activation(o, w.act_o)

    def push(self, x):
        if self.block.cfg.variant == "naive":
            return self._cell_step(x)
        h = self.bn_pre.apply(x)
        if self.spiking:
            h, self.lif_pre = lif_step_tau(self.lif_pre, h, self.lif_cfg)
        else:
            h = numerics.activation(h, "gelu")
        h = self._cell_step(h)
        h = self.bn_post.apply(self.block.conv_post.step(h[None]))
        return h + x

    def finish(self) -> list:
        return []  # time-local apart from the causal memory; no lookahead


class _MixerStage:
    def __init__(self, mixer):
        self.mixer = mixer
        self.spiking = mixer.cfg.spiking
        self.lif_cfg = mixer.lif
        self.bn1 = mixer.bn1.affine()
        self.bn2 = mixer.bn2.affine()
        if self.spiking:
            self.lif1 = LIFState.zeros((mixer.cfg.channels,), mixer.lif)
            self.lif2 = LIFState.zeros((mixer.cfg.channels * mixer.cfg.ratio,),
                                       mixer.lif)

    def push(self, x):
        h = self.bn1.apply(x)
        if self.spiking:
            h, self.lif1 = lif_step_tau(self.lif1, h, self.lif_cfg)
        else:
            h = numerics.activation(h, "gelu")
        h = self.mixer.conv1.step(h[None])
        h = self.bn2.apply(h)
        if self.spiking:
            h, self.lif2 = lif_step_tau(self.lif2, h, self.lif_cfg)
        else:
            h = numerics.activation(h, "relu")
        return self.mixer.conv2.step(h[None]) + x

    def finish(self) -> list:
        return []


class StreamSession:
    def __init__(self, model: Model):
        if model.training:
            raise ContractError("streaming requires an eval-mode model")
        self.model = model
        self.reset()

    def reset(self) -> None:
        model = self.model
        self.stages = []
        if model.embed is not None:
            for conv, bn in zip(model.embed.convs, model.embed.bns):
                self.stages.append(_EmbedStage(conv, bn, model.cfg.spiking,
                                               model.cfg.lif))
        for block, mixer in model.pairs:
            self.stages.append(_BlockStage(block))
            if mixer is not None:
                self.stages.append(_MixerStage(mixer))
        self.samples_seen = 0
        self.emitted = 0
        self.finished = False
        width = model.cfg.feature_width
        self.acc = np.zeros(width, dtype=numerics.default_dtype())
        self.last = np.zeros(width, dtype=numerics.default_dtype())

    def clone(self) -> "StreamSession":
        return copy.deepcopy(self)

    def _collect(self, h: np.ndarray) -> None:
        self.acc = self.acc + h
        self.last = h
        self.emitted += 1

    def _propagate(self, h: np.ndarray, start: int) -> None:
        for stage in self.stages[start:]:
            h = stage.push(h)
            if h is None:
                return
        self._collect(h)

    def push_sample(self, x_t) -> np.ndarray | None:
        """Feed one input sample (C,); returns pooled logits over the internal
        steps emitted so far, or None while still inside the warm-up delay."""
        if self.finished:
            raise ContractError("session already finished; reset() to reuse")
        x_t = np.asarray(x_t, dtype=numerics.default_dtype()).reshape(-1)
        if x_t.shape[0] != self.model.cfg.input_channels:
            raise ConfigError(f"expected {self.model.cfg.input_channels} channels, "
                              f"got {x_t.shape[0]}")
        self.samples_seen += 1
        self._propagate(x_t, 0)
        return self.logits()

    def logits(self) -> np.ndarray | None:
        """Pooled logits over the internal steps emitted so far."""
        if self.emitted == 0:
            return None
        if self.model.cfg.pooling == "mean":
            return self.model.head.eval_np(self.acc / self.emitted)
        return self.model.head.eval_np(self.last)

    def expected_steps(self) -> int:
        t = self.samples_seen
        if self.model.embed is not None:
            for spec in self.model.cfg.patch_embed.layers:
                t = -(-t // spec.stride)
        return t

    def finish(self) -> np.ndarray:
        """Declare end of stream: flush every conv layer with its own trailing
        zero pad (batch semantics) in network order, then return final logits.
        A zero-length stream yields the zero-feature logits (documented
        degenerate: head bias plus zero features)."""
        if not self.finished:
            for i, stage in enumerate(self.stages):
                for y in stage.finish():
                    self._propagate(y, i + 1)
            self.finished = True
            if self.emitted != self.expected_steps():
                raise ContractError(
                    f"flush emitted {self.emitted} steps, batch forward would "
                    f"produce {self.expected_steps()}")
        if self.emitted == 0:
            return self.model.head.eval_np(self.acc)
        return self.logits()


def open_session(model: Model) -> StreamSession:
    return StreamSession(model)


def stream_logits(model: Model, x: np.ndarray) -> np.ndarray:
    """Convenience: push one full sequence (T, C) and return final logits."""
    session = open_session(model)
    for t in range(x.shape[0]):
        session.push_sample(x[t])
    return session.finish()


def prefix_sweep(model: Model, X: np.ndarray, y: np.ndarray,
                 prefix_lengths=None) -> list:
    """Streaming accuracy as a function of how many samples have arrived.

    Sessions advance incrementally; at each requested prefix a cloned session
    is finished (per-layer zero pad) and classified, so one pass per sample
    covers every prefix. Rows: {prefix_len, n_correct, n_total, accuracy}.
    """
    X = np.asarray(X, dtype=numerics.default_dtype())
    y = np.asarray(y)
    T = X.shape[1]
    if prefix_lengths is None:
        prefix_lengths = sorted({0, T} | {max(1, (T * k) // 16)
                                          for k in range(1, 16)})
    prefix_lengths = sorted(set(int(p) for p in prefix_lengths))
    if any(p < 0 or p > T for p in prefix_lengths):
        raise ConfigError("prefix lengths must lie in [0, T]")
    correct = {p: 0 for p in prefix_lengths}
    for xi, yi in zip(X, y):
        session = open_session(model)
        fed = 0
        for p in prefix_lengths:
            while fed < p:
                session.push_sample(xi[fed])
                fed += 1
            probe = session.clone()
            logits = probe.finish()
            if int(np.argmax(logits)) == int(yi):
                correct[p] += 1
    n = len(X)
    return [{"prefix_len": p, "n_correct": correct[p], "n_total": n,
             "accuracy": correct[p] / n} for p in prefix_lengths]


def prefix_reaching(rows: list, fraction: float = 0.99) -> int:
    """Smallest prefix whose accuracy reaches `fraction` of the full-length one."""
    full = rows[-1]["accuracy"]
    for row in rows:
        if row["accuracy"] >= fraction * full:
            return row["prefix_len"]
    return rows[-1]["prefix_len"]


def write_prefix_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prefix_len", "n_correct", "n_total", "accuracy"])
        for row in rows:
            writer.writerow([row["prefix_len"], row["n_correct"],
                             row["n_total"], row["accuracy"]])
