"""Analytic operation counting and the compute-energy model.

MAC counts depend only on shapes: conv1d costs T'*K*Cin*Cout, a linear map
fan_in*fan_out, the LMU scan (sequential semantics) T*(d^2+d) per memory
head, eval batchnorm 2*T*C. LIF populations contribute threshold comparisons,
one per neuron per step. Spiking energy weights each layer's accumulates by
the measured density of nonzero inputs; the first layer (direct encoding of
real input) pays full multiply-accumulate cost.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, layers
from .blocks import ChannelMixer, LMUBlock, PLMUCell, SpikingLMUCell
from .errors import ConfigError
from .model import Model


@dataclass
class LayerCount:
    name: str
    kind: str                      # conv | linear | bn | lmu_scan | lif
    mac_ops: int
    comparison_ops: int = 0
    sparsity: float | None = None  # density of nonzero inputs, when measured

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "mac_ops": self.mac_ops,
                "comparison_ops": self.comparison_ops, "sparsity": self.sparsity}


@dataclass
class OpCountReport:
    layers: list
    seq_len: int
    fft_train_macs: int = 0        # informational: parallel-scan training cost

    @property
    def total_macs(self) -> int:
        return sum(l.mac_ops for l in self.layers)

    @property
    def total_comparisons(self) -> int:
        return sum(l.comparison_ops for l in self.layers)

    def synaptic_ops(self) -> float:
        """Accumulate-only SOPs: density-weighted MACs of all layers but the first."""
        mac_layers = [l for l in self.layers if l.mac_ops]
        return sum((1.0 if l.sparsity is None else l.sparsity) * l.mac_ops
                   for l in mac_layers[1:])

    def to_dict(self) -> dict:
        return {"seq_len": self.seq_len,
                "layers": [l.to_dict() for l in self.layers],
                "total_macs": self.total_macs,
                "total_comparisons": self.total_comparisons,
                "fft_train_macs": self.fft_train_macs}


@dataclass(frozen=True)
class EnergyModel:
    e_mac: float = 13.32   # pJ per multiply-accumulate
    e_ac: float = 1.8      # pJ per accumulate
    e_sp: float = 0.05     # pJ per synaptic-op bookkeeping
    e_com: float = 1.64    # pJ per threshold comparison

    def __post_init__(self):
        if min(self.e_mac, self.e_ac, self.e_sp, self.e_com) < 0:
            raise ConfigError("energy constants must be >= 0")


# -- structural walk -------------------------------------------------------------

def _walk(model: Model, T: int):
    """Yield (LayerCount, spike_source) in forward order.

    spike_source describes which LIF population (by call order in the
    vectorized forward) feeds the layer: None for dense/real inputs,
    ("pop", i), or ("blend", [(i, weight), ...]) for concatenated inputs.
    """
    pop = -1  # index of the most recent LIF population

    def conv_entry(name, conv, t_in, source):
        t_out = -(-t_in // conv.stride)
        macs = t_out * conv.kernel * conv.in_ch * conv.out_ch
        return LayerCount(name, "conv", macs), t_out, source

    entries = []
    t = T
    spiking = model.cfg.spiking
    stream = None  # population feeding the next module, when it emits spikes
    if model.embed is not None:
        for i, (conv, bn) in enumerate(zip(model.embed.convs, model.embed.bns)):
            e, t, source = conv_entry(f"embed.{i}.conv", conv, t, stream)
            entries.append((e, source))
            entries.append((LayerCount(f"embed.{i}.bn", "bn", 2 * t * conv.out_ch), None))
            if spiking:
                pop += 1
                entries.append((LayerCount(f"embed.{i}.sn", "lif", 0, t * conv.out_ch),
                                ("pop", pop)))
                stream = ("pop", pop)
    for bi, (block, mixer) in enumerate(model.pairs):
        cfg = block.cfg
        C, d, cin = cfg.channels, cfg.order, cfg.cell_in
        name = f"block{bi}"
        cell_source = stream
        if cfg.variant == "block":
            entries.append((LayerCount(f"{name}.bn_pre", "bn", 2 * t * cin), None))
            if spiking:
                pop += 1
                entries.append((LayerCount(f"{name}.sn_pre", "lif", 0, t * cin),
                                ("pop", pop)))
                cell_source = ("pop", pop)
        cell = block.cell
        if isinstance(cell, SpikingLMUCell):
            x_pop = cell_source[1] if cell_source is not None else None
            entries.append((LayerCount(f"{name}.cell.conv_in", "conv", t * cin * C),
                            cell_source))
            entries.append((LayerCount(f"{name}.cell.bn_in", "bn", 2 * t * C), None))
            pop += 1
            entries.append((LayerCount(f"{name}.cell.sn_in", "lif", 0, t * C),
                            ("pop", pop)))
            u_pop = pop
            entries.append((LayerCount(f"{name}.cell.scan", "lmu_scan",
                                       t * (d * d + d) * C), ("pop", u_pop)))
            pop += 1
            entries.append((LayerCount(f"{name}.cell.sn_mem", "lif", 0, t * C * d),
                            ("pop", pop)))
            m_pop = pop
            if x_pop is None:
                blend = ("pop", m_pop)
            else:
                total = C * d + cin
                blend = ("blend", [(m_pop, C * d / total), (x_pop, cin / total)])
            entries.append((LayerCount(f"{name}.cell.conv_out", "conv",
                                       t * (C * d + cin) * C), blend))
            entries.append((LayerCount(f"{name}.cell.bn_out", "bn", 2 * t * C), None))
            pop += 1
            entries.append((LayerCount(f"{name}.cell.sn_out", "lif", 0, t * C),
                            ("pop", pop)))
            out_pop = ("pop", pop)
        else:
            entries.append((LayerCount(f"{name}.cell.proj_u", "linear", t * cin * C),
                            cell_source))
            entries.append((LayerCount(f"{name}.cell.scan", "lmu_scan",
                                       t * (d * d + d) * C), None))
            entries.append((LayerCount(f"{name}.cell.readout_m", "linear",
                                       t * C * d * C), None))
            entries.append((LayerCount(f"{name}.cell.readout_x", "linear",
                                       t * cin * C), cell_source))
            out_pop = None
        if cfg.variant == "block":
            entries.append((LayerCount(f"{name}.conv_post", "conv", t * C * C), out_pop))
            entries.append((LayerCount(f"{name}.bn_post", "bn", 2 * t * C), None))
            stream = None  # residual add makes the block output real-valued
        else:
            stream = out_pop
        if mixer is not None:
            mc = mixer.cfg
            hidden = mc.channels * mc.ratio
            mname = f"mixer{bi}"
            entries.append((LayerCount(f"{mname}.bn1", "bn", 2 * t * mc.channels), None))
            s1 = None
            if spiking:
                pop += 1
                entries.append((LayerCount(f"{mname}.sn1", "lif", 0, t * mc.channels),
                                ("pop", pop)))
                s1 = ("pop", pop)
            entries.append((LayerCount(f"{mname}.conv1", "conv",
                                       t * mc.channels * hidden), s1))
            entries.append((LayerCount(f"{mname}.bn2", "bn", 2 * t * hidden), None))
            s2 = None
            if spiking:
                pop += 1
                entries.append((LayerCount(f"{mname}.sn2", "lif", 0, t * hidden),
                                ("pop", pop)))
                s2 = ("pop", pop)
            entries.append((LayerCount(f"{mname}.conv2", "conv",
                                       t * hidden * mc.channels), s2))
            stream = None  # mixer residual output is real-valued
    entries.append((LayerCount("head", "linear",
                               model.head.in_features * model.head.out_features), None))
    return entries, t


def count_flops(model: Model, T: int) -> OpCountReport:
    if T < 1:
        raise ConfigError("sequence length must be >= 1")
    entries, _ = _walk(model, T)
    report = OpCountReport([e for e, _ in entries], T)
    # informational: parallel-scan training cost heads*d*T*ceil(log2 T) per cell
    fft_total = 0
    for block, _ in model.pairs:
        d = block.cfg.order
        heads = block.cfg.channels
        fft_total += heads * d * T * max(1, math.ceil(math.log2(max(T, 2))))
    report.fft_train_macs = fft_total
    return report


@contextmanager
def _recording():
    saved = layers.SPIKE_RECORDER
    layers.SPIKE_RECORDER = []
    try:
        yield layers.SPIKE_RECORDER
    finally:
        layers.SPIKE_RECORDER = saved


def measure_sparsity(model: Model, x: np.ndarray) -> OpCountReport:
    """Eval forward on x ((T, C) or (B, T, C)) recording per-population spike
    densities; returns the op report with per-layer input densities filled."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    with _recording() as rec:
        with autodiff.no_grad():
            model.forward(x, mode="eval")
    entries, _ = _walk(model, x.shape[1])
    densities = list(rec)

    def resolve(src):
        if src is None:
            return None
        if src[0] == "pop":
            return densities[src[1]]
        return sum(w * densities[i] for i, w in src[1])

    report = OpCountReport([e for e, _ in entries], x.shape[1])
    for (entry, src) in zip(report.layers, (s for _, s in entries)):
        d = resolve(src)
        if entry.kind == "lif":
            entry.sparsity = d   # own output density, informational
        elif d is not None:
            entry.sparsity = d
    return report


def estimate_energy(report: OpCountReport, em: EnergyModel, spiking: bool) -> float:
    """Total compute energy in pJ.

    Non-spiking: every MAC at e_mac. Spiking: the first MAC layer runs at
    full e_mac (real-valued direct encoding); each later layer contributes
    S_l * macs * e_ac + macs * e_sp; every layer adds comparisons * e_com.
    """
    total = 0.0
    mac_seen = False
    for l in report.layers:
        total += l.comparison_ops * em.e_com
        if l.mac_ops == 0:
            continue
        if not spiking:
            total += l.mac_ops * em.e_mac
        elif not mac_seen:
            total += l.mac_ops * em.e_mac
        else:
            s = 1.0 if l.sparsity is None else l.sparsity
            total += s * l.mac_ops * em.e_ac + l.mac_ops * em.e_sp
        mac_seen = True
    return total


def report_json(report: OpCountReport, em: EnergyModel, spiking: bool) -> dict:
    """JSON-ready payload combining op counts with the energy estimate."""
    payload = report.to_dict()
    payload["synaptic_ops"] = report.synaptic_ops()
    payload["energy_pj"] = estimate_energy(report, em, spiking)
    payload["energy_model"] = {"e_mac": em.e_mac, "e_ac": em.e_ac,
                               "e_sp": em.e_sp, "e_com": em.e_com}
    payload["spiking"] = spiking
    return payload
