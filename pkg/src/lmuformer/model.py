"""Full network assembly, parameter counting, and checkpoint serialization.

A model is patch embedding -> (LMU block, channel mixer) pairs -> time
pooling -> linear head. The simplified variant (pixel-sequence tasks) uses a
single conv+BN embedding and no mixers. Spiking and non-spiking variants
share the skeleton; spiking activations are LIF populations.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, numerics
from .blocks import (ChannelMixer, ChannelMixerConfig, LMUBlock, LMUBlockConfig,
                     PatchEmbed, PatchEmbedConfig, PatchEmbedLayerSpec)
from .errors import CheckpointError, ConfigError
from .layers import Linear
from .numerics import RngSpec
from .spiking import LIFConfig

CHECKPOINT_MAGIC = b"LMUF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockPairConfig:
    lmu: LMUBlockConfig
    mixer: ChannelMixerConfig | None = None


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int
    num_classes: int
    patch_embed: PatchEmbedConfig | None
    blocks: tuple
    spiking: bool = False
    simplified: bool = False
    pooling: str = "mean"
    lif: LIFConfig = field(default_factory=LIFConfig)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.input_channels < 1 or self.num_classes < 2:
            raise ConfigError("need >=1 input channel and >=2 classes")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.spiking and self.patch_embed is None:
            raise ConfigError("spiking model needs a patch embed as direct encoder")
        width = self.input_channels
        if self.patch_embed is not None:
            if self.patch_embed.layers[0].in_ch != width:
                raise ConfigError("patch embed input width mismatch")
            if self.patch_embed.spiking != self.spiking:
                raise ConfigError("patch embed spiking flag mismatch")
            width = self.patch_embed.layers[-1].out_ch
        for pair in self.blocks:
            if pair.lmu.cell_in != width:
                raise ConfigError(f"block expects {pair.lmu.cell_in} channels, got {width}")
            if pair.lmu.spiking != self.spiking:
                raise ConfigError("block spiking flag mismatch")
            width = pair.lmu.channels
            if pair.mixer is not None:
                if pair.mixer.channels != width:
                    raise ConfigError("mixer width mismatch")
                if pair.mixer.spiking != self.spiking:
                    raise ConfigError("mixer spiking flag mismatch")
        if self.simplified:
            if self.patch_embed is None or len(self.patch_embed.layers) != 1:
                raise ConfigError("simplified mode uses a single-layer patch embed")
            if any(pair.mixer is not None for pair in self.blocks):
                raise ConfigError("simplified mode has no channel mixers")

    @property
    def feature_width(self) -> int:
        width = self.input_channels
        if self.patch_embed is not None:
            width = self.patch_embed.layers[-1].out_ch
        for pair in self.blocks:
            width = pair.lmu.channels
        return width


class Model:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.training = False
        self.step = 0
        self.embed = (PatchEmbed(cfg.patch_embed, cfg.lif, rng)
                      if cfg.patch_embed is not None else None)
        self.pairs = []
        for pair in cfg.blocks:
            block = LMUBlock(pair.lmu, cfg.lif, rng)
            mixer = (ChannelMixer(pair.mixer, cfg.lif, rng)
                     if pair.mixer is not None else None)
            self.pairs.append((block, mixer))
        self.head = Linear(cfg.feature_width, cfg.num_classes, rng=rng)

    # -- forward -------------------------------------------------------------

    def forward(self, x, mode: str = "eval", smooth: bool = False) -> autodiff.Tensor:
        """Batched forward on x (B, T, C) -> logits (B, num_classes)."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        train = mode == "train"
        h = autodiff.as_tensor(x)
        if h.ndim != 3 or h.shape[2] != self.cfg.input_channels:
            raise ConfigError(f"expected (B, T, {self.cfg.input_channels}) input, got {h.shape}")
        if self.embed is not None:
            h = self.embed.forward(h, train, smooth)
        for block, mixer in self.pairs:
            h = block.forward(h, train, smooth)
            if mixer is not None:
                h = mixer.forward(h, train, smooth)
        pooled = (autodiff.mean(h, axis=1) if self.cfg.pooling == "mean"
                  else autodiff.index_time(h, h.shape[1] - 1))
        return self.head.forward(pooled)

    def features_stepwise(self, x: np.ndarray) -> np.ndarray:
        """Pre-pooling features of one sequence (T, C) via per-step reductions."""
        h = np.asarray(x, dtype=numerics.default_dtype())
        if h.ndim != 2 or h.shape[1] != self.cfg.input_channels:
            raise ConfigError(f"expected (T, {self.cfg.input_channels}) input, got {h.shape}")
        if self.embed is not None:
            h = self.embed.eval_stepwise(h)
        for block, mixer in self.pairs:
            h = block.eval_stepwise(h)
            if mixer is not None:
                h = mixer.eval_stepwise(h)
        return h

    def forward_stepwise(self, x: np.ndarray) -> np.ndarray:
        """Single-sequence eval logits; arithmetic matches the stream session
        bitwise (running-sum pooling, per-step reductions)."""
        h = self.features_stepwise(x)
        if self.cfg.pooling == "mean":
            acc = np.zeros(h.shape[1], dtype=h.dtype)
            for t in range(h.shape[0]):
                acc = acc + h[t]
            pooled = acc / h.shape[0]
        else:
            pooled = h[-1]
        return self.head.eval_np(pooled)

    # -- parameter bookkeeping -------------------------------------------------

    def named_params(self) -> dict:
        out = {}
        if self.embed is not None:
            out.update(self.embed.named_params("embed"))
        for i, (block, mixer) in enumerate(self.pairs):
            out.update(block.named_params(f"block{i}"))
            if mixer is not None:
                out.update(mixer.named_params(f"mixer{i}"))
        out.update(self.head.named_params("head"))
        return out

    def named_buffers(self) -> dict:
        out = {}
        if self.embed is not None:
            out.update(self.embed.named_buffers("embed"))
        for i, (block, mixer) in enumerate(self.pairs):
            out.update(block.named_buffers(f"block{i}"))
            if mixer is not None:
                out.update(mixer.named_buffers(f"mixer{i}"))
        return out

    def load_buffers(self, buffers: dict) -> None:
        if self.embed is not None:
            self.embed.load_buffers("embed", buffers)
        for i, (block, mixer) in enumerate(self.pairs):
            block.load_buffers(f"block{i}", buffers)
            if mixer is not None:
                mixer.load_buffers(f"mixer{i}", buffers)

    def parameters(self) -> list:
        return list(self.named_params().values())


def build(cfg: ModelConfig, rng) -> Model:
    """Construct a model with deterministic initialization from an RngSpec,
    integer seed, or numpy Generator."""
    if isinstance(rng, RngSpec):
        gen = rng.generator()
    elif isinstance(rng, (int, np.integer)):
        gen = RngSpec(int(rng)).generator()
    else:
        gen = rng
    return Model(cfg, gen)


def forward(model: Model, x, mode: str = "eval") -> autodiff.Tensor:
    return model.forward(x, mode)


def count_params(model: Model) -> int:
    return sum(p.data.size for p in model.named_params().values())


def count_ops(model: Model, T: int):
    from .efficiency import count_flops
    return count_flops(model, T)


# -- config (de)serialization ---------------------------------------------------

def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


def config_to_dict(cfg: ModelConfig) -> dict:
    return _asdict(cfg)


def _build_dataclass(cls, d, where):
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


def config_from_dict(d: dict) -> ModelConfig:
    if not isinstance(d, dict):
        raise ConfigError("model config must be an object")
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"model config: unknown keys {sorted(unknown)}")
    d = dict(d)
    if d.get("patch_embed") is not None:
        pe = d["patch_embed"]
        if not isinstance(pe, dict) or set(pe) - {"layers", "spiking"}:
            raise ConfigError("patch_embed: expected {layers, spiking}")
        layers = tuple(_build_dataclass(PatchEmbedLayerSpec, l, "patch_embed.layers")
                       for l in pe.get("layers", ()))
        d["patch_embed"] = PatchEmbedConfig(layers=layers, spiking=pe.get("spiking", False))
    blocks = []
    for i, pair in enumerate(d.get("blocks", ())):
        if not isinstance(pair, dict) or set(pair) - {"lmu", "mixer"}:
            raise ConfigError(f"blocks[{i}]: expected {{lmu, mixer}}")
        blocks.append(BlockPairConfig(
            lmu=_build_dataclass(LMUBlockConfig, pair.get("lmu"), f"blocks[{i}].lmu"),
            mixer=_build_dataclass(ChannelMixerConfig, pair.get("mixer"), f"blocks[{i}].mixer")))
    d["blocks"] = tuple(blocks)
    if d.get("lif") is not None:
        d["lif"] = _build_dataclass(LIFConfig, d["lif"], "lif")
    else:
        d.pop("lif", None)
    return ModelConfig(**d)


# -- checkpointing ---------------------------------------------------------------

def save(model: Model, path) -> None:
    params = model.named_params()
    buffers = model.named_buffers()
    header = {
        "config": config_to_dict(model.cfg),
        "step": model.step,
        "params": [{"name": k, "shape": list(v.data.shape),
                    "dtype": v.data.dtype.str} for k, v in params.items()],
        "buffers": [{"name": k, "shape": list(v.shape),
                     "dtype": v.dtype.str} for k, v in buffers.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v.data).tobytes())
        for v in buffers.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load(path) -> Model:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from None
        cfg = config_from_dict(header["config"])
        model = build(cfg, RngSpec(0))
        params = model.named_params()
        if [p["name"] for p in header["params"]] != list(params.keys()):
            raise CheckpointError("checkpoint parameters do not match model config")
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            if params[meta["name"]].data.shape != shape:
                raise CheckpointError(f"shape mismatch for {meta['name']}")
            dt = np.dtype(meta["dtype"])
            raw = _read_exact(fh, dt.itemsize * int(np.prod(shape, dtype=np.int64)),
                              meta["name"])
            params[meta["name"]].data = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        buffers = {}
        for meta in header["buffers"]:
            shape = tuple(meta["shape"])
            dt = np.dtype(meta["dtype"])
            raw = _read_exact(fh, dt.itemsize * int(np.prod(shape, dtype=np.int64)),
                              meta["name"])
            buffers[meta["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        model.load_buffers(buffers)
        model.step = int(header.get("step", 0))
    return model


# -- reference configurations -----------------------------------------------------

def psmnist_config(spiking: bool = False, channels: int = 40, order: int = 48,
                   num_blocks: int = 1, theta: float = 784.0,
                   input_channels: int = 1, num_classes: int = 10) -> ModelConfig:
    """Simplified pixel-sequence model: one conv+BN embed, no channel mixer."""
    embed = PatchEmbedConfig(
        layers=(PatchEmbedLayerSpec(input_channels, channels, kernel=1,
                                    stride=1, lookahead=0),),
        spiking=spiking)
    blocks = tuple(
        BlockPairConfig(lmu=LMUBlockConfig(
            channels=channels, order=order, theta=theta, variant="block",
            spiking=spiking, memory_spike_feedback=False))
        for _ in range(num_blocks))
    return ModelConfig(input_channels=input_channels, num_classes=num_classes,
                       patch_embed=embed, blocks=blocks, spiking=spiking,
                       simplified=True)


def sc_config(spiking: bool = False, width: int = 128, order: int = 64,
              num_pairs: int = 2, theta: float = 128.0,
              input_channels: int = 1, num_classes: int = 10) -> ModelConfig:
    """Keyword-spotting-scale model with the default 4-layer patch embedding."""
    half = width // 2
    embed = PatchEmbedConfig(
        layers=(PatchEmbedLayerSpec(input_channels, half), PatchEmbedLayerSpec(half, half),
                PatchEmbedLayerSpec(half, width), PatchEmbedLayerSpec(width, width)),
        spiking=spiking)
    blocks = tuple(
        BlockPairConfig(
            lmu=LMUBlockConfig(channels=width, order=order, theta=theta,
                               variant="block", spiking=spiking,
                               memory_spike_feedback=spiking),
            mixer=ChannelMixerConfig(channels=width, ratio=2, spiking=spiking))
        for _ in range(num_pairs))
    return ModelConfig(input_channels=input_channels, num_classes=num_classes,
                       patch_embed=embed, blocks=blocks, spiking=spiking,
                       simplified=False)
