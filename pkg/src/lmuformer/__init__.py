"""Convolutional attention-free sequence models with Legendre memory units,
in plain NumPy: parallel (FFT) or sequential evaluation, an optional fully
spiking variant, streaming inference, and analytic op/energy accounting."""

from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     LMUFormerError, NumericError)
from .numerics import RngSpec, default_dtype, precision, set_default_dtype
from .lmu import (LMUConfig, LMUMatrices, build_continuous_ab, build_matrices,
                  impulse_response, lmu_scan_parallel, lmu_scan_sequential)
from .spiking import LIFConfig, LIFState, lif_sequence, lif_step
from .blocks import (ChannelMixerConfig, LMUBlockConfig, PatchEmbedConfig,
                     PatchEmbedLayerSpec, patch_embed_delay)
from .model import (BlockPairConfig, Model, ModelConfig, build,
                    config_from_dict, config_to_dict, count_ops, count_params,
                    load, psmnist_config, save, sc_config)
from .training import OptimConfig, evaluate, finite_diff_check, train
from .streaming import (StreamSession, open_session, prefix_sweep,
                        stream_logits, write_prefix_csv)
from .efficiency import EnergyModel, count_flops, estimate_energy, measure_sparsity
from .datasets import (SequenceDataset, load_csv_sequences, load_mnist_idx,
                       permute, psmnist_splits, save_csv_sequences,
                       toy_separable)
from .estimator import LMUFormerClassifier

__version__ = "0.1.0"

__all__ = [
    "LMUFormerError", "ConfigError", "DataError", "CheckpointError",
    "NumericError", "ContractError",
    "RngSpec", "default_dtype", "set_default_dtype", "precision",
    "LMUConfig", "LMUMatrices", "build_continuous_ab", "build_matrices",
    "impulse_response", "lmu_scan_parallel", "lmu_scan_sequential",
    "LIFConfig", "LIFState", "lif_step", "lif_sequence",
    "PatchEmbedLayerSpec", "PatchEmbedConfig", "patch_embed_delay",
    "ChannelMixerConfig", "LMUBlockConfig",
    "ModelConfig", "BlockPairConfig", "Model", "build", "save", "load",
    "config_to_dict", "config_from_dict", "count_params", "count_ops",
    "psmnist_config", "sc_config",
    "OptimConfig", "train", "evaluate", "finite_diff_check",
    "StreamSession", "open_session", "stream_logits", "prefix_sweep",
    "write_prefix_csv",
    "EnergyModel", "count_flops", "estimate_energy", "measure_sparsity",
    "SequenceDataset", "load_mnist_idx", "psmnist_splits", "permute",
    "load_csv_sequences", "save_csv_sequences", "toy_separable",
    "LMUFormerClassifier",
    "__version__",
]
