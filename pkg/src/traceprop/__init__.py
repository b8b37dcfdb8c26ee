"""Target-propagation style local learning for spiking networks, in numpy."""

from .errors import (
    ConfigError,
    ContainerFormatError,
    ContrastiveBatchError,
    DimensionError,
    NumericError,
    TracePropError,
)
from .network import ArchSpec, LayerSpec, TpNetwork, init_network, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, finetune, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ConfigError", "ContainerFormatError", "ContrastiveBatchError", "DimensionError",
    "LayerSpec", "NumericError", "TpNetwork", "TracePropError", "TrainConfig", "evaluate",
    "finetune", "init_network", "load_checkpoint", "save_checkpoint", "train",
]
