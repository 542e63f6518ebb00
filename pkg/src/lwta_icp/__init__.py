"""Stochastic local winner-takes-all networks trained with an information competing objective."""

from .config import TrainConfig
from .data import DatasetBundle, augment, ingest
from .errors import (ConfigError, ContractError, DataError, DimensionError, DivergenceError,
                     ExportError, LwtaIcpError, ParseError)
from .evaluation import (ProbeReport, SparsityReport, feature_map_export, linear_probe,
                         probe_report, sparsity_report)
from .icp import IcpCoefficients, IcpModel
from .layers import ConvLwtaLayer, DenseLwtaLayer
from .tensor import GraphTape, Tensor
from .trainer import Checkpoint, accuracy, compress, predict, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "ContractError", "ConvLwtaLayer", "DataError", "DatasetBundle",
    "DenseLwtaLayer", "DimensionError", "DivergenceError", "ExportError", "GraphTape", "IcpCoefficients",
    "IcpModel", "LwtaIcpError", "ParseError", "ProbeReport", "SparsityReport", "Tensor", "TrainConfig",
    "accuracy", "augment", "compress", "feature_map_export", "ingest", "linear_probe", "predict",
    "probe_report", "sparsity_report", "train",
]
