"""Crystal-graph encoders and sequence decoders for density-of-states prediction."""
from .config import ConfigError, DecoderConfig, TrainConfig
from .graph import (CrystalGraph, Dataset, Sample, Spectrum, collate, gaussian_basis_expand,
                    generate_synthetic, load_dataset, save_dataset, split)
from .metrics import MetricReport, mae, metric_report, mse, r_squared, wasserstein
from .model import Xtal2DoS
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CrystalGraph", "Dataset", "DecoderConfig", "MetricReport", "Sample", "Spectrum",
    "Tensor", "TrainConfig", "Xtal2DoS", "collate", "gaussian_basis_expand", "generate_synthetic",
    "load_dataset", "mae", "metric_report", "mse", "r_squared", "save_dataset", "split", "wasserstein",
]
