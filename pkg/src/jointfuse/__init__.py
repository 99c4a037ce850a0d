"""Infrared/visible image fusion trained jointly with detection and
segmentation drivers."""
from .config import TrainConfig, load_config, parse_config
from .data import AnnotationSet, Box, DatasetManifest, ImagePair, PairDataset, load_pair
from .errors import (AnnotationParseError, ConfigError, FormatError, NonFiniteLossError,
                     ValidationError)
from .losses import LossBreakdown, LossConfig
from .metrics import MetricsReport, evaluate_directory, evaluate_fused
from .neighborhood import BACKEND, neighborhood_attention
from .network import FusionNet, NetConfig

__version__ = "0.1.0"

__all__ = [
    "AnnotationParseError", "AnnotationSet", "BACKEND", "Box", "ConfigError", "DatasetManifest",
    "FormatError", "FusionNet", "ImagePair", "LossBreakdown", "LossConfig", "MetricsReport",
    "NetConfig", "NonFiniteLossError", "PairDataset", "TrainConfig", "ValidationError",
    "evaluate_directory", "evaluate_fused", "load_config", "load_pair", "neighborhood_attention",
    "parse_config",
]
