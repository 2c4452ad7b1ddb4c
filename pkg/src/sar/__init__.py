"""Scale-aware restoration pre-training for 3D tumor segmentation."""

from sar.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FormatError,
    NumericalError,
    SamplingError,
    SARError,
    ShapeError,
)
from sar.volume import Modality, Volume

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FormatError",
    "Modality",
    "NumericalError",
    "SARError",
    "SamplingError",
    "ShapeError",
    "Volume",
]
