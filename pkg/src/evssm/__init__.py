"""Visual state space model for image deblurring, on a numpy autodiff core."""

from .errors import (ConfigurationError, DeterminismError, DimensionError,
                     DomainError)
from .geometry import ScanMode, TransformKind
from .net import Checkpoint, NetworkConfig, load_checkpoint, save_checkpoint
from .pipeline import BlurSpec, TrainConfig, train
from .sscan import ScanInputs, SSMParams
from .tensor import ComplexGrid, Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "BlurSpec", "Checkpoint", "ComplexGrid", "ConfigurationError",
    "DeterminismError", "DimensionError", "DomainError", "NetworkConfig",
    "ScanInputs", "ScanMode", "SSMParams", "Tape", "Tensor", "TrainConfig",
    "TransformKind", "grad_check", "load_checkpoint", "save_checkpoint",
    "train", "__version__",
]
