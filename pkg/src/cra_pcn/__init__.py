"""CRA-PCN: point cloud completion with cross-resolution transformers, in numpy."""
from .config import ModelConfig, TrainConfig
from .errors import ContractError, ParseError, ShapeError, TrainingError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ContractError",
    "ModelConfig",
    "ParseError",
    "ShapeError",
    "TrainConfig",
    "TrainingError",
]
