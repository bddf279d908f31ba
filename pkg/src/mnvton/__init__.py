"""Desk-scale modality-normalised try-on diffusion on a numpy autograd engine."""

from .blocks import BlockVariant
from .config import RunConfig
from .errors import ConfigError, ContractError, NumericalError
from .modality import ModalityTag
from .model import Denoiser, ModelConfig
from .tensor import Tensor, grad_check
from .toytask import TaskConfig, gen_sample

__version__ = "0.1.0"

__all__ = [
    "BlockVariant", "ConfigError", "ContractError", "Denoiser", "ModalityTag", "ModelConfig",
    "NumericalError", "RunConfig", "TaskConfig", "Tensor", "gen_sample", "grad_check",
]
