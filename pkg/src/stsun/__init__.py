"""Metadata-conditioned network for segmentation and change detection on
spatial-temporal-spectral image cubes, with a small numpy autodiff engine."""

from .metadata import InputMetadata, OutputSpec, Task, ValidationError
from .model import ModelConfig, STSUN, init, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["InputMetadata", "OutputSpec", "Task", "ValidationError", "ModelConfig", "STSUN", "init",
           "load_checkpoint", "save_checkpoint", "NonFiniteError", "Tensor", "no_grad"]
