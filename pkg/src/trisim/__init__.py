"""Siamese text-similarity head over stacked per-block encoder outputs."""
from .config import DEFAULT_CONFIG, default_config, load_config, validate
from .model import SiameseHead
from .tensor import Parameter, ParamSet, Tensor, no_grad

__all__ = ["DEFAULT_CONFIG", "default_config", "load_config", "validate", "SiameseHead",
           "Parameter", "ParamSet", "Tensor", "no_grad"]
__version__ = "0.1.0"
