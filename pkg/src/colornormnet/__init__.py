"""ColorNormNet: self-supervised color normalization for H&E-like rasters."""
from .errors import ColorNormError
from .model import ArchSpec, Model, build_model, forward, load_weights, save_weights

__all__ = ["ArchSpec", "ColorNormError", "Model", "build_model", "forward", "load_weights", "save_weights"]
__version__ = "0.1.0"
