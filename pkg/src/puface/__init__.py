"""Purifying cloaked face images before recognition training."""
from .core import clip_unit, load_checkpoint, mae, mse, save_checkpoint
from .datasets import IdentityDataset, SynthIdentitySpec, generate_synthetic, load_directory, split

__version__ = "0.1.0"

__all__ = [
    "IdentityDataset", "SynthIdentitySpec", "clip_unit", "generate_synthetic", "load_checkpoint",
    "load_directory", "mae", "mse", "save_checkpoint", "split",
]
