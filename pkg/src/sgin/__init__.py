"""Semantics-guided facial inpainting: data synthesis, models, training, serving."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, save_config  # noqa: F401
from .pngio import NUM_REGIONS, REGION_NAMES, REGION_PALETTE  # noqa: F401
