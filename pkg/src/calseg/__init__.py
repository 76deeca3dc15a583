"""
calseg - calibration-guided source-free adaptation for segmentation

A desk-scale pipeline: calibration-aware source pre-training with a
differentiable ECE loss, ECE-based checkpoint selection, a value net that
estimates per-image ECE, and calibration-guided self-training on an
unlabeled target domain. Runs on CPU with numpy only.
"""

__version__ = "0.1.0"
__description__ = "Calibration-guided source-free domain adaptation for segmentation at desk scale."

from .config import Settings, build_settings, get_settings
from .errors import CalsegError
from .pipeline import CalsegPipeline

__all__ = ["CalsegError", "CalsegPipeline", "Settings", "build_settings", "get_settings"]
