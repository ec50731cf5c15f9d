"""Desk-scale test bench for warping-based backdoor attacks and defenses."""
from .errors import ConfigError, DegenerateDraw, FormatError, StateError, TrainingDiverged, WarpBenchError
from .warp import WarpField, build_warp_field, warp_image

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateDraw",
    "FormatError",
    "StateError",
    "TrainingDiverged",
    "WarpBenchError",
    "WarpField",
    "build_warp_field",
    "warp_image",
]
