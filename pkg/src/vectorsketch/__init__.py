"""Differentiable vector sketches: rendering, guidance losses and the object,
scene, typography, animation and concept-tree pipelines."""
from __future__ import annotations

from .errors import (
    BackendError,
    ConfigError,
    DomainError,
    InterfaceError,
    NumericError,
    UnsupportedElementError,
    VectorSketchError,
)
from .geometry import GlyphOutline, Stroke, VectorSketch
from .raster import SoftRasterConfig, render

__version__ = "0.1.0"

__all__ = [
    "BackendError", "ConfigError", "DomainError", "InterfaceError", "NumericError",
    "UnsupportedElementError", "VectorSketchError", "GlyphOutline", "Stroke", "VectorSketch",
    "SoftRasterConfig", "render", "__version__",
]
