"""Uncertainty-driven voxel graphs with dynamic feature-space neighbourhoods
for refining CNN segmentations."""

from .errors import (
    ConfigError,
    DomainError,
    MissingArtifactError,
    ParseError,
    ShapeError,
    UncertGraphError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "MissingArtifactError",
    "ParseError",
    "ShapeError",
    "UncertGraphError",
    "__version__",
]
