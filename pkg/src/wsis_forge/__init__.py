"""Weakly-supervised instance segmentation label machinery.

Pipeline stages: activation sharpening and cue extraction, semantic
knowledge transfer into pseudo instance labels, center/offset instance
representation, online self-refinement losses, and a synthetic-scene
experiment harness.
"""

from .core import (
    ActivationStack,
    CenterMap,
    FormatError,
    ImageGrid,
    Instance,
    InstanceLabelSet,
    OffsetMap,
    SemanticMap,
    ShapeError,
    ValidationError,
)
from .refine import LossReport, RefineConfig

__version__ = "0.1.0"

__all__ = [
    "ActivationStack",
    "CenterMap",
    "FormatError",
    "ImageGrid",
    "Instance",
    "InstanceLabelSet",
    "LossReport",
    "OffsetMap",
    "RefineConfig",
    "SemanticMap",
    "ShapeError",
    "ValidationError",
    "__version__",
]
