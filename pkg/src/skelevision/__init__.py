"""Desk-scale lab for adversarial robustness of Siamese-RPN person tracking
under multi-task learning."""

from .geometry import Box, Deltas, AnchorSet, iou, miou, generate_anchors, encode_deltas, decode_deltas
from .errors import ConfigError, DataError, NumericsError, ShapeError, SkeleVisionError

__all__ = [
    "Box",
    "Deltas",
    "AnchorSet",
    "iou",
    "miou",
    "generate_anchors",
    "encode_deltas",
    "decode_deltas",
    "ConfigError",
    "DataError",
    "NumericsError",
    "ShapeError",
    "SkeleVisionError",
]

__version__ = "0.1.0"
