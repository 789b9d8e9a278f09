"""Virtual-point LiDAR/stereo fusion: geometry, sparse voxels, heads, augmentation and evaluation."""

from .errors import (
    BehindCamera,
    DomainError,
    FormatError,
    MissingField,
    MissingWeight,
    ParseError,
    ShapeError,
    TruncatedInput,
    ValidationError,
    VPFuseError,
)
from .geometry import Box3D

__version__ = "0.1.0"
