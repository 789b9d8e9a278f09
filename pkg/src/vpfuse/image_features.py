"""2D feature maps: a small 3x3 convolution backbone and bilinear sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingWeight, ShapeError, ValidationError
from .kitti_io import Image, WeightBundle

BACKBONE_LAYERS = ("conv1", "conv2", "conv3", "conv4")
BACKBONE_STRIDES = (1, 2, 1, 1)


@dataclass(frozen=True, eq=False)
class FeatureMap2D:
    """(height, width, channels) features; one cell covers ``stride`` input pixels."""

    data: np.ndarray
    stride_from_input: int = 1

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ShapeError(f"feature map must be (H, W, C), got {d.shape}")
        if int(self.stride_from_input) < 1:
            raise ValidationError("stride_from_input must be >= 1")
        d = np.array(d)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "stride_from_input", int(self.stride_from_input))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_image(cls, image: Image) -> "FeatureMap2D":
        """``raw`` mode: the pixels themselves are the features."""
        return cls(image.data, 1)


def conv2d_forward(fmap: FeatureMap2D, kernel, stride: int = 1, activation: str = "relu",
                   bias=None) -> FeatureMap2D:
    """3x3 cross-correlation with zero padding 1.

    ``kernel`` has shape (C_out, C_in, 3, 3).  Output size is
    ceil(H / stride) x ceil(W / stride).
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"kernel must be (C_out, C_in, 3, 3), got {k.shape}")
    if k.shape[1] != fmap.channels:
        raise ShapeError(f"kernel expects {k.shape[1]} input channels, map has {fmap.channels}")
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    H, W, _ = fmap.data.shape
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    padded = np.pad(fmap.data, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((Ho, Wo, k.shape[0]))
    for dy in range(3):
        for dx in range(3):
            window = padded[dy:dy + stride * (Ho - 1) + 1:stride, dx:dx + stride * (Wo - 1) + 1:stride]
            out += window @ k[:, :, dy, dx].T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(-1)
    if activation == "relu":
        np.maximum(out, 0.0, out=out)
    return FeatureMap2D(out, fmap.stride_from_input * stride)


def backbone_forward(image: Image | FeatureMap2D, weights: WeightBundle) -> FeatureMap2D:
    """Four 3x3 layers (strides 1, 2, 1, 1), ReLU after all but the last.

    Left and right images share weights by being passed the same bundle.
    Biases ``convN.bias`` are optional.
    """
    fmap = image if isinstance(image, FeatureMap2D) else FeatureMap2D.from_image(image)
    for i, (name, stride) in enumerate(zip(BACKBONE_LAYERS, BACKBONE_STRIDES)):
        if f"{name}.weight" not in weights:
            raise MissingWeight(f"{name}.weight")
        bias = weights[f"{name}.bias"] if f"{name}.bias" in weights else None
        act = "none" if i == len(BACKBONE_LAYERS) - 1 else "relu"
        fmap = conv2d_forward(fmap, weights[f"{name}.weight"], stride, act, bias)
    return fmap


def bilinear_sample(fmap: FeatureMap2D, u: float, v: float) -> tuple[np.ndarray, bool]:
    """Sample at input-pixel coordinates (u, v).

    Returns ``(features, in_view)``.  Points outside the map's cell range
    [0, W-1] x [0, H-1] give the zero vector with ``in_view == False``.
    """
    feats, ok = bilinear_sample_many(fmap, np.array([u], dtype=np.float64), np.array([v], dtype=np.float64))
    return feats[0], bool(ok[0])


def bilinear_sample_many(fmap: FeatureMap2D, u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    x = u / fmap.stride_from_input
    y = v / fmap.stride_from_input
    H, W, C = fmap.data.shape
    ok = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    out = np.zeros((len(u), C))
    if not ok.any():
        return out, ok
    xs, ys = x[ok], y[ok]
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    d = fmap.data
    top = d[y0, x0] * (1 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1 - fx) + d[y1, x1] * fx
    out[ok] = top * (1 - fy) + bot * fy
    return out, ok
