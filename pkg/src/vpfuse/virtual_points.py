"""Virtual points: dense, ordered aggregation locations inside proposals.

Random numbers come from ``numpy.random.Generator`` (PCG64).  Callers pass
the generator explicitly; independent streams are derived with
``numpy.random.SeedSequence.spawn``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, points_in_box, project_points, rotation_z
from .image_features import FeatureMap2D, bilinear_sample_many

DEFAULT_MARGIN = 0.8
MIN_EXTENT = 0.01


@dataclass(frozen=True)
class ResizeConfig:
    """Half-widths of the uniform noise added to each box parameter."""

    u_theta: float = 0.08
    u_xyzwlh: tuple = (0.15, 0.15, 0.15, 0.15, 0.15, 0.15)

    def __post_init__(self):
        u = tuple(float(v) for v in self.u_xyzwlh)
        if len(u) != 6:
            raise ValueError("u_xyzwlh needs six entries (x, y, z, w, l, h)")
        if self.u_theta < 0 or min(u) < 0:
            raise ValueError("noise half-widths must be non-negative")
        object.__setattr__(self, "u_xyzwlh", u)

    @classmethod
    def zero(cls) -> "ResizeConfig":
        return cls(0.0, (0.0,) * 6)

    @property
    def bounds(self) -> np.ndarray:
        return np.array(self.u_xyzwlh + (self.u_theta,))


@dataclass(eq=False)
class VirtualPointSet:
    """Grid points of one proposal, x-major then y then z.

    ``features`` rows are ``[left features | right features | x, y, z]``;
    ``view_flags[:, 0]``/``[:, 1]`` mark points visible in the left/right map.
    """

    proposal: Box3D
    resolution: tuple
    positions: np.ndarray
    features: np.ndarray | None = None
    view_flags: np.ndarray | None = field(default=None)

    def __len__(self):
        return len(self.positions)


def expand_proposal(b: Box3D, margin: float = DEFAULT_MARGIN) -> Box3D:
    """Grow each extent (w, l, h) by ``margin`` in total; center and yaw kept."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return b.replace(w=b.w + margin, l=b.l + margin, h=b.h + margin)


def random_resize(b: Box3D, cfg: ResizeConfig, rng: np.random.Generator) -> Box3D:
    """Add independent uniform noise to all seven parameters.

    Draw order is x, y, z, w, l, h, theta; extents are clamped to >= 1 cm.
    """
    bounds = cfg.bounds
    if not bounds.any():
        return b
    noise = rng.uniform(-bounds, bounds)
    a = b.as_array() + noise
    a[3:6] = np.maximum(a[3:6], MIN_EXTENT)
    return Box3D.from_array(a)


def grid_offsets(b: Box3D, resolution) -> np.ndarray:
    """Cell-center offsets in the box frame, ordered x-major, then y, then z."""
    nx, ny, nz = (int(n) for n in resolution)
    if min(nx, ny, nz) < 1:
        raise ValueError(f"resolution entries must be >= 1, got {resolution}")
    ax = ((np.arange(nx) + 0.5) / nx - 0.5) * b.l
    ay = ((np.arange(ny) + 0.5) / ny - 0.5) * b.w
    az = ((np.arange(nz) + 0.5) / nz - 0.5) * b.h
    gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def generate_virtual_points(b: Box3D, resolution=(16, 8, 22)) -> VirtualPointSet:
    local = grid_offsets(b, resolution)
    positions = local @ rotation_z(b.theta).T + b.center
    return VirtualPointSet(b, tuple(int(n) for n in resolution), positions)


def assemble_features(vps: VirtualPointSet, left: FeatureMap2D, right: FeatureMap2D,
                      calib_left, calib_right) -> VirtualPointSet:
    """Attach sampled left/right image features and the point's own coordinates.

    Points behind a camera or outside its map get zeros in that camera's
    slot and a cleared view flag.
    """
    slots = []
    flags = []
    for fmap, calib in ((left, calib_left), (right, calib_right)):
        uv, _, valid = project_points(vps.positions, calib)
        feats, ok = bilinear_sample_many(fmap, uv[:, 0], uv[:, 1])
        ok &= valid
        feats[~ok] = 0.0
        slots.append(feats)
        flags.append(ok)
    features = np.concatenate(slots + [vps.positions], axis=1)
    return VirtualPointSet(vps.proposal, vps.resolution, vps.positions, features, np.stack(flags, axis=1))


def prepare_proposal(b: Box3D, resize: ResizeConfig | None, rng, margin: float = DEFAULT_MARGIN) -> Box3D:
    """Resize first, then expand."""
    if resize is not None:
        b = random_resize(b, resize, rng)
    return expand_proposal(b, margin)


def foreground_density_ratio(scene, proposals, resolution=(16, 8, 22)) -> float:
    """Virtual points per proposal over the mean LiDAR points inside proposals.

    ``scene`` is anything with a ``cloud`` attribute, or a point cloud / array
    directly.  Proposals without LiDAR points count as one point.
    """
    cloud = getattr(scene, "cloud", scene)
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    proposals = list(proposals)
    if not proposals:
        raise ValueError("need at least one proposal")
    n_virtual = int(np.prod(resolution))
    counts = [max(int(points_in_box(pts, b).sum()), 1) for b in proposals]
    return n_virtual / float(np.mean(counts))
