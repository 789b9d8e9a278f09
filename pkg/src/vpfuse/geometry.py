"""Oriented 3D box algebra in the LiDAR frame.

Frame: x forward, y left, z up.  A box is described by its geometric
center, its extents (``l`` along the heading, ``w`` across it, ``h``
vertical) and its yaw ``theta`` measured counter-clockwise from +x.

Canonical corner order (local frame, before rotation)::

    0: (+l/2, +w/2, -h/2)    4: (+l/2, +w/2, +h/2)
    1: (-l/2, +w/2, -h/2)    5: (-l/2, +w/2, +h/2)
    2: (-l/2, -w/2, -h/2)    6: (-l/2, -w/2, +h/2)
    3: (+l/2, -w/2, -h/2)    7: (+l/2, -w/2, +h/2)

Bottom face first, both faces counter-clockwise seen from above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCamera, DomainError, ValidationError

AREA_EPS = 1e-12
MIN_DEPTH = 1e-6

_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


def angle_diff(a: float, b: float) -> float:
    return normalize_angle(a - b)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.w, self.l, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box parameter in {vals}")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValidationError(f"box extents must be positive, got w={self.w} l={self.l} h={self.h}")
        for name in ("x", "y", "z", "w", "l", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = [float(v) for v in a]
        return cls(*a[:7])

    def replace(self, **kw) -> "Box3D":
        return replace(self, **kw)


@dataclass(frozen=True)
class ProjectedPoint:
    u: float
    v: float
    depth: float


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------- projection


def _image_rows(calib) -> np.ndarray:
    """3x4 matrix mapping homogeneous LiDAR points to (h*u*z, h*v*z, z)."""
    K = np.asarray(calib.K, dtype=np.float64)
    Rt = np.hstack([np.asarray(calib.R, dtype=np.float64), np.asarray(calib.T, dtype=np.float64).reshape(3, 1)])
    P = K @ Rt
    P[:2] *= calib.scale
    return P


def project_point(p, calib) -> ProjectedPoint:
    """Project one LiDAR-frame point into the image of ``calib``.

    The down-sample factor ``calib.scale`` multiplies the pixel coordinates
    only; depth stays metric.  Raises BehindCamera for depth <= 1e-6.
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValidationError("point must be finite")
    q = _image_rows(calib) @ np.append(p, 1.0)
    zc = float(q[2])
    if zc <= MIN_DEPTH:
        raise BehindCamera(f"depth {zc:.3g} m is not in front of the camera")
    return ProjectedPoint(float(q[0] / zc), float(q[1] / zc), zc)


def project_points(points, calib) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns ``(uv, depth, valid)`` where rows with ``valid == False`` sit
    behind the camera and carry NaN pixel coordinates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    P = _image_rows(calib)
    q = pts @ P[:, :3].T + P[:, 3]
    depth = q[:, 2]
    valid = depth > MIN_DEPTH
    uv = np.full((len(pts), 2), np.nan)
    uv[valid] = q[valid, :2] / depth[valid, None]
    return uv, depth, valid


# ------------------------------------------------------------------- corners


def box_corners(b: Box3D) -> np.ndarray:
    half = np.array([b.l, b.w, b.h]) / 2.0
    local = _CORNER_SIGNS * half
    return local @ rotation_z(b.theta).T + b.center


def bev_corners(b: Box3D) -> np.ndarray:
    """Four BEV corners, counter-clockwise."""
    return box_corners(b)[:4, :2]


def points_in_box(points, b: Box3D, eps: float = 0.0) -> np.ndarray:
    """Boolean mask of points (N, >=3) inside the closed box."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    local = to_local(pts[:, :3], b)
    half = np.array([b.l, b.w, b.h]) / 2.0 + eps
    return np.all(np.abs(local) <= half, axis=1)


def to_local(points, b: Box3D) -> np.ndarray:
    """Express points in the box frame (x along the heading)."""
    d = np.asarray(points, dtype=np.float64).reshape(-1, 3) - b.center
    return d @ rotation_z(b.theta)


# ---------------------------------------------------------------------- IoU


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_intersect(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _ordered(a: Box3D, b: Box3D) -> tuple[Box3D, Box3D]:
    # identical arithmetic for (a, b) and (b, a) keeps IoU exactly symmetric
    return (a, b) if tuple(a.as_array()) <= tuple(b.as_array()) else (b, a)


def bev_overlap_area(a: Box3D, b: Box3D) -> float:
    a, b = _ordered(a, b)
    ca, cb = bev_corners(a), bev_corners(b)
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    area = polygon_area(clip_polygon(ca, cb))
    return area if area > AREA_EPS else 0.0


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_overlap_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _z_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.z - a.h / 2, b.z - b.h / 2)
    hi = min(a.z + a.h / 2, b.z + b.h / 2)
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    a, b = _ordered(a, b)
    dz = _z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_overlap_area(a, b) * dz
    if inter <= AREA_EPS:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_1d(a_lo: float, a_hi: float, b_lo: float, b_hi: float) -> float:
    inter = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
    union = (a_hi - a_lo) + (b_hi - b_lo) - inter
    if union <= AREA_EPS:
        return 0.0
    return inter / union


def iou_1d_vertical(a2d, b2d) -> float:
    """IoU of the vertical pixel extents of two (u_min, v_min, u_max, v_max) boxes."""
    return iou_1d(a2d[1], a2d[3], b2d[1], b2d[3])


def iou_2d(a2d, b2d) -> float:
    """Axis-aligned IoU of two (u_min, v_min, u_max, v_max) pixel boxes."""
    iw = max(0.0, min(a2d[2], b2d[2]) - max(a2d[0], b2d[0]))
    ih = max(0.0, min(a2d[3], b2d[3]) - max(a2d[1], b2d[1]))
    inter = iw * ih
    if inter <= AREA_EPS:
        return 0.0
    area_a = (a2d[2] - a2d[0]) * (a2d[3] - a2d[1])
    area_b = (b2d[2] - b2d[0]) * (b2d[3] - b2d[1])
    return inter / (area_a + area_b - inter)


# ----------------------------------------------------------------- residuals


def encode_residual(gt: Box3D, anchor: Box3D) -> np.ndarray:
    """Regression target of ``gt`` relative to ``anchor``.

    Order: (dx, dy, dz, dw, dl, dh, dtheta).  Offsets are normalized by the
    anchor's BEV diagonal, extents are log ratios, yaw is ``sin`` of the
    difference.
    """
    d = math.sqrt(anchor.w ** 2 + anchor.l ** 2)
    return np.array(
        [
            (gt.x - anchor.x) / d,
            (gt.y - anchor.y) / d,
            (gt.z - anchor.z) / d,
            math.log(gt.w / anchor.w),
            math.log(gt.l / anchor.l),
            math.log(gt.h / anchor.h),
            math.sin(gt.theta - anchor.theta),
        ]
    )


def decode_residual(res, anchor: Box3D) -> Box3D:
    """Inverse of :func:`encode_residual` on the arcsin principal branch.

    The recovered yaw is within pi/2 of the anchor's; yaw differences beyond
    that are not recoverable from a sine.
    """
    r = np.asarray(res, dtype=np.float64).reshape(7)
    if abs(r[6]) > 1.0:
        raise DomainError(f"|dtheta| = {abs(r[6]):.6g} exceeds 1")
    d = math.sqrt(anchor.w ** 2 + anchor.l ** 2)
    return Box3D(
        anchor.x + r[0] * d,
        anchor.y + r[1] * d,
        anchor.z + r[2] * d,
        anchor.w * math.exp(r[3]),
        anchor.l * math.exp(r[4]),
        anchor.h * math.exp(r[5]),
        anchor.theta + math.asin(r[6]),
    )


# ------------------------------------------------------------- frame change


@dataclass(frozen=True)
class CameraBox:
    """KITTI camera-frame box: bottom-center location, (h, w, l), rotation_y."""

    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    ry: float


def camera_to_lidar(box_cam: CameraBox, calib) -> Box3D:
    """Re-express a camera-frame box in the LiDAR frame of ``calib``.

    ``calib.R``/``calib.T`` map LiDAR to camera coordinates.  The camera
    frame has y pointing down, so the geometric center sits h/2 above the
    labelled bottom center.  Only yaw-only boxes are representable: R must
    map the LiDAR vertical onto the camera vertical.
    """
    R = np.asarray(calib.R, dtype=np.float64)
    T = np.asarray(calib.T, dtype=np.float64).reshape(3)
    center_cam = np.array([box_cam.x, box_cam.y - box_cam.h / 2.0, box_cam.z])
    center = R.T @ (center_cam - T)
    heading_cam = np.array([math.cos(box_cam.ry), 0.0, -math.sin(box_cam.ry)])
    heading = R.T @ heading_cam
    theta = math.atan2(heading[1], heading[0])
    return Box3D(center[0], center[1], center[2], box_cam.w, box_cam.l, box_cam.h, theta)


def lidar_to_camera(b: Box3D, calib) -> CameraBox:
    R = np.asarray(calib.R, dtype=np.float64)
    T = np.asarray(calib.T, dtype=np.float64).reshape(3)
    c = R @ b.center + T
    heading = R @ np.array([math.cos(b.theta), math.sin(b.theta), 0.0])
    ry = normalize_angle(math.atan2(-heading[2], heading[0]))
    return CameraBox(c[0], c[1] + b.h / 2.0, c[2], b.h, b.w, b.l, ry)


def project_box_2d(b: Box3D, calib, image_size=None):
    """Axis-aligned pixel extent of the projected box corners.

    Returns (u_min, v_min, u_max, v_max) or None when any corner is behind
    the camera.  With ``image_size=(width, height)`` the extent is clipped.
    """
    uv, _, valid = project_points(box_corners(b), calib)
    if not valid.all():
        return None
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    if image_size is not None:
        W, H = image_size
        u0, u1 = np.clip([u0, u1], 0.0, W - 1.0)
        v0, v1 = np.clip([v0, v1], 0.0, H - 1.0)
    return (float(u0), float(v0), float(u1), float(v1))
