"""Readers and writers for the on-disk formats of a KITTI-style frame.

Every parser is a pure function of its input and returns immutable
objects.  Each reader has a writer counterpart so the formats round-trip.
"""

from __future__ import annotations

import hashlib
import math
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import geometry
from .errors import FormatError, MissingField, MissingWeight, ParseError, TruncatedInput, ValidationError
from .geometry import Box3D, CameraBox


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------- calibration


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """One camera's view of the LiDAR: ``z_c [u, v, 1] = K (R p + T)``.

    ``scale`` is the image down-sample factor applied to pixel coordinates.
    """

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        K = _frozen(self.K).reshape(3, 3)
        R = _frozen(self.R).reshape(3, 3)
        T = _frozen(self.T).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if abs(K[2, 2] - 1.0) > 1e-9:
            raise ValidationError(f"K[2][2] must be 1, got {K[2, 2]}")

    def check_orthonormal(self, tol: float = 1e-6):
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > tol:
            raise ValidationError(f"rotation is not orthonormal (max deviation {err:.3g})")
        return self

    def with_scale(self, scale: float) -> "CalibrationSet":
        return CalibrationSet(self.K, self.R, self.T, scale)


_CALIB_SHAPES = {
    "P0": (3, 4),
    "P1": (3, 4),
    "P2": (3, 4),
    "P3": (3, 4),
    "R0_rect": (3, 3),
    "Tr_velo_to_cam": (3, 4),
    "Tr_imu_to_velo": (3, 4),
}
_CALIB_ALIASES = {"R_rect": "R0_rect", "Tr_velo_cam": "Tr_velo_to_cam", "Tr_imu_velo": "Tr_imu_to_velo"}
_REQUIRED = ("P2", "P3", "R0_rect", "Tr_velo_to_cam")


@dataclass(frozen=True, eq=False)
class StereoCalibration:
    """All records of a KITTI calibration file.

    ``left``/``right`` are the P2/P3 cameras; ``rect`` is the rectified
    reference frame in which labels are expressed.
    """

    records: Mapping[str, np.ndarray]
    left: CalibrationSet = field(init=False)
    right: CalibrationSet = field(init=False)
    rect: CalibrationSet = field(init=False)

    def __post_init__(self):
        recs = {k: _frozen(v).reshape(_CALIB_SHAPES.get(k, np.shape(v))) for k, v in self.records.items()}
        object.__setattr__(self, "records", recs)
        for name in _REQUIRED:
            if name not in recs:
                raise MissingField(f"calibration record {name} missing")
        object.__setattr__(self, "left", self.camera(2))
        object.__setattr__(self, "right", self.camera(3))
        R0, Tr = recs["R0_rect"], recs["Tr_velo_to_cam"]
        rect = CalibrationSet(recs["P2"][:, :3], R0 @ Tr[:, :3], R0 @ Tr[:, 3])
        object.__setattr__(self, "rect", rect)

    def camera(self, index: int) -> CalibrationSet:
        """CalibrationSet of camera ``P{index}`` (the P offset folds into T)."""
        P = self.records[f"P{index}"]
        K = P[:, :3]
        if abs(K[2, 2] - 1.0) > 1e-9:
            raise ValidationError(f"P{index}[2][2] must be 1")
        offset = np.linalg.solve(K, P[:, 3])
        R0, Tr = self.records["R0_rect"], self.records["Tr_velo_to_cam"]
        return CalibrationSet(K, R0 @ Tr[:, :3], R0 @ Tr[:, 3] + offset)

    @property
    def signature(self) -> str:
        """Digest of the canonical text; equal iff every record is bit-equal."""
        return hashlib.sha256(format_calibration(self).encode()).hexdigest()[:16]


def parse_calibration(text: str, ortho_tol: float = 1e-6) -> StereoCalibration:
    records = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"line {lineno}: expected 'NAME: values'")
        name, _, rest = line.partition(":")
        name = _CALIB_ALIASES.get(name.strip(), name.strip())
        try:
            values = [float(t) for t in rest.split()]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        shape = _CALIB_SHAPES.get(name)
        if shape is not None:
            if len(values) != shape[0] * shape[1]:
                raise ParseError(f"{name}: expected {shape[0] * shape[1]} values, got {len(values)}")
            records[name] = np.array(values).reshape(shape)
        else:
            records[name] = np.array(values)
    for name in _REQUIRED:
        if name not in records:
            raise MissingField(f"calibration record {name} missing")
    calib = StereoCalibration(records)
    calib.left.check_orthonormal(ortho_tol)
    calib.right.check_orthonormal(ortho_tol)
    return calib


def format_calibration(calib: StereoCalibration) -> str:
    order = [k for k in _CALIB_SHAPES if k in calib.records]
    order += sorted(k for k in calib.records if k not in _CALIB_SHAPES)
    lines = []
    for name in order:
        vals = " ".join(repr(float(v)) for v in np.asarray(calib.records[name]).ravel())
        lines.append(f"{name}: {vals}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- point cloud


@dataclass(frozen=True, eq=False)
class PointCloud:
    """(N, 4) array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point cloud contains non-finite values")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


def load_point_cloud(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise TruncatedInput(f"{len(data)} bytes is not a whole number of 16-byte points")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise ValidationError("point cloud contains non-finite values")
    return PointCloud(pts.astype(np.float64))


def format_point_cloud(pc: PointCloud) -> bytes:
    return np.ascontiguousarray(pc.points, dtype="<f4").tobytes()


# -------------------------------------------------------------------- labels


@dataclass(frozen=True, eq=False)
class LabeledObject:
    category: str
    box: Box3D | None
    occlusion_level: int = 0
    truncation: float = 0.0
    bbox2d: tuple = (0.0, 0.0, 0.0, 0.0)
    alpha: float = -10.0
    score: float | None = None
    # camera-frame record this box was parsed from, with the rectified R and T used
    source_record: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        u0, v0, u1, v1 = (float(v) for v in self.bbox2d)
        if u0 > u1 or v0 > v1:
            raise ValidationError(f"degenerate 2D box {self.bbox2d}")
        object.__setattr__(self, "bbox2d", (u0, v0, u1, v1))

    @property
    def height_px(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def with_box(self, box: Box3D) -> "LabeledObject":
        return LabeledObject(self.category, box, self.occlusion_level, self.truncation,
                             self.bbox2d, self.alpha, self.score)


def _default_rect() -> CalibrationSet:
    # nominal KITTI axes: x_cam = -y_lidar, y_cam = -z_lidar, z_cam = x_lidar
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return CalibrationSet(np.eye(3), R, np.zeros(3))


def _rect_of(calib) -> CalibrationSet:
    if calib is None:
        return _default_rect()
    if isinstance(calib, StereoCalibration):
        return calib.rect
    return calib


def parse_labels(text: str, calib=None) -> list[LabeledObject]:
    """Parse KITTI label lines (15 fields, or 16 with a trailing score).

    Boxes are converted to the LiDAR frame through ``calib`` (a
    StereoCalibration or a CalibrationSet of the rectified frame; None means
    the nominal KITTI axis permutation).  Records with non-positive extents,
    such as DontCare regions, keep ``box=None``.
    """
    rect = _rect_of(calib)
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) not in (15, 16):
            raise ParseError(f"line {lineno}: expected 15 or 16 fields, got {len(tok)}")
        try:
            nums = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        trunc, occ, alpha = nums[0], nums[1], nums[2]
        bbox = tuple(nums[3:7])
        h, w, l = nums[7:10]
        x, y, z, ry = nums[10:14]
        score = nums[14] if len(nums) == 15 else None
        box = None
        if h > 0 and w > 0 and l > 0:
            cam = CameraBox(x, y, z, h, w, l, ry)
            box = geometry.camera_to_lidar(cam, rect)
            record = (box, cam, np.array(rect.R), np.array(rect.T))
        else:
            record = None
        out.append(LabeledObject(tok[0], box, int(occ), trunc, bbox, alpha, score, record))
    return out


def _same_source(obj: LabeledObject, rect: CalibrationSet) -> bool:
    rec = obj.source_record
    return (rec is not None and rec[0] is obj.box and np.array_equal(rec[2], rect.R)
            and np.array_equal(rec[3], rect.T))


def format_labels(objects: Iterable[LabeledObject], calib=None) -> str:
    rect = _rect_of(calib)
    lines = []
    for obj in objects:
        if obj.box is None:
            cam = CameraBox(-1000.0, -1000.0, -1000.0, -1.0, -1.0, -1.0, -10.0)
        elif _same_source(obj, rect):
            # reuse the parsed numbers so untouched labels are rewritten byte for byte
            cam = obj.source_record[1]
        else:
            cam = geometry.lidar_to_camera(obj.box, rect)
        fields = [obj.category, repr(float(obj.truncation)), str(int(obj.occlusion_level)), repr(float(obj.alpha))]
        fields += [repr(float(v)) for v in obj.bbox2d]
        fields += [repr(float(v)) for v in (cam.h, cam.w, cam.l, cam.x, cam.y, cam.z, cam.ry)]
        if obj.score is not None:
            fields.append(repr(float(obj.score)))
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


# -------------------------------------------------------------------- images


@dataclass(frozen=True, eq=False)
class Image:
    """Pixel values in [0, 1], stored as an (height, width, channels) array."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3:
            raise ValidationError(f"image data must be 2D or 3D, got shape {d.shape}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


_PNM_HEADER = re.compile(rb"\A(P[56])(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def _parse_pnm(data: bytes) -> tuple[np.ndarray, int]:
    m = _PNM_HEADER.match(data)
    if m is None:
        raise FormatError("not a binary PPM (P6) or PGM (P5) stream")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = w * h * channels
    body = data[m.end():]
    if len(body) < n * dtype.itemsize:
        raise TruncatedInput(f"raster needs {n * dtype.itemsize} bytes, got {len(body)}")
    raster = np.frombuffer(body, dtype=dtype, count=n).reshape(h, w, channels)
    return raster, maxval


def _format_pnm(raster: np.ndarray, maxval: int) -> bytes:
    h, w, c = raster.shape
    magic = b"P6" if c == 3 else b"P5"
    if c not in (1, 3):
        raise ValidationError(f"PNM supports 1 or 3 channels, got {c}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    return b"%s\n%d %d\n%d\n" % (magic, w, h, maxval) + np.ascontiguousarray(raster, dtype=dtype).tobytes()


def load_image(data: bytes) -> Image:
    raster, maxval = _parse_pnm(data)
    return Image(raster.astype(np.float64) / maxval)


def format_image(img: Image) -> bytes:
    raster = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _format_pnm(raster, 255)


# --------------------------------------------------------------------- masks


@dataclass(frozen=True, eq=False)
class RunLengthMask:
    """Binary raster as (start, length) runs over the row-major flattening."""

    height: int
    width: int
    runs: tuple = ()

    @classmethod
    def from_array(cls, mask) -> "RunLengthMask":
        m = np.asarray(mask, dtype=bool)
        flat = np.concatenate([[False], m.ravel(), [False]])
        edges = np.flatnonzero(flat[1:] != flat[:-1])
        starts, ends = edges[::2], edges[1::2]
        return cls(m.shape[0], m.shape[1], tuple(zip(starts.tolist(), (ends - starts).tolist())))

    def to_array(self) -> np.ndarray:
        flat = np.zeros(self.height * self.width, dtype=bool)
        for s, n in self.runs:
            flat[s:s + n] = True
        return flat.reshape(self.height, self.width)

    @property
    def area(self) -> int:
        return sum(n for _, n in self.runs)

    def __eq__(self, other):
        if not isinstance(other, RunLengthMask):
            return NotImplemented
        return (self.height, self.width, self.runs) == (other.height, other.width, other.runs)

    def __hash__(self):
        return hash((self.height, self.width, self.runs))


@dataclass(frozen=True, eq=False)
class MaskInstance:
    """One segmented instance; ``bbox2d`` is (center u, center v, width, height)."""

    instance_id: int
    score: float
    bbox2d: tuple
    mask: RunLengthMask

    def __post_init__(self):
        if int(self.instance_id) < 1:
            raise ValidationError(f"instance id must be positive, got {self.instance_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"instance score {self.score} outside [0, 1]")
        object.__setattr__(self, "instance_id", int(self.instance_id))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "bbox2d", tuple(float(v) for v in self.bbox2d))

    @property
    def corners2d(self) -> tuple:
        u, v, w, h = self.bbox2d
        return (u - w / 2, v - h / 2, u + w / 2, v + h / 2)


def _parse_sidecar(text: str) -> list[tuple]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 6:
            raise ParseError(f"sidecar line {lineno}: expected 'id score u v w h'")
        try:
            iid = int(tok[0])
            vals = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise ParseError(f"sidecar line {lineno}: {exc}") from None
        rows.append((iid, vals[0], tuple(vals[1:])))
    return rows


def load_mask_set(raster_bytes: bytes, sidecar_text: str) -> list[MaskInstance]:
    """Instance raster (pixel value = instance id, 0 background) plus sidecar.

    Sidecar entries without pixels are kept with an empty mask; raster ids
    missing from the sidecar are an error.
    """
    raster, _ = _parse_pnm(raster_bytes)
    if raster.shape[2] != 1:
        raise FormatError("mask raster must be a single-channel PGM")
    ids = raster[:, :, 0].astype(np.int64)
    rows = _parse_sidecar(sidecar_text)
    seen = [r[0] for r in rows]
    if len(set(seen)) != len(seen):
        raise ValidationError("duplicate instance id in sidecar")
    present = set(np.unique(ids).tolist()) - {0}
    missing = present - set(seen)
    if missing:
        raise ValidationError(f"raster ids {sorted(missing)} absent from sidecar")
    return [MaskInstance(iid, score, box, RunLengthMask.from_array(ids == iid)) for iid, score, box in rows]


def format_mask_set(instances: list[MaskInstance], width: int, height: int) -> tuple[bytes, str]:
    ids = np.zeros((height, width), dtype=np.int64)
    for inst in instances:
        m = inst.mask.to_array()
        if m.shape != (height, width):
            raise ValidationError(f"mask shape {m.shape} does not match frame {(height, width)}")
        if np.any(ids[m] != 0):
            raise ValidationError("instance masks overlap; a single raster cannot hold them")
        ids[m] = inst.instance_id
    maxval = 255 if ids.max(initial=0) < 256 else 65535
    pgm = _format_pnm(ids[:, :, None], maxval)
    side = "".join(
        f"{inst.instance_id} {inst.score!r} " + " ".join(repr(float(v)) for v in inst.bbox2d) + "\n"
        for inst in instances
    )
    return pgm, side


# ------------------------------------------------------------------- weights

WEIGHTS_MAGIC = b"VPFW1\n"


class WeightBundle(Mapping):
    """Named float tensors.  Lookup of an absent name raises MissingWeight."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._t = {}
        for name, arr in (tensors or {}).items():
            self._t[name] = _frozen(arr)

    @classmethod
    def from_flat(cls, entries: Mapping[str, tuple]) -> "WeightBundle":
        """Build from ``name -> (shape, values)`` with count validation."""
        out = {}
        for name, (shape, values) in entries.items():
            values = np.asarray(values, dtype=np.float64).ravel()
            if int(np.prod(shape, dtype=np.int64)) != values.size:
                raise ValidationError(f"{name}: shape {tuple(shape)} needs {int(np.prod(shape))} values, got {values.size}")
            out[name] = values.reshape(shape)
        return cls(out)

    def __getitem__(self, name):
        try:
            return self._t[name]
        except KeyError:
            raise MissingWeight(name) from None

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def subset(self, prefix: str) -> "WeightBundle":
        return WeightBundle({k: v for k, v in self._t.items() if k.startswith(prefix)})


def load_weights(data: bytes) -> WeightBundle:
    if not data.startswith(WEIGHTS_MAGIC):
        raise FormatError("weight bundle must start with VPFW1 magic")
    pos = len(WEIGHTS_MAGIC)
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedInput(f"weight bundle truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not UTF-8: {exc}") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        remaining = (len(data) - pos) // 4
        if count > remaining:
            raise ValidationError(f"{name}: shape {dims} needs {count} values, only {remaining} present")
        if name in tensors:
            raise ValidationError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float64).reshape(dims)
    return WeightBundle(tensors)


def format_weights(bundle: Mapping[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC]
    for name, arr in bundle.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)
