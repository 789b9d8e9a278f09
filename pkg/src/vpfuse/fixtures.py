"""Synthetic KITTI-like frames for tests, benchmarks and the CLI demo.

Scenes hold cars resting on a flat ground plane.  LiDAR returns come from
ray casting a 64-beam scanner (elevation +2 to -24.9 degrees, 0.17 degree
azimuth step) restricted to the camera field of view; each car reflects
only a random fraction of the rays that hit it, which mimics dark paint
and keeps per-object point counts near real KITTI statistics.  Images
are rendered with one flat color per car over a noisy background, and
instance masks are the visible parts of each car's projected hull.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .augmentation import Scene
from .geometry import Box3D
from .kitti_io import (
    Image,
    LabeledObject,
    MaskInstance,
    PointCloud,
    RunLengthMask,
    StereoCalibration,
    WeightBundle,
    format_calibration,
    format_image,
    format_labels,
    format_mask_set,
    format_point_cloud,
    format_weights,
)

IMAGE_SIZE = (416, 128)  # width, height
FOCAL = 240.0
GROUND_Z = -1.73
BASELINE = 0.54


@dataclass(frozen=True)
class FixtureConfig:
    image_size: tuple = IMAGE_SIZE
    focal: float = FOCAL
    n_cars: tuple = (3, 7)
    distance: tuple = (6.0, 50.0)
    reflect_prob: tuple = (0.2, 0.6)
    n_beams: int = 64
    elevation: tuple = (2.0, -24.9)
    azimuth_step: float = 0.17
    max_range: float = 80.0
    render_images: bool = True


def make_calibration(focal: float = FOCAL, image_size=IMAGE_SIZE, variant: int = 0) -> StereoCalibration:
    """KITTI-shaped calibration records.  ``variant`` perturbs the principal point,
    giving a distinct signature for cross-calibration tests."""
    W, H = image_size
    cu, cv = W / 2.0 + 0.5 * variant, H / 2.0 - 2.0
    P2 = np.array([[focal, 0.0, cu, focal * 0.06], [0.0, focal, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    P3 = np.array([[focal, 0.0, cu, -focal * (BASELINE - 0.06)], [0.0, focal, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    a = 0.004
    R0 = np.array([[math.cos(a), 0.0, math.sin(a)], [0.0, 1.0, 0.0], [-math.sin(a), 0.0, math.cos(a)]])
    Tr = np.array([[0.0, -1.0, 0.0, -0.004], [0.0, 0.0, -1.0, -0.076], [1.0, 0.0, 0.0, -0.27]])
    return StereoCalibration({"P0": P2, "P1": P3, "P2": P2, "P3": P3, "R0_rect": R0, "Tr_velo_to_cam": Tr})


def _hfov(cfg: FixtureConfig) -> float:
    return math.atan(cfg.image_size[0] / 2.0 / cfg.focal)


def random_cars(rng: np.random.Generator, cfg: FixtureConfig = FixtureConfig(), n: int | None = None) -> list[Box3D]:
    n = int(rng.integers(cfg.n_cars[0], cfg.n_cars[1] + 1)) if n is None else n
    half = _hfov(cfg) * 0.8
    cars: list[Box3D] = []
    tries = 0
    while len(cars) < n and tries < 200 * max(n, 1):
        tries += 1
        x = rng.uniform(*cfg.distance)
        y = math.tan(rng.uniform(-half, half)) * x
        w, l, h = rng.uniform(1.5, 1.8), rng.uniform(3.5, 4.5), rng.uniform(1.4, 1.6)
        b = Box3D(x, y, GROUND_Z + h / 2.0, w, l, h, rng.uniform(-math.pi, math.pi))
        if all(geometry.iou_bev(b.replace(w=w + 0.6, l=l + 0.6), c) == 0.0 for c in cars):
            cars.append(b)
    return cars


def _ray_box_hits(origins, dirs, b: Box3D):
    """Entry distance of each ray into box ``b`` (inf when missed)."""
    R = geometry.rotation_z(b.theta)
    o = (origins - b.center) @ R
    d = dirs @ R
    half = np.array([b.l, b.w, b.h]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def cast_lidar(cars, rng: np.random.Generator, cfg: FixtureConfig = FixtureConfig(), reflect=None) -> np.ndarray:
    """Ray-cast scan from the sensor origin; returns (N, 4) points."""
    half = math.degrees(_hfov(cfg)) + 2.0
    az = np.radians(np.arange(-half, half + 1e-9, cfg.azimuth_step))
    el = np.radians(np.linspace(cfg.elevation[0], cfg.elevation[1], cfg.n_beams))
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origins = np.zeros_like(dirs)
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, GROUND_Z / dirs[:, 2], np.inf)
    best = t_ground.copy()
    owner = np.full(len(dirs), -1)
    for k, b in enumerate(cars):
        t = _ray_box_hits(origins, dirs, b)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = k
    keep = best <= cfg.max_range
    if reflect is None:
        reflect = rng.uniform(*cfg.reflect_prob, size=len(cars))
    u = rng.uniform(size=len(dirs))
    for k in range(len(cars)):
        keep &= ~((owner == k) & (u >= reflect[k]))
    pts = dirs[keep] * best[keep, None]
    pts += rng.normal(0.0, 0.005, size=pts.shape)
    inten = rng.uniform(0.0, 1.0, size=(len(pts), 1))
    return np.concatenate([pts, inten], axis=1)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    p = sorted(map(tuple, pts))
    if len(p) <= 2:
        return np.array(p)

    def half(seq):
        out = []
        for q in seq:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (q[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (q[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(q)
        return out

    lower, upper = half(p), half(p[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _hull_mask(b: Box3D, calib, W: int, H: int) -> np.ndarray | None:
    corners = geometry.box_corners(b)
    uv, depth, valid = geometry.project_points(corners, calib)
    if not valid.all():
        return None
    hull = _convex_hull(uv)
    u0, v0 = np.floor(hull.min(axis=0)).astype(int)
    u1, v1 = np.ceil(hull.max(axis=0)).astype(int)
    u0, v0, u1, v1 = max(u0, 0), max(v0, 0), min(u1, W - 1), min(v1, H - 1)
    mask = np.zeros((H, W), dtype=bool)
    if u0 > u1 or v0 > v1:
        return mask
    ys, xs = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    px, py = xs + 0.5, ys + 0.5
    inside = np.ones(px.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        a, c = hull[i], hull[(i + 1) % n]
        inside &= (c[0] - a[0]) * (py - a[1]) - (c[1] - a[1]) * (px - a[0]) >= 0
    mask[v0:v1 + 1, u0:u1 + 1] = inside
    return mask


def _full_hull_area(b: Box3D, calib) -> float:
    uv, _, valid = geometry.project_points(geometry.box_corners(b), calib)
    if not valid.all():
        return 0.0
    return geometry.polygon_area(_convex_hull(uv))


def _render(cars, calib, cfg, rng, colors, scores):
    """Image, instance masks and visible fractions for one camera (far to near painting)."""
    W, H = cfg.image_size
    rows = np.linspace(0.35, 0.65, H)[:, None, None]
    img = np.broadcast_to(rows, (H, W, 3)) + rng.uniform(-0.05, 0.05, size=(H, W, 3))
    img = np.array(img)
    raster = np.zeros((H, W), dtype=np.int64)
    depth = [float((calib.R @ c.center + calib.T)[2]) for c in cars]
    for k in sorted(range(len(cars)), key=lambda k: -depth[k]):
        m = _hull_mask(cars[k], calib, W, H)
        if m is None:
            continue
        img[m] = colors[k]
        raster[m] = k + 1
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    masks = []
    for k in range(len(cars)):
        m = raster == k + 1
        if not m.any():
            continue
        ys, xs = np.nonzero(m)
        u0, u1, v0, v1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        bbox = ((u0 + u1) / 2.0, (v0 + v1) / 2.0, float(u1 - u0), float(v1 - v0))
        masks.append(MaskInstance(k + 1, scores[k], bbox, RunLengthMask.from_array(m)))
    return Image(img), masks, raster


def make_scene(rng: np.random.Generator, cfg: FixtureConfig = FixtureConfig(), calib=None, frame_id: str = "",
               cars=None) -> Scene:
    calib = make_calibration(cfg.focal, cfg.image_size) if calib is None else calib
    cars = random_cars(rng, cfg) if cars is None else list(cars)
    points = cast_lidar(cars, rng, cfg)
    W, H = cfg.image_size
    colors = rng.uniform(0.0, 1.0, size=(len(cars), 3))
    scores = np.round(rng.uniform(0.6, 0.99, size=len(cars)), 3)
    if cfg.render_images:
        left, masks_l, raster_l = _render(cars, calib.left, cfg, rng, colors, scores)
        right, masks_r, _ = _render(cars, calib.right, cfg, rng, colors, np.clip(scores - 0.01, 0, 1))
    else:
        left = right = Image(np.zeros((H, W, 3)))
        masks_l, masks_r, raster_l = [], [], np.zeros((H, W), dtype=np.int64)
    labels = []
    for k, b in enumerate(cars):
        box2d = geometry.project_box_2d(b, calib.left, (W, H))
        if box2d is None:
            continue
        full = _full_hull_area(b, calib.left)
        visible = float((raster_l == k + 1).sum())
        frac = visible / full if full > 0 else 0.0
        occ = 0 if frac > 0.8 else 1 if frac > 0.5 else 2 if frac > 0.1 else 3
        unclipped = geometry.project_box_2d(b, calib.left)
        area_all = (unclipped[2] - unclipped[0]) * (unclipped[3] - unclipped[1])
        area_in = (box2d[2] - box2d[0]) * (box2d[3] - box2d[1])
        trunc = 0.0 if area_all <= 0 else round(1.0 - area_in / area_all, 2)
        labels.append(LabeledObject("Car", b, occ, trunc, box2d))
    return Scene(PointCloud(points), left, right, tuple(masks_l), tuple(masks_r), tuple(labels), calib, frame_id)


def write_frame(root, scene: Scene) -> None:
    """Write one scene in the dataset layout used by the CLI."""
    root = Path(root)
    fid = scene.frame_id
    for sub in ("calib", "velodyne", "label_2", "image_2", "image_3", "mask_2", "mask_3"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "calib" / f"{fid}.txt").write_text(format_calibration(scene.calib))
    (root / "velodyne" / f"{fid}.bin").write_bytes(format_point_cloud(scene.cloud))
    (root / "label_2" / f"{fid}.txt").write_text(format_labels(scene.labels, scene.calib))
    (root / "image_2" / f"{fid}.ppm").write_bytes(format_image(scene.left))
    (root / "image_3" / f"{fid}.ppm").write_bytes(format_image(scene.right))
    for sub, img, masks in (("mask_2", scene.left, scene.masks_left), ("mask_3", scene.right, scene.masks_right)):
        pgm, side = format_mask_set(list(masks), img.width, img.height)
        (root / sub / f"{fid}.pgm").write_bytes(pgm)
        (root / sub / f"{fid}.txt").write_text(side)


def write_dataset(root, n_frames: int = 4, seed: int = 0, cfg: FixtureConfig = FixtureConfig()) -> list[str]:
    ids = []
    children = np.random.SeedSequence(seed).spawn(n_frames)
    for i, ss in enumerate(children):
        fid = f"{i:06d}"
        write_frame(root, make_scene(np.random.default_rng(ss), cfg, frame_id=fid))
        ids.append(fid)
    return ids


# ------------------------------------------------------------------ weights


def _mlp_layers(rng, prefix, dims, scale):
    out = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out[f"{prefix}.{i}.weight"] = rng.normal(0.0, scale / math.sqrt(a), size=(b, a))
        out[f"{prefix}.{i}.bias"] = np.zeros(b)
    return out


def make_weights(rng: np.random.Generator, image_channels: int = 3, feat_channels: int = 4,
                 spconv_channels: int = 8, lidar_channels: int = 4, pool_channels: int = 4,
                 n_scales: int = 2, grid_res=(6, 6, 6), n_spconv: int = 2, hidden: int = 32,
                 zero: bool = False) -> WeightBundle:
    """A complete random (or all-zero) bundle for the fusion pipeline.

    Map 0 is the virtual-point map after the sparse stack; maps 1 and 2 are
    LiDAR maps whose features are mean (x, y, z, intensity).
    """
    s = 0.0 if zero else 1.0
    w = {}
    chans = [image_channels, 8, 8, 8, feat_channels]
    for i in range(4):
        w[f"conv{i + 1}.weight"] = s * rng.normal(0.0, 1.0 / math.sqrt(9 * chans[i]), size=(chans[i + 1], chans[i], 3, 3))
        w[f"conv{i + 1}.bias"] = np.zeros(chans[i + 1])
    c_in = 2 * feat_channels + 3
    for i in range(n_spconv):
        a = c_in if i == 0 else spconv_channels
        w[f"spconv{i + 1}.weight"] = s * rng.normal(0.0, 1.0 / math.sqrt(27 * a), size=(spconv_channels, a, 3, 3, 3))
        w[f"spconv{i + 1}.bias"] = np.zeros(spconv_channels)
    map_channels = [spconv_channels, lidar_channels, lidar_channels]
    for m, c in enumerate(map_channels):
        for sc in range(n_scales):
            w.update({k: s * v for k, v in _mlp_layers(rng, f"pool.m{m}.s{sc}.psi1", (3, pool_channels), 1.0).items()})
            w.update({k: s * v for k, v in _mlp_layers(rng, f"pool.m{m}.s{sc}.psi2", (c, pool_channels), 1.0).items()})
    D = int(np.prod(grid_res)) * len(map_channels) * n_scales * pool_channels
    for branch in ("main", "aux"):
        w[f"head.{branch}.fc0.weight"] = s * rng.normal(0.0, 1.0 / math.sqrt(D), size=(hidden, D))
        w[f"head.{branch}.fc0.bias"] = np.zeros(hidden)
        w[f"head.{branch}.reg.weight"] = s * rng.normal(0.0, 0.1 / math.sqrt(hidden), size=(7, hidden))
        w[f"head.{branch}.reg.bias"] = np.zeros(7)
    w["head.main.iou.weight"] = s * rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(1, hidden))
    w["head.main.iou.bias"] = np.zeros(1)
    # the bundle file stores float32; round now so in-memory and on-disk bundles agree
    return WeightBundle({k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in w.items()})


def write_weights(path, bundle: WeightBundle) -> None:
    Path(path).write_bytes(format_weights(bundle))


def jitter_proposals(boxes, rng: np.random.Generator, sigma=(0.3, 0.3, 0.1, 0.1, 0.2, 0.05, 0.1)) -> list[Box3D]:
    out = []
    for b in boxes:
        a = b.as_array() + rng.normal(0.0, 1.0, size=7) * np.asarray(sigma)
        a[3:6] = np.maximum(a[3:6], 0.5)
        out.append(Box3D.from_array(a))
    return out
