"""Scene augmentation: global transforms and multi-modal cut-and-paste.

Cut-and-paste works on stereo-GT triplets: a left mask, the right mask it
was associated with, and the labelled object with its LiDAR points.
Triplets are only pasted into scenes whose calibration is bit-identical to
the donor's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geometry
from .errors import DomainError
from .geometry import Box3D
from .kitti_io import (
    Image,
    LabeledObject,
    MaskInstance,
    PointCloud,
    RunLengthMask,
    StereoCalibration,
    format_calibration,
    format_image,
    format_labels,
    format_mask_set,
    format_point_cloud,
    load_image,
    load_mask_set,
    load_point_cloud,
    parse_calibration,
    parse_labels,
)


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: PointCloud
    left: Image
    right: Image
    masks_left: tuple = ()
    masks_right: tuple = ()
    labels: tuple = ()
    calib: StereoCalibration | None = None
    frame_id: str = ""

    def __post_init__(self):
        for name in ("masks_left", "masks_right", "labels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def calib_signature(self) -> str:
        return self.calib.signature

    def replace(self, **kw) -> "Scene":
        return replace(self, **kw)


@dataclass(frozen=True)
class PasteConfig:
    tau_2d: float = 0.7
    tau_3d: float = 0.0
    n_candidates: int = 100
    n_paste: int = 15
    alpha: float = 1.0
    beta: float = 0.5
    max_cost: float = 1.0
    ground_percentile: float = 5.0

    def __post_init__(self):
        if not (0.0 <= self.tau_2d <= 1.0 and 0.0 <= self.tau_3d <= 1.0):
            raise ValueError("occlusion thresholds must lie in [0, 1]")


@dataclass(frozen=True)
class GlobalAugConfig:
    rotation: tuple = (-math.pi / 2, math.pi / 2)
    flip_prob: float = 0.5
    scale: tuple = (0.95, 1.05)


# ------------------------------------------------------- global transforms


def _map_labels(labels, fn):
    return tuple(lab if lab.box is None else lab.with_box(fn(lab.box)) for lab in labels)


def _with_xyz(cloud: PointCloud, xyz) -> PointCloud:
    pts = np.array(cloud.points)
    pts[:, :3] = xyz
    return PointCloud(pts)


def global_rotate(scene: Scene, angle: float) -> Scene:
    """Rotate points and boxes about the vertical axis."""
    R = geometry.rotation_z(angle)

    def rot(b: Box3D) -> Box3D:
        c = R @ b.center
        return b.replace(x=c[0], y=c[1], z=c[2], theta=b.theta + angle)

    return scene.replace(cloud=_with_xyz(scene.cloud, scene.cloud.xyz @ R.T), labels=_map_labels(scene.labels, rot))


def global_flip(scene: Scene) -> Scene:
    """Mirror across the x axis (y -> -y)."""
    xyz = np.array(scene.cloud.xyz)
    xyz[:, 1] = -xyz[:, 1]
    return scene.replace(cloud=_with_xyz(scene.cloud, xyz),
                         labels=_map_labels(scene.labels, lambda b: b.replace(y=-b.y, theta=-b.theta)))


def global_scale(scene: Scene, factor: float) -> Scene:
    if not (factor > 0 and math.isfinite(factor)):
        raise ValueError(f"scale factor must be positive, got {factor}")

    def scale(b: Box3D) -> Box3D:
        return Box3D(b.x * factor, b.y * factor, b.z * factor, b.w * factor, b.l * factor, b.h * factor, b.theta)

    return scene.replace(cloud=_with_xyz(scene.cloud, scene.cloud.xyz * factor),
                         labels=_map_labels(scene.labels, scale))


def global_augment(scene: Scene, cfg: GlobalAugConfig, rng: np.random.Generator) -> Scene:
    """Flip (with probability), rotate, scale; three draws in that order."""
    flip = rng.uniform() < cfg.flip_prob
    angle = rng.uniform(*cfg.rotation)
    factor = rng.uniform(*cfg.scale)
    if flip:
        scene = global_flip(scene)
    return global_scale(global_rotate(scene, angle), factor)


# -------------------------------------------------------------- association


def stereo_pair_cost(i: MaskInstance, j: MaskInstance, alpha: float = 1.0, beta: float = 0.5) -> float:
    """alpha * |v_i - v_j| / h_i + beta * |s_i - s_j|; normalized by the left height."""
    h_i = i.bbox2d[3]
    if h_i <= 0:
        raise DomainError(f"left instance {i.instance_id} has non-positive height")
    return alpha * abs(i.bbox2d[1] - j.bbox2d[1]) / h_i + beta * abs(i.score - j.score)


def _center_of(box2d) -> tuple[float, float]:
    if isinstance(box2d, LabeledObject):
        box2d = box2d.bbox2d
    u0, v0, u1, v1 = box2d
    return 0.5 * (u0 + u1), 0.5 * (v0 + v1)


def gt_match_cost(k, gt) -> float:
    """|v_k - v_gt| / h_k + |u_k - u_gt| / w_k.

    ``k`` is a stereo pair ``(left, right)`` or its left MaskInstance; its
    left box supplies the center and extents.  ``gt`` is a LabeledObject or a
    (u_min, v_min, u_max, v_max) box.
    """
    left = k[0] if isinstance(k, tuple) else k
    u_k, v_k, w_k, h_k = left.bbox2d
    if w_k <= 0 or h_k <= 0:
        raise DomainError("stereo pair box must have positive extents")
    u_g, v_g = _center_of(gt)
    return abs(v_k - v_g) / h_k + abs(u_k - u_g) / w_k


def hungarian_assign(cost, max_cost: float = math.inf) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment (Kuhn-Munkres, shortest augmenting paths).

    Rectangular inputs behave as if zero-padded to square; pairs landing on
    padding are dropped, as are pairs whose cost exceeds ``max_cost``.
    Returns (row, col) pairs sorted by row.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("cost must be a matrix")
    if a.size == 0:
        return []
    if not np.all(np.isfinite(a)):
        raise ValueError("costs must be finite")
    transposed = a.shape[0] > a.shape[1]
    if transposed:
        a = a.T
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row assigned to column j (1-based, 0 = none)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = []
    for j in range(1, m + 1):
        if p[j]:
            r, c = p[j] - 1, j - 1
            pairs.append((c, r) if transposed else (r, c))
    orig = np.asarray(cost, dtype=np.float64)
    return sorted((r, c) for r, c in pairs if orig[r, c] <= max_cost)


def associate_stereo(left: Sequence[MaskInstance], right: Sequence[MaskInstance], alpha=1.0, beta=0.5,
                     max_cost=1.0) -> list[tuple[MaskInstance, MaskInstance]]:
    usable_left = [m for m in left if m.bbox2d[3] > 0]
    if not usable_left or not right:
        return []
    cost = np.array([[stereo_pair_cost(i, j, alpha, beta) for j in right] for i in usable_left])
    return [(usable_left[r], right[c]) for r, c in hungarian_assign(cost, max_cost)]


def associate_ground_truth(pairs, labels: Sequence[LabeledObject], max_cost=1.0):
    pairs = [p for p in pairs if p[0].bbox2d[2] > 0 and p[0].bbox2d[3] > 0]
    labels = [lab for lab in labels if lab.box is not None]
    if not pairs or not labels:
        return []
    cost = np.array([[gt_match_cost(k, g) for g in labels] for k in pairs])
    return [(pairs[r][0], pairs[r][1], labels[c]) for r, c in hungarian_assign(cost, max_cost)]


# ------------------------------------------------------------- sample bank


@dataclass(frozen=True, eq=False)
class Triplet:
    """One pasteable object.  Pixel arrays follow the row-major order of the mask."""

    left: MaskInstance
    left_pixels: np.ndarray
    right: MaskInstance
    right_pixels: np.ndarray
    label: LabeledObject
    points: np.ndarray
    depth: float
    source: str = ""


@dataclass
class SampleBank:
    triplets: dict = field(default_factory=dict)
    calibs: dict = field(default_factory=dict)

    def entries(self, signature: str) -> list[Triplet]:
        return self.triplets.get(signature, [])

    def add(self, calib: StereoCalibration, triplet: Triplet):
        sig = calib.signature
        self.calibs.setdefault(sig, calib)
        self.triplets.setdefault(sig, []).append(triplet)

    def __len__(self):
        return sum(len(v) for v in self.triplets.values())


def ground_height(cloud: PointCloud, percentile: float = 5.0) -> float:
    if len(cloud) == 0:
        return 0.0
    return float(np.percentile(cloud.xyz[:, 2], percentile))


def _shift_mask(mask: RunLengthMask, du: int, dv: int) -> np.ndarray:
    m = mask.to_array()
    out = np.zeros_like(m)
    H, W = m.shape
    ys, xs = np.nonzero(m)
    ys, xs = ys + dv, xs + du
    ok = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
    out[ys[ok], xs[ok]] = True
    return out, ok


def _pixel_shift(box_from: Box3D, box_to: Box3D, calib) -> tuple[int, int]:
    try:
        a = geometry.project_point(box_from.center, calib)
        b = geometry.project_point(box_to.center, calib)
    except Exception:
        return 0, 0
    return int(round(b.u - a.u)), int(round(b.v - a.v))


def _grounded_instance(inst: MaskInstance, image: Image, du: int, dv: int):
    full = inst.mask.to_array()
    pixels = image.data[full]
    shifted, ok = _shift_mask(inst.mask, du, dv)
    u, v, w, h = inst.bbox2d
    moved = MaskInstance(inst.instance_id, inst.score, (u + du, v + dv, w, h), RunLengthMask.from_array(shifted))
    return moved, pixels[ok]


def build_sample_bank(scenes: Iterable[Scene], cfg: PasteConfig = PasteConfig()) -> SampleBank:
    """Associate stereo masks, match them to labels and cut out the objects.

    Each triplet is moved vertically so its box bottom rests on the donor
    scene's ground height, and its masks are shifted by the matching pixel
    offset in each camera.
    """
    bank = SampleBank()
    for scene in scenes:
        pairs = associate_stereo(scene.masks_left, scene.masks_right, cfg.alpha, cfg.beta, cfg.max_cost)
        triplets = associate_ground_truth(pairs, scene.labels, cfg.max_cost)
        if not triplets:
            continue
        ground = ground_height(scene.cloud, cfg.ground_percentile)
        for left, right, lab in triplets:
            inside = geometry.points_in_box(scene.cloud.points, lab.box)
            if not inside.any():
                continue
            box = lab.box
            dz = ground - (box.z - box.h / 2.0)
            grounded = box.replace(z=box.z + dz)
            pts = np.array(scene.cloud.points[inside])
            pts[:, 2] += dz
            dul, dvl = _pixel_shift(box, grounded, scene.calib.left)
            dur, dvr = _pixel_shift(box, grounded, scene.calib.right)
            new_left, pix_l = _grounded_instance(left, scene.left, dul, dvl)
            new_right, pix_r = _grounded_instance(right, scene.right, dur, dvr)
            if new_left.mask.area == 0 or new_right.mask.area == 0:
                continue
            u0, v0, u1, v1 = lab.bbox2d
            label = LabeledObject(lab.category, grounded, lab.occlusion_level, lab.truncation,
                                  (u0 + dul, v0 + dvl, u1 + dul, v1 + dvl), lab.alpha)
            depth = _camera_depth(grounded, scene.calib.left)
            bank.add(scene.calib, Triplet(new_left, pix_l, new_right, pix_r, label, pts, depth, scene.frame_id))
    return bank


def _camera_depth(box: Box3D, calib) -> float:
    R = np.asarray(calib.R)
    T = np.asarray(calib.T)
    return float((R @ box.center + T)[2])


# ------------------------------------------------------------- occlusion


def occlusion_indicator(candidate, scene_objects) -> tuple[float, float]:
    """Max BEV IoU and max 2D IoU of ``(box, bbox2d)`` against scene objects.

    Objects without a 3D box take part in the 2D indicator only.
    """
    box, b2d = candidate
    i3d = i2d = 0.0
    for other_box, other_2d in scene_objects:
        if other_box is not None and box is not None:
            i3d = max(i3d, geometry.iou_bev(box, other_box))
        i2d = max(i2d, geometry.iou_2d(b2d, other_2d))
    return i3d, i2d


@dataclass
class PasteRecord:
    triplet: Triplet
    i3d: float
    i2d: float
    instance_left: int
    instance_right: int


def cut_n_paste(scene: Scene, bank: SampleBank, cfg: PasteConfig, rng: np.random.Generator) -> Scene:
    return cut_n_paste_logged(scene, bank, cfg, rng)[0]


def cut_n_paste_logged(scene: Scene, bank: SampleBank, cfg: PasteConfig,
                       rng: np.random.Generator) -> tuple[Scene, list[PasteRecord]]:
    """Paste bank objects into ``scene``; also return the admission log.

    Candidates are drawn without replacement and admitted one by one while
    both occlusion indicators stay within their thresholds against the
    scene, including earlier admissions.  Images are composited far to
    near so nearer objects end on top.  Scene points inside a pasted box
    are replaced by the pasted object's points.
    """
    entries = bank.entries(scene.calib_signature) if scene.calib is not None else []
    if not entries:
        return scene, []
    n = min(cfg.n_candidates, len(entries))
    order = rng.choice(len(entries), size=n, replace=False)
    objects = [(lab.box, lab.bbox2d) for lab in scene.labels]
    admitted = []
    for idx in order:
        if len(admitted) >= cfg.n_paste:
            break
        t = entries[int(idx)]
        i3d, i2d = occlusion_indicator((t.label.box, t.label.bbox2d), objects)
        if i3d <= cfg.tau_3d and i2d <= cfg.tau_2d:
            admitted.append((t, i3d, i2d))
            objects.append((t.label.box, t.label.bbox2d))
    if not admitted:
        return scene, []

    pts = scene.cloud.points
    keep = np.ones(len(pts), dtype=bool)
    for t, _, _ in admitted:
        keep &= ~geometry.points_in_box(pts, t.label.box)
    by_depth = sorted(range(len(admitted)), key=lambda k: (admitted[k][0].depth, k))
    new_pts = [pts[keep]] + [admitted[k][0].points for k in by_depth]
    cloud = PointCloud(np.concatenate(new_pts)) if new_pts else scene.cloud

    next_left = max([m.instance_id for m in scene.masks_left], default=0) + 1
    next_right = max([m.instance_id for m in scene.masks_right], default=0) + 1
    ids_l = {k: next_left + k for k in range(len(admitted))}
    ids_r = {k: next_right + k for k in range(len(admitted))}
    far_first = by_depth[::-1]
    left, masks_left = _composite(scene.left, scene.masks_left,
                                  [(ids_l[k], admitted[k][0].left, admitted[k][0].left_pixels) for k in far_first])
    right, masks_right = _composite(scene.right, scene.masks_right,
                                    [(ids_r[k], admitted[k][0].right, admitted[k][0].right_pixels) for k in far_first])
    labels = scene.labels + tuple(t.label for t, _, _ in admitted)
    out = scene.replace(cloud=cloud, left=left, right=right, masks_left=masks_left, masks_right=masks_right,
                        labels=labels)
    log = [PasteRecord(t, i3d, i2d, ids_l[k], ids_r[k]) for k, (t, i3d, i2d) in enumerate(admitted)]
    return out, log


def _composite(image: Image, instances, pastes):
    """Paint ``pastes`` (id, instance, pixels) in order over image and masks."""
    data = np.array(image.data)
    H, W = data.shape[:2]
    raster = np.zeros((H, W), dtype=np.int64)
    for inst in instances:
        raster[inst.mask.to_array()] = inst.instance_id
    meta = {inst.instance_id: inst for inst in instances}
    for new_id, inst, pixels in pastes:
        m = inst.mask.to_array()
        if m.shape != (H, W):
            raise ValueError("pasted mask does not match the target frame size")
        data[m] = pixels
        raster[m] = new_id
        meta[new_id] = MaskInstance(new_id, inst.score, inst.bbox2d, inst.mask)
    out = []
    for iid in sorted(meta):
        inst = meta[iid]
        out.append(MaskInstance(iid, inst.score, inst.bbox2d, RunLengthMask.from_array(raster == iid)))
    return Image(data), tuple(out)


# -------------------------------------------------------- bank persistence


def _crop_rect(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def _save_view(root: Path, stem: str, inst: MaskInstance, pixels: np.ndarray, channels: int):
    m = inst.mask.to_array()
    y0, y1, x0, x1 = _crop_rect(m)
    crop = m[y0:y1, x0:x1]
    local = MaskInstance(1, inst.score, inst.bbox2d, RunLengthMask.from_array(crop))
    pgm, side = format_mask_set([local], crop.shape[1], crop.shape[0])
    (root / f"{stem}.pgm").write_bytes(pgm)
    (root / f"{stem}.txt").write_text(side)
    patch = np.zeros(crop.shape + (channels,))
    patch[crop] = pixels
    (root / f"{stem}.pnm").write_bytes(format_image(Image(patch)))
    return x0, y0


def _load_view(root: Path, stem: str, iid: int, x0: int, y0: int, W: int, H: int):
    local = load_mask_set((root / f"{stem}.pgm").read_bytes(), (root / f"{stem}.txt").read_text())[0]
    crop = local.mask.to_array()
    patch = load_image((root / f"{stem}.pnm").read_bytes()).data
    full = np.zeros((H, W), dtype=bool)
    full[y0:y0 + crop.shape[0], x0:x0 + crop.shape[1]] = crop
    inst = MaskInstance(iid, local.score, local.bbox2d, RunLengthMask.from_array(full))
    return inst, patch[crop]


def save_bank(bank: SampleBank, out_dir) -> None:
    """Write one file set per triplet plus ``index.txt`` keyed by calibration signature."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for sig in sorted(bank.triplets):
        calib = bank.calibs[sig]
        (root / f"calib_{sig}.txt").write_text(format_calibration(calib))
        for k, t in enumerate(bank.triplets[sig]):
            stem = f"{sig}_{k:05d}"
            (root / f"{stem}_points.bin").write_bytes(format_point_cloud(PointCloud(t.points)))
            (root / f"{stem}_label.txt").write_text(format_labels([t.label], calib))
            H, W = t.left.mask.height, t.left.mask.width
            ch = t.left_pixels.shape[1] if t.left_pixels.ndim == 2 else 1
            lx, ly = _save_view(root, f"{stem}_left", t.left, t.left_pixels, ch)
            rx, ry = _save_view(root, f"{stem}_right", t.right, t.right_pixels, ch)
            lines.append(f"{sig} {k} {t.source or '-'} {W} {H} {t.left.instance_id} {lx} {ly} "
                         f"{t.right.instance_id} {rx} {ry} {t.depth!r}")
    (root / "index.txt").write_text("".join(line + "\n" for line in lines))


def load_bank(bank_dir) -> SampleBank:
    root = Path(bank_dir)
    bank = SampleBank()
    calibs = {}
    for line in (root / "index.txt").read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        sig, k, source = tok[0], int(tok[1]), tok[2]
        W, H, lid, lx, ly, rid, rx, ry = (int(v) for v in tok[3:11])
        depth = float(tok[11])
        if sig not in calibs:
            calibs[sig] = parse_calibration((root / f"calib_{sig}.txt").read_text())
        calib = calibs[sig]
        stem = f"{sig}_{k:05d}"
        points = load_point_cloud((root / f"{stem}_points.bin").read_bytes()).points
        label = parse_labels((root / f"{stem}_label.txt").read_text(), calib)[0]
        left, pl = _load_view(root, f"{stem}_left", lid, lx, ly, W, H)
        right, pr = _load_view(root, f"{stem}_right", rid, rx, ry, W, H)
        t = Triplet(left, pl, right, pr, label, np.array(points), depth, "" if source == "-" else source)
        bank.calibs.setdefault(sig, calib)
        bank.triplets.setdefault(sig, []).append(t)
    return bank

