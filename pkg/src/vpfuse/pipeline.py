"""Frame loading and the end-to-end fusion pass."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .augmentation import Scene
from .config import PipelineConfig
from .geometry import Box3D
from .heads_losses import Detection, decode_detections, head_forward, nms_bev
from .image_features import FeatureMap2D, backbone_forward
from .kitti_io import (
    LabeledObject,
    WeightBundle,
    load_image,
    load_mask_set,
    load_point_cloud,
    parse_calibration,
    parse_labels,
)
from .sparse_voxel import (
    SparseVoxelGrid,
    VoxelizationConfig,
    roi_pool_batch,
    spconv_stack,
    voxelize,
    voxelize_virtual,
)
from .virtual_points import assemble_features, generate_virtual_points, prepare_proposal

IMAGE_EXTS = (".ppm", ".pgm", ".pnm")


def frame_files(root, fid: str) -> dict:
    root = Path(root)

    def image(sub):
        for ext in IMAGE_EXTS:
            p = root / sub / f"{fid}{ext}"
            if p.exists():
                return p
        return root / sub / f"{fid}.ppm"

    return {
        "calib": root / "calib" / f"{fid}.txt",
        "velodyne": root / "velodyne" / f"{fid}.bin",
        "label": root / "label_2" / f"{fid}.txt",
        "left": image("image_2"),
        "right": image("image_3"),
        "mask_left": root / "mask_2" / f"{fid}.pgm",
        "mask_left_side": root / "mask_2" / f"{fid}.txt",
        "mask_right": root / "mask_3" / f"{fid}.pgm",
        "mask_right_side": root / "mask_3" / f"{fid}.txt",
    }


def list_frames(root) -> list[str]:
    d = Path(root) / "calib"
    return sorted(p.stem for p in d.glob("*.txt")) if d.is_dir() else []


def load_frame(root, fid: str) -> Scene:
    """Read every artifact of one frame.  Masks are optional."""
    f = frame_files(root, fid)
    calib = parse_calibration(f["calib"].read_text())
    cloud = load_point_cloud(f["velodyne"].read_bytes())
    labels = parse_labels(f["label"].read_text(), calib) if f["label"].exists() else []
    left = load_image(f["left"].read_bytes())
    right = load_image(f["right"].read_bytes())
    masks = []
    for key in ("mask_left", "mask_right"):
        if f[key].exists():
            masks.append(load_mask_set(f[key].read_bytes(), f[key + "_side"].read_text()))
        else:
            masks.append([])
    return Scene(cloud, left, right, tuple(masks[0]), tuple(masks[1]), tuple(labels), calib, fid)


def frame_rng(seed: int, fid: str) -> np.random.Generator:
    """Generator that depends only on the seed and the frame id."""
    h = int.from_bytes(hashlib.sha256(fid.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), h]))


def coarser(cfg: VoxelizationConfig, factor: float = 2.0) -> VoxelizationConfig:
    return VoxelizationConfig(tuple(v * factor for v in cfg.voxel_size), cfg.range, cfg.origin,
                              cfg.max_points_per_voxel, cfg.max_voxels)


@dataclass(eq=False)
class FusionResult:
    proposals: list
    prepared: list
    virtual_grid: SparseVoxelGrid
    d0: SparseVoxelGrid
    maps: list
    pooled: np.ndarray
    residuals: np.ndarray
    iou_logits: np.ndarray
    detections: list


def image_features(scene: Scene, weights: WeightBundle, mode: str) -> tuple[FeatureMap2D, FeatureMap2D]:
    if mode == "raw":
        return FeatureMap2D.from_image(scene.left), FeatureMap2D.from_image(scene.right)
    return backbone_forward(scene.left, weights), backbone_forward(scene.right, weights)


def run_fusion(scene: Scene, proposals: Sequence[Box3D], weights: WeightBundle, cfg: PipelineConfig,
               rng: np.random.Generator, lidar_maps: Sequence[SparseVoxelGrid] | None = None) -> FusionResult:
    """Resize, expand, sample virtual points, voxelize, convolve, pool, score, suppress.

    ``lidar_maps`` defaults to the voxelized point cloud at the configured
    LiDAR voxel size and at twice that size.  Detections are decoded
    against the original proposals and kept when their score exceeds the
    score threshold.
    """
    proposals = list(proposals)
    left, right = image_features(scene, weights, cfg.image_mode)
    prepared = [prepare_proposal(b, cfg.resize, rng, cfg.margin) for b in proposals]
    vps = [assemble_features(generate_virtual_points(b, cfg.virtual_resolution), left, right,
                             scene.calib.left, scene.calib.right) for b in prepared]
    c_virtual = left.channels + right.channels + 3
    if vps:
        vgrid = voxelize_virtual(vps, cfg.virtual_voxel)
    else:
        vgrid = SparseVoxelGrid.empty(c_virtual, cfg.virtual_voxel.voxel_size, cfg.virtual_voxel.origin)
    d0 = spconv_stack(vgrid, weights, cfg.spconv_layers)
    if lidar_maps is None:
        lidar_maps = [voxelize(scene.cloud, cfg.lidar_voxel), voxelize(scene.cloud, coarser(cfg.lidar_voxel))]
    maps = [d0] + list(lidar_maps)
    pooled = roi_pool_batch(prepared, maps, cfg.query, cfg.query_resolution, weights)
    if proposals:
        residuals, logits = head_forward(pooled, weights, "main")
        dets = decode_detections(proposals, residuals, logits)
    else:
        residuals, logits, dets = np.zeros((0, 7)), np.zeros(0), []
    dets = [d for d in dets if d.score > cfg.score_threshold]
    dets = nms_bev(dets, cfg.nms_iou)
    return FusionResult(proposals, prepared, vgrid, d0, maps, pooled, residuals, logits, dets)


def detections_to_labels(dets: Sequence[Detection], category: str = "Car", calib=None, width=None,
                         height=None) -> list[LabeledObject]:
    """Label records for detections; the 2D box is the clipped projection when a calibration is given."""
    out = []
    size = None if width is None else (width, height)
    for d in dets:
        box2d = None
        if calib is not None:
            box2d = geometry.project_box_2d(d.box, calib.left, size)
        out.append(LabeledObject(category, d.box, 0, 0.0, box2d or (0.0, 0.0, 0.0, 0.0), -10.0, d.score))
    return out
