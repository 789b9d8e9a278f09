"""KITTI-style scoring: difficulty buckets, greedy matching, 40-point AP,
and the vertical 1D IoU study of projected boxes."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .geometry import Box3D

# public KITTI object benchmark thresholds: (min 2D height px, max occlusion, max truncation)
DIFFICULTY_LIMITS = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
# classes whose boxes are neither required nor penalized for a given target class
NEIGHBOR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}
METRICS = ("iou_3d", "iou_bev")


class Difficulty(enum.Enum):
    EASY = "easy"
    MODERATE = "moderate"
    HARD = "hard"
    IGNORED = "ignored"


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    recall_positions: int = 40
    category: str = "Car"
    difficulties: tuple = ("easy", "moderate", "hard")
    metrics: tuple = METRICS

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.recall_positions < 1:
            raise ValueError("recall_positions must be >= 1")


@dataclass(frozen=True, eq=False)
class PRCurve:
    """Interpolated precision at each recall position; ``ap`` is None without ground truth."""

    recall: np.ndarray
    precision: np.ndarray
    ap: float | None
    n_gt: int = 0


def _meets(obj, level: str) -> bool:
    min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[level]
    return obj.height_px >= min_h and obj.occlusion_level <= max_occ and obj.truncation <= max_trunc


def difficulty_bucket(obj) -> Difficulty:
    """Easiest bucket the object qualifies for."""
    for d in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        if _meets(obj, d.value):
            return d
    return Difficulty.IGNORED


@dataclass(frozen=True, eq=False)
class MatchResult:
    """``det_flags``: 1 true positive, 0 false positive, -1 ignored (input order)."""

    det_flags: np.ndarray
    gt_matched: np.ndarray
    gt_ignored: np.ndarray
    scores: np.ndarray

    @property
    def n_tp(self) -> int:
        return int((self.det_flags == 1).sum())

    @property
    def n_gt(self) -> int:
        return int((~self.gt_ignored).sum())


def _box_of(x) -> Box3D:
    return x if isinstance(x, Box3D) else x.box


def _score_of(x) -> float:
    s = getattr(x, "score", None)
    return 0.0 if s is None else float(s)


def _gt_ignored(gts, cfg: EvalConfig, difficulty: str | None):
    """Keep target-class and neighbor-class ground truth; flag the ones not to be scored."""
    kept, ignored = [], []
    for g in gts:
        if isinstance(g, Box3D):
            kept.append(g)
            ignored.append(False)
            continue
        if g.box is None:
            continue
        if g.category == cfg.category:
            kept.append(g.box)
            ignored.append(difficulty is not None and not _meets(g, difficulty))
        elif g.category in NEIGHBOR_CLASSES.get(cfg.category, ()):
            kept.append(g.box)
            ignored.append(True)
    return kept, np.array(ignored, dtype=bool)


def match_detections(dets, gts, cfg: EvalConfig = EvalConfig(), metric: str = "iou_3d",
                     difficulty: str | None = None) -> MatchResult:
    """Greedy matching in descending score order (ties keep input order).

    Each detection takes the unmatched scored ground truth of highest IoU
    at or above the threshold.  Failing that, a match to an ignored ground
    truth makes the detection ignored rather than a false positive.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    iou = geometry.iou_3d if metric == "iou_3d" else geometry.iou_bev
    boxes, ignored = _gt_ignored(gts, cfg, difficulty)
    scores = np.array([_score_of(d) for d in dets], dtype=np.float64)
    flags = np.zeros(len(dets), dtype=np.int64)
    matched = np.zeros(len(boxes), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: -scores[i])
    for i in order:
        db = _box_of(dets[i])
        best = {False: (-1, -1.0), True: (-1, -1.0)}
        for j, gb in enumerate(boxes):
            if matched[j]:
                continue
            v = iou(db, gb)
            if v >= cfg.iou_threshold and v > best[bool(ignored[j])][1]:
                best[bool(ignored[j])] = (j, v)
        if best[False][0] >= 0:
            matched[best[False][0]] = True
            flags[i] = 1
        elif best[True][0] >= 0:
            matched[best[True][0]] = True
            flags[i] = -1
    return MatchResult(flags, matched, ignored, scores)


def ap_from_matches(matches: Sequence[MatchResult], recall_positions: int = 40) -> PRCurve:
    """Right-max interpolated precision at recall i / R, i = 1..R, averaged."""
    n_gt = sum(m.n_gt for m in matches)
    r_samples = np.arange(1, recall_positions + 1) / recall_positions
    if n_gt == 0:
        return PRCurve(r_samples, np.zeros(recall_positions), None, 0)
    scores = np.concatenate([m.scores[m.det_flags >= 0] for m in matches] + [np.zeros(0)])
    tp = np.concatenate([m.det_flags[m.det_flags >= 0] == 1 for m in matches] + [np.zeros(0, bool)])
    if len(scores) == 0:
        return PRCurve(r_samples, np.zeros(recall_positions), 0.0, n_gt)
    # cumulative counts at each distinct score threshold, highest first
    thresholds, inverse = np.unique(-scores, return_inverse=True)
    tp_at = np.bincount(inverse, weights=tp.astype(np.float64), minlength=len(thresholds))
    all_at = np.bincount(inverse, minlength=len(thresholds)).astype(np.float64)
    ctp = np.cumsum(tp_at)
    call = np.cumsum(all_at)
    recall = ctp / n_gt
    precision = ctp / call
    # right-max: best precision at any recall >= r
    best_right = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, r_samples - 1e-12, side="left")
    sampled = np.where(idx < len(recall), best_right[np.minimum(idx, len(recall) - 1)], 0.0)
    return PRCurve(r_samples, sampled, float(sampled.sum() / recall_positions), n_gt)


def ap40(frames, cfg: EvalConfig = EvalConfig(), metric: str = "iou_3d", difficulty: str | None = None) -> PRCurve:
    """``frames`` is a sequence of (detections, ground truths) per frame."""
    matches = [match_detections(d, g, cfg, metric, difficulty) for d, g in frames]
    return ap_from_matches(matches, cfg.recall_positions)


@dataclass(frozen=True)
class ReportRow:
    category: str
    difficulty: str
    metric: str
    ap: float | None

    def format(self) -> str:
        ap = "absent" if self.ap is None else f"{100.0 * self.ap:.4f}"
        return f"{self.category} {self.difficulty} {self.metric} {ap}"


def evaluate(frames, cfg: EvalConfig = EvalConfig()) -> list[ReportRow]:
    frames = list(frames)
    rows = []
    for diff in cfg.difficulties:
        for metric in cfg.metrics:
            rows.append(ReportRow(cfg.category, diff, metric, ap40(frames, cfg, metric, diff).ap))
    return rows


def format_report(rows: Sequence[ReportRow]) -> str:
    return "".join(r.format() + "\n" for r in rows)


def format_pr_csv(curve: PRCurve) -> str:
    lines = ["recall,precision"]
    lines += [f"{r!r},{p!r}" for r, p in zip(curve.recall, curve.precision)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------- height study


DEFAULT_DEPTH_BINS = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0)


def _bin_stats(ious, depths, depth_bins) -> dict:
    ious = np.asarray(ious, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    out = {}
    for lo, hi in zip(depth_bins[:-1], depth_bins[1:]):
        sel = (depths >= lo) & (depths < hi)
        if sel.any():
            out[(float(lo), float(hi))] = (float(ious[sel].mean()), float(ious[sel].var()))
    return out


def height_iou_stats_2d(pairs_2d, depths, depth_bins=DEFAULT_DEPTH_BINS) -> dict:
    """Per depth bin (mean, population variance) of vertical 1D IoU of 2D box pairs."""
    ious = [geometry.iou_1d_vertical(a, b) for a, b in pairs_2d]
    return _bin_stats(ious, depths, depth_bins)


def height_iou_stats(dets, gts, calib, depth_bins=DEFAULT_DEPTH_BINS) -> dict:
    """Vertical 1D IoU of projected (detection, ground truth) pairs, binned by GT depth.

    ``dets`` and ``gts`` are aligned: element i of each forms one pair (see
    :func:`pair_for_height_study`).  Pairs that do not project in front of
    the camera are skipped; empty bins are absent from the result.
    """
    if len(dets) != len(gts):
        raise ValueError("dets and gts must be aligned pairs")
    pairs, depths = [], []
    R, T = np.asarray(calib.R), np.asarray(calib.T)
    for d, g in zip(dets, gts):
        db, gb = _box_of(d), _box_of(g)
        a = geometry.project_box_2d(db, calib)
        b = geometry.project_box_2d(gb, calib)
        if a is None or b is None:
            continue
        pairs.append((a, b))
        depths.append(float((R @ gb.center + T)[2]))
    return height_iou_stats_2d(pairs, depths, depth_bins)


def pair_for_height_study(dets, gts, min_iou: float = 0.1):
    """Greedy score-descending pairing by best BEV IoU above ``min_iou``."""
    boxes = [_box_of(g) for g in gts]
    used = np.zeros(len(boxes), dtype=bool)
    out_d, out_g = [], []
    for i in sorted(range(len(dets)), key=lambda i: -_score_of(dets[i])):
        db = _box_of(dets[i])
        best, best_iou = -1, min_iou
        for j, gb in enumerate(boxes):
            if not used[j]:
                v = geometry.iou_bev(db, gb)
                if v > best_iou:
                    best, best_iou = j, v
        if best >= 0:
            used[best] = True
            out_d.append(db)
            out_g.append(boxes[best])
    return out_d, out_g
