"""Detection heads, losses with analytic gradients, and rotated NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .errors import DomainError, MissingWeight, ShapeError, ValidationError
from .geometry import Box3D
from .kitti_io import WeightBundle


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    predicted_iou: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0 and 0.0 <= self.predicted_iou <= 1.0):
            raise ValidationError(f"score {self.score} / predicted_iou {self.predicted_iou} outside [0, 1]")


@dataclass(frozen=True)
class LossWeights:
    w_main: float = 1.0
    w_aux: float = 0.5

    def __post_init__(self):
        if self.w_main < 0 or self.w_aux < 0:
            raise ValueError("loss weights must be non-negative")


# -------------------------------------------------------------------- heads


def _linear(x, w, b):
    y = x @ np.asarray(w, dtype=np.float64).T
    if b is not None:
        y = y + b
    return y


def _layer(weights, name):
    if f"{name}.weight" not in weights:
        raise MissingWeight(f"{name}.weight")
    b = weights[f"{name}.bias"] if f"{name}.bias" in weights else None
    return weights[f"{name}.weight"], b


def head_forward(pooled, weights: WeightBundle, branch: str = "main"):
    """Run ``head.<branch>``: fc0, fc1, ... with ReLU, then linear outputs.

    Returns ``(residual, iou_logit)``; the aux branch has no IoU output and
    returns None in its place.  ``pooled`` may be one flattened vector or a
    (P, D) batch.
    """
    if branch not in ("main", "aux"):
        raise ValueError(f"unknown branch {branch!r}")
    x = np.asarray(pooled, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    prefix = f"head.{branch}"
    i = 0
    while f"{prefix}.fc{i}.weight" in weights:
        w, b = _layer(weights, f"{prefix}.fc{i}")
        if w.shape[1] != x.shape[1]:
            raise ShapeError(f"{prefix}.fc{i} expects {w.shape[1]} inputs, got {x.shape[1]}")
        x = np.maximum(_linear(x, w, b), 0.0)
        i += 1
    w, b = _layer(weights, f"{prefix}.reg")
    if w.shape != (7, x.shape[1]):
        raise ShapeError(f"{prefix}.reg must be (7, {x.shape[1]}), got {w.shape}")
    residual = _linear(x, w, b)
    logit = None
    if branch == "main":
        w, b = _layer(weights, f"{prefix}.iou")
        if w.shape != (1, x.shape[1]):
            raise ShapeError(f"{prefix}.iou must be (1, {x.shape[1]}), got {w.shape}")
        logit = _linear(x, w, b)[:, 0]
    if single:
        return residual[0], (None if logit is None else float(logit[0]))
    return residual, logit


# ------------------------------------------------------------------- losses


def smooth_l1(pred, target, beta: float = 1.0):
    """Summed smooth-L1 and its gradient w.r.t. ``pred``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(d)
    quad = a < beta
    val = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return float(val.sum()), grad


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0):
    """Binary focal loss on probabilities, summed; gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("focal loss needs probabilities strictly inside (0, 1)")
    if np.any((y != 0) & (y != 1)):
        raise DomainError("focal loss targets must be 0 or 1")
    q = 1.0 - p
    pos = -alpha * q ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(q)
    gpos = -alpha * (q ** gamma / p - gamma * q ** (gamma - 1) * np.log(p))
    gneg = -(1.0 - alpha) * (gamma * p ** (gamma - 1) * np.log(q) - p ** gamma / q)
    val = np.where(y == 1, pos, neg)
    grad = np.where(y == 1, gpos, gneg)
    return float(val.sum()), grad


def bce(logit, target):
    """Summed sigmoid cross-entropy with soft targets; gradient w.r.t. logit."""
    x = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    grad = sigmoid(x) - t
    return float(val.sum()), grad


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True, eq=False)
class RcnnTargets:
    """Per-proposal regression targets, IoU targets and foreground mask."""

    residuals: np.ndarray
    iou: np.ndarray
    reg_mask: np.ndarray | None = None


def rcnn_targets(proposals: Sequence[Box3D], gts: Sequence[Box3D], fg_iou: float = 0.55) -> RcnnTargets:
    res = np.zeros((len(proposals), 7))
    iou = np.zeros(len(proposals))
    for i, p in enumerate(proposals):
        if not gts:
            continue
        ious = [geometry.iou_3d(p, g) for g in gts]
        j = int(np.argmax(ious))
        iou[i] = ious[j]
        res[i] = geometry.encode_residual(gts[j], p)
    return RcnnTargets(res, iou, iou >= fg_iou)


def rcnn_loss(main_pred, aux_pred, iou_logit, targets: RcnnTargets, lw: LossWeights = LossWeights()):
    """``L_iou + w_main * L_main + w_aux * L_aux`` and gradients.

    The IoU term averages over proposals; the regression terms average over
    foreground proposals (at least one).  Returns ``(value, grads)`` with
    keys ``main``, ``aux`` and ``iou_logit``.
    """
    main = np.atleast_2d(np.asarray(main_pred, dtype=np.float64))
    aux = np.atleast_2d(np.asarray(aux_pred, dtype=np.float64))
    logit = np.atleast_1d(np.asarray(iou_logit, dtype=np.float64))
    tgt = np.atleast_2d(targets.residuals)
    n = len(logit)
    if main.shape != (n, 7) or aux.shape != (n, 7) or tgt.shape != (n, 7):
        raise ShapeError("predictions and targets must be (N, 7) with N IoU logits")
    mask = np.ones(n, bool) if targets.reg_mask is None else np.asarray(targets.reg_mask, bool)
    n_fg = max(int(mask.sum()), 1)
    l_iou, g_iou = bce(logit, np.atleast_1d(targets.iou))
    m = mask[:, None].astype(np.float64)
    l_v, g_v = smooth_l1(main * m, tgt * m)
    l_a, g_a = smooth_l1(aux * m, tgt * m)
    value = l_iou / n + lw.w_main * l_v / n_fg + lw.w_aux * l_a / n_fg
    grads = {
        "iou_logit": g_iou / n,
        "main": lw.w_main * g_v * m / n_fg,
        "aux": lw.w_aux * g_a * m / n_fg,
    }
    return value, grads


def assign_anchors(anchors: Sequence[Box3D], gts: Sequence[Box3D], pos_iou: float = 0.6, neg_iou: float = 0.45):
    """Label anchors 1 (positive), 0 (negative) or -1 (ignored) by BEV IoU.

    Also returns the matched ground-truth index per anchor (-1 if none).
    Each ground truth's best anchor is positive regardless of threshold.
    """
    labels = np.zeros(len(anchors), dtype=np.int64)
    match = np.full(len(anchors), -1, dtype=np.int64)
    if not gts or not anchors:
        return labels, match
    ious = np.array([[geometry.iou_bev(a, g) for g in gts] for a in anchors])
    best = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    labels[:] = -1
    labels[best_iou < neg_iou] = 0
    pos = best_iou >= pos_iou
    for j in range(len(gts)):
        if ious[:, j].max() > 0:
            i = int(ious[:, j].argmax())
            pos[i] = True
            best[i] = j
    labels[pos] = 1
    match[pos] = best[pos]
    return labels, match


def rpn_loss(cls_preds, box_preds, anchors: Sequence[Box3D], gts: Sequence[Box3D], beta: float = 2.0,
             alpha: float = 0.25, gamma: float = 2.0, pos_iou: float = 0.6, neg_iou: float = 0.45):
    """Focal classification plus ``beta`` times smooth-L1 residual regression.

    ``cls_preds`` are foreground probabilities per anchor.  Both terms are
    normalized by the positive-anchor count (at least one).
    """
    p = np.asarray(cls_preds, dtype=np.float64).reshape(-1)
    box = np.asarray(box_preds, dtype=np.float64).reshape(-1, 7)
    if len(p) != len(anchors) or len(box) != len(anchors):
        raise ShapeError("need one class probability and one residual per anchor")
    labels, match = assign_anchors(anchors, gts, pos_iou, neg_iou)
    n_pos = max(int((labels == 1).sum()), 1)
    care = labels >= 0
    grad_cls = np.zeros_like(p)
    value = 0.0
    if care.any():
        l_cls, g = focal_loss(p[care], labels[care], alpha, gamma)
        value += l_cls / n_pos
        grad_cls[care] = g / n_pos
    grad_box = np.zeros_like(box)
    pos = np.flatnonzero(labels == 1)
    if len(pos) and beta != 0:
        tgt = np.stack([geometry.encode_residual(gts[match[i]], anchors[i]) for i in pos])
        l_reg, g = smooth_l1(box[pos], tgt)
        value += beta * l_reg / n_pos
        grad_box[pos] = beta * g / n_pos
    return value, {"cls": grad_cls, "box": grad_box}


# ---------------------------------------------------------------------- NMS


def nms_bev(dets: Sequence[Detection], iou_threshold: float, max_keep: int | None = None) -> list[Detection]:
    """Greedy score-descending suppression by BEV IoU (> threshold suppresses).

    Equal scores keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        if max_keep is not None and len(kept) >= max_keep:
            break
        d = dets[i]
        if all(geometry.iou_bev(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def select_proposals(dets: Sequence[Detection], iou_threshold: float, count: int,
                     score_threshold: float = 0.0) -> list[Detection]:
    kept = nms_bev(dets, iou_threshold)
    kept = [d for d in kept if d.score >= score_threshold]
    return kept[:count]


def decode_detections(proposals: Sequence[Box3D], residuals, iou_logits) -> list[Detection]:
    """Refined boxes; the score is the sigmoid of the IoU logit."""
    out = []
    residuals = np.atleast_2d(residuals)
    probs = sigmoid(np.atleast_1d(iou_logits))
    for prop, res, pr in zip(proposals, residuals, probs):
        r = np.array(res, dtype=np.float64)
        r[6] = min(max(r[6], -1.0), 1.0)
        box = geometry.decode_residual(r, prop)
        s = float(pr)
        out.append(Detection(box, s, s))
    return out
