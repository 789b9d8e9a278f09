import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_diff, grad_close, nms_suppression_flags
from vpfuse import fixtures
from vpfuse.errors import DomainError, ShapeError
from vpfuse.geometry import Box3D, encode_residual, iou_bev
from vpfuse.heads_losses import (
    Detection,
    LossWeights,
    RcnnTargets,
    assign_anchors,
    bce,
    decode_detections,
    focal_loss,
    head_forward,
    nms_bev,
    rcnn_loss,
    rcnn_targets,
    rpn_loss,
    select_proposals,
    smooth_l1,
)
from vpfuse.kitti_io import WeightBundle


def random_box(rng, spread=8.0):
    return Box3D(*rng.uniform(-spread, spread, 2), rng.uniform(-1, 1), *rng.uniform(0.8, 4.0, 3),
                 rng.uniform(-math.pi, math.pi))


def away_from_kink(rng, n, beta=1.0):
    d = rng.uniform(-3, 3, n)
    d[np.abs(np.abs(d) - beta) < 1e-3] += 0.01
    return d


# -------------------------------------------------------------------- heads


def test_zero_head():
    w = fixtures.make_weights(np.random.default_rng(0), zero=True)
    d = w["head.main.fc0.weight"].shape[1]
    res, logit = head_forward(np.ones(d), w)
    assert np.array_equal(res, np.zeros(7)) and logit == 0.0


def test_head_matches_matrix_oracle(rng):
    w = fixtures.make_weights(rng)
    d = w["head.main.fc0.weight"].shape[1]
    x = rng.normal(size=d)
    for branch in ("main", "aux"):
        h = x
        i = 0
        while f"head.{branch}.fc{i}.weight" in w:
            W, b = w[f"head.{branch}.fc{i}.weight"], w[f"head.{branch}.fc{i}.bias"]
            h = np.array([max(sum(W[r, c] * h[c] for c in range(len(h))) + b[r], 0.0) for r in range(W.shape[0])])
            i += 1
        want = w[f"head.{branch}.reg.weight"] @ h + w[f"head.{branch}.reg.bias"]
        res, logit = head_forward(x, w, branch)
        assert np.abs(res - want).max() <= 1e-9
        if branch == "main":
            assert logit == pytest.approx(float(w["head.main.iou.weight"][0] @ h + w["head.main.iou.bias"][0]), abs=1e-9)
        else:
            assert logit is None


def test_head_batch_matches_single(rng):
    w = fixtures.make_weights(rng)
    x = rng.normal(size=(3, w["head.main.fc0.weight"].shape[1]))
    res, logits = head_forward(x, w)
    for i in range(3):
        r, l = head_forward(x[i], w)
        assert np.allclose(res[i], r, atol=1e-12) and logits[i] == pytest.approx(l, abs=1e-12)


def test_head_shape_error():
    w = WeightBundle({"head.main.fc0.weight": np.zeros((4, 5)), "head.main.reg.weight": np.zeros((7, 4)),
                      "head.main.iou.weight": np.zeros((1, 4))})
    with pytest.raises(ShapeError):
        head_forward(np.zeros(6), w)


# ------------------------------------------------------------------- losses


def test_smooth_l1_examples():
    assert smooth_l1([1.5, -2.0], [1.5, -2.0])[0] == 0.0
    assert np.array_equal(smooth_l1([1.5, -2.0], [1.5, -2.0])[1], [0.0, 0.0])
    assert smooth_l1([3.0], [0.0])[0] == 2.5
    assert smooth_l1([0.5], [0.0])[0] == 0.125


def test_focal_domain():
    for p in (0.0, 1.0, -0.1, 1.2):
        with pytest.raises(DomainError):
            focal_loss([p], [1])
    with pytest.raises(DomainError):
        focal_loss([0.5], [0.5])


def test_focal_reduces_to_weighted_ce():
    v, _ = focal_loss([0.3], [1], alpha=1.0, gamma=0.0)
    assert v == pytest.approx(-math.log(0.3), abs=1e-15)


def test_bce_value():
    v, g = bce([0.0], [1.0])
    assert v == pytest.approx(math.log(2)) and g[0] == pytest.approx(-0.5)


@pytest.mark.parametrize("beta", [1.0, 0.5, 2.0])
def test_smooth_l1_gradient(rng, beta):
    for _ in range(100):
        t = rng.normal(size=5)
        x = t + away_from_kink(rng, 5, beta)
        _, g = smooth_l1(x, t, beta)
        assert grad_close(g, central_diff(lambda z: smooth_l1(z, t, beta)[0], x))


def test_focal_gradient(rng):
    for _ in range(100):
        p = rng.uniform(0.02, 0.98, 6)
        y = rng.integers(0, 2, 6)
        a, gm = rng.uniform(0.1, 0.9), rng.uniform(0.0, 3.0)
        _, g = focal_loss(p, y, a, gm)
        assert grad_close(g, central_diff(lambda z: focal_loss(z, y, a, gm)[0], p))


def test_bce_gradient(rng):
    for _ in range(100):
        x = rng.normal(scale=4, size=6)
        t = rng.uniform(size=6)
        _, g = bce(x, t)
        assert grad_close(g, central_diff(lambda z: bce(z, t)[0], x))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.01, 0.99))
def test_losses_nonnegative(xs, p):
    x = np.array(xs)
    assert smooth_l1(x, np.zeros_like(x))[0] >= 0
    assert bce(x, np.full_like(x, 0.3))[0] >= 0
    assert focal_loss(np.full(len(xs), p), np.ones(len(xs), int))[0] >= 0


# ------------------------------------------------------------------- L_rcnn


def rcnn_case(rng, n=5):
    tgt = RcnnTargets(rng.normal(size=(n, 7)), rng.uniform(size=n), rng.uniform(size=n) < 0.6)
    main = tgt.residuals + away_from_kink(rng, n * 7).reshape(n, 7)
    aux = tgt.residuals + away_from_kink(rng, n * 7).reshape(n, 7)
    return main, aux, rng.normal(size=n), tgt


def rcnn_direct(main, aux, logit, tgt, wm, wa):
    n = len(logit)
    fg = np.flatnonzero(tgt.reg_mask)
    n_fg = max(len(fg), 1)

    def sl1(d):
        return sum(0.5 * v * v if abs(v) < 1 else abs(v) - 0.5 for v in d.ravel())

    s = 1 / (1 + np.exp(-logit))
    l_iou = -np.sum(tgt.iou * np.log(s) + (1 - tgt.iou) * np.log(1 - s)) / n
    return l_iou + wm * sl1(main[fg] - tgt.residuals[fg]) / n_fg + wa * sl1(aux[fg] - tgt.residuals[fg]) / n_fg


def test_rcnn_zero_weights_is_iou_term(rng):
    main, aux, logit, tgt = rcnn_case(rng)
    v, _ = rcnn_loss(main, aux, logit, tgt, LossWeights(0.0, 0.0))
    assert v == bce(logit, tgt.iou)[0] / len(logit)


def test_rcnn_linear_in_weights(rng):
    main, aux, logit, tgt = rcnn_case(rng)
    _, g1 = rcnn_loss(main, aux, logit, tgt, LossWeights(1.0, 0.5))
    _, g2 = rcnn_loss(main, aux, logit, tgt, LossWeights(2.0, 0.5))
    assert np.array_equal(g2["main"], 2 * g1["main"])
    assert np.array_equal(g2["aux"], g1["aux"])


def test_rcnn_compositional(rng):
    for _ in range(50):
        main, aux, logit, tgt = rcnn_case(rng)
        wm, wa = rng.uniform(0, 2, 2)
        v, _ = rcnn_loss(main, aux, logit, tgt, LossWeights(wm, wa))
        assert abs(v - rcnn_direct(main, aux, logit, tgt, wm, wa)) <= 1e-9


def test_rcnn_monotone_in_weights(rng):
    main, aux, logit, tgt = rcnn_case(rng)
    base = rcnn_loss(main, aux, logit, tgt, LossWeights(0.5, 0.5))[0]
    assert rcnn_loss(main, aux, logit, tgt, LossWeights(0.7, 0.5))[0] >= base
    assert rcnn_loss(main, aux, logit, tgt, LossWeights(0.5, 0.9))[0] >= base


def test_rcnn_gradient(rng):
    for _ in range(100):
        main, aux, logit, tgt = rcnn_case(rng, 3)
        lw = LossWeights(*rng.uniform(0, 2, 2))
        _, g = rcnn_loss(main, aux, logit, tgt, lw)
        assert grad_close(g["main"], central_diff(lambda z: rcnn_loss(z, aux, logit, tgt, lw)[0], main))
        assert grad_close(g["aux"], central_diff(lambda z: rcnn_loss(main, z, logit, tgt, lw)[0], aux))
        assert grad_close(g["iou_logit"], central_diff(lambda z: rcnn_loss(main, aux, z, tgt, lw)[0], logit))


def test_rcnn_targets():
    gt = Box3D(10, 0, -1, 1.6, 3.9, 1.5, 0.1)
    far = Box3D(40, 0, -1, 1.6, 3.9, 1.5)
    t = rcnn_targets([gt, far], [gt])
    assert t.iou[0] == pytest.approx(1.0) and t.iou[1] == 0.0
    assert t.reg_mask.tolist() == [True, False]
    assert np.array_equal(t.residuals[0], np.zeros(7))


# -------------------------------------------------------------------- L_rpn


def rpn_case(rng, n_anchor=6):
    gts = [random_box(rng, 5.0) for _ in range(2)]
    anchors = [g.replace(x=g.x + rng.normal(0, 0.3), y=g.y + rng.normal(0, 0.3)) for g in gts]
    anchors += [random_box(rng, 10.0) for _ in range(n_anchor - len(anchors))]
    return anchors, gts


def test_rpn_perfect_regression(rng):
    anchors, gts = rpn_case(rng)
    labels, match = assign_anchors(anchors, gts)
    box = np.zeros((len(anchors), 7))
    for i in np.flatnonzero(labels == 1):
        box[i] = encode_residual(gts[match[i]], anchors[i])
    p = rng.uniform(0.1, 0.9, len(anchors))
    assert rpn_loss(p, box, anchors, gts, beta=2.0)[0] == rpn_loss(p, box, anchors, gts, beta=0.0)[0]


def test_rpn_beta_zero_is_focal(rng):
    anchors, gts = rpn_case(rng)
    labels, _ = assign_anchors(anchors, gts)
    p = rng.uniform(0.1, 0.9, len(anchors))
    v, g = rpn_loss(p, rng.normal(size=(len(anchors), 7)), anchors, gts, beta=0.0)
    care = labels >= 0
    y = labels[care]
    pc = p[care]
    direct = np.where(y == 1, -0.25 * (1 - pc) ** 2 * np.log(pc), -0.75 * pc ** 2 * np.log(1 - pc)).sum()
    assert v == pytest.approx(direct / max((labels == 1).sum(), 1), rel=1e-12)
    assert np.all(g["box"] == 0.0)


def test_rpn_gradient(rng):
    for _ in range(30):
        anchors, gts = rpn_case(rng, 4)
        p = rng.uniform(0.05, 0.95, len(anchors))
        box = away_from_kink(rng, len(anchors) * 7).reshape(-1, 7)
        beta = rng.uniform(0.5, 3.0)
        _, g = rpn_loss(p, box, anchors, gts, beta)
        assert grad_close(g["cls"], central_diff(lambda z: rpn_loss(z, box, anchors, gts, beta)[0], p))
        assert grad_close(g["box"], central_diff(lambda z: rpn_loss(p, z, anchors, gts, beta)[0], box))


def test_assign_anchors_best_is_positive():
    g = Box3D(0, 0, 0, 1.6, 3.9, 1.5)
    a = g.replace(x=1.5)  # BEV IoU well below 0.6
    labels, match = assign_anchors([a, Box3D(30, 0, 0, 1, 1, 1)], [g])
    assert labels.tolist() == [1, 0] and match.tolist() == [0, -1]


# ---------------------------------------------------------------------- NMS


def random_dets(rng, n):
    return [Detection(random_box(rng, 6.0), float(rng.uniform()), 0.0) for _ in range(n)]


def test_nms_single():
    d = Detection(Box3D(0, 0, 0, 1, 1, 1), 0.4)
    assert nms_bev([d], 0.1) == [d]


def test_nms_identical_pair():
    b = Box3D(0, 0, 0, 1.6, 3.9, 1.5)
    kept = nms_bev([Detection(b, 0.8), Detection(b, 0.9)], 0.1)
    assert [d.score for d in kept] == [0.9]


def test_nms_equal_scores_keep_input_order():
    a, b = Box3D(0, 0, 0, 1, 1, 1), Box3D(0.1, 0, 0, 1, 1, 1)
    assert nms_bev([Detection(a, 0.5), Detection(b, 0.5)], 0.1)[0].box == a


def test_nms_matches_brute_force(rng):
    for _ in range(20):
        dets = random_dets(rng, 50)
        thr = float(rng.uniform(0.05, 0.7))
        want = nms_suppression_flags([d.box for d in dets], [d.score for d in dets], iou_bev, thr)
        assert nms_bev(dets, thr) == [dets[i] for i in want]


def test_nms_antichain_and_scaling(rng):
    dets = random_dets(rng, 40)
    kept = nms_bev(dets, 0.1)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert iou_bev(a.box, b.box) <= 0.1
    scaled = [Detection(d.box, d.score * 0.37) for d in dets]
    assert {d.box for d in nms_bev(scaled, 0.1)} == {d.box for d in kept}
    assert nms_bev(dets, 0.1, max_keep=3) == kept[:3]


def test_select_proposals(rng):
    assert select_proposals([], 0.7, 40) == []
    dets = random_dets(rng, 30)
    assert select_proposals(dets, 0.7, 40, score_threshold=1.01) == []
    assert len(select_proposals(dets, 0.7, 5)) <= 5
    got = select_proposals(dets, 0.7, 40, 0.3)
    assert all(d.score >= 0.3 for d in got)


def test_decode_detections_scores():
    p = Box3D(5, 1, 0, 1.6, 3.9, 1.5, 0.2)
    (d,) = decode_detections([p], np.zeros((1, 7)), [0.0])
    assert d.box == p and d.score == 0.5 and d.predicted_iou == 0.5
