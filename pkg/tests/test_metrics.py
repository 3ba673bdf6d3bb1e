"""Metric implementations vs independent brute-force reference evaluators.

The oracles here are deliberately naive (python loops, all-pairs distance
checks, explicit confusion counting) and never share code with the
vectorized implementations they check.
"""

import math

import numpy as np
import pytest

from tamtrack.metrics import (
    boundary_pixels,
    box_iou,
    box_success_metrics,
    contour_f,
    default_boundary_tolerance,
    evaluate_mask_sequence,
    jaccard,
    pck_t,
    point_aj_oa,
    visibility_metrics,
)


# ---------------------------------------------------------------------------
# reference evaluators (oracles)


def jaccard_oracle(pred, gt):
    inter = union = 0
    for p, g in zip(np.ravel(pred).astype(bool), np.ravel(gt).astype(bool)):
        inter += p and g
        union += p or g
    return 1.0 if union == 0 else inter / union


def boundary_oracle(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                    out[y, x] = True
                    break
    return out


def contour_f_oracle(pred, gt, tol):
    pb = [(y, x) for y, x in zip(*np.nonzero(boundary_oracle(pred)))]
    gb = [(y, x) for y, x in zip(*np.nonzero(boundary_oracle(gt)))]
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0
    matched_p = sum(1 for p in pb if min(math.hypot(p[0] - g[0], p[1] - g[1]) for g in gb) <= tol)
    matched_g = sum(1 for g in gb if min(math.hypot(p[0] - g[0], p[1] - g[1]) for p in pb) <= tol)
    precision = matched_p / len(pb)
    recall = matched_g / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def box_metrics_oracle(preds, gts, vis):
    rows = []
    for p, g, v in zip(preds, gts, vis):
        if not v or g is None:
            continue
        if p is None:
            rows.append((0.0, float("inf"), float("inf")))
            continue
        ix1, iy1 = max(p[0], g[0]), max(p[1], g[1])
        ix2, iy2 = min(p[2], g[2]), min(p[3], g[3])
        inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
        union = (p[2] - p[0]) * (p[3] - p[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter
        iou = inter / union if union > 0 else 0.0
        ce = math.hypot((p[0] + p[2]) / 2 - (g[0] + g[2]) / 2, (p[1] + p[3]) / 2 - (g[1] + g[3]) / 2)
        ne = math.hypot(
            ((p[0] + p[2]) / 2 - (g[0] + g[2]) / 2) / (g[2] - g[0]),
            ((p[1] + p[3]) / 2 - (g[1] + g[3]) / 2) / (g[3] - g[1]),
        )
        rows.append((iou, ce, ne))
    if not rows:
        return {"AUC": 1.0, "P": 1.0, "Pnorm": 1.0, "AO": 1.0, "SR@0.5": 1.0, "SR@0.75": 1.0}
    success_sum = 0.0
    for i in range(51):
        t = i / 50
        success_sum += sum(1 for iou, _, _ in rows if iou >= t and iou > 0) / len(rows)
    return {
        "AUC": success_sum / 51,
        "P": sum(1 for _, ce, _ in rows if ce <= 20.0) / len(rows),
        "Pnorm": sum(1 for _, _, ne in rows if ne <= 0.2) / len(rows),
        "AO": sum(iou for iou, _, _ in rows) / len(rows),
        "SR@0.5": sum(1 for iou, _, _ in rows if iou >= 0.5) / len(rows),
        "SR@0.75": sum(1 for iou, _, _ in rows if iou >= 0.75) / len(rows),
    }


def aj_oa_oracle(pred_pts, pred_vis, gt_pts, gt_vis, resolution):
    scale = 256 / resolution
    jaccards = []
    for delta in (1, 2, 4, 8, 16):
        tp = fp = fn = 0
        for p, pv, g, gv in zip(pred_pts, pred_vis, gt_pts, gt_vis):
            err = math.inf
            if p is not None and g is not None:
                err = math.hypot(p[0] - g[0], p[1] - g[1]) * scale
            hit = pv and gv and err < delta
            if hit:
                tp += 1
            else:
                if pv:
                    fp += 1
                if gv:
                    fn += 1
        denom = tp + fp + fn
        jaccards.append(1.0 if denom == 0 else tp / denom)
    oa = sum(1 for pv, gv in zip(pred_vis, gt_vis) if bool(pv) == bool(gv)) / len(gt_vis)
    return sum(jaccards) / len(jaccards), oa


def confusion_oracle(pred, gt):
    tp = sum(1 for p, g in zip(pred, gt) if p and g)
    tn = sum(1 for p, g in zip(pred, gt) if not p and not g)
    fp = sum(1 for p, g in zip(pred, gt) if p and not g)
    fn = sum(1 for p, g in zip(pred, gt) if not p and g)
    return tp, tn, fp, fn


def random_mask_pool(rng, n, shape=(8, 8)):
    pool = [np.zeros(shape, bool), np.ones(shape, bool)]
    single = np.zeros(shape, bool)
    single[3, 4] = True
    pool.append(single)
    for _ in range(n):
        density = rng.uniform(0.1, 0.9)
        pool.append(rng.uniform(size=shape) < density)
    return pool


# ---------------------------------------------------------------------------
# jaccard


def test_jaccard_trivial_cases():
    a = np.zeros((4, 4), bool)
    a[1:3, 1:3] = True
    assert jaccard(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[0, 0] = True
    assert jaccard(a, b) == 0.0
    assert jaccard(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_jaccard_matches_oracle_on_8x8_pool():
    rng = np.random.default_rng(0)
    pool = random_mask_pool(rng, 25)
    for a in pool:
        for b in pool:
            assert abs(jaccard(a, b) - jaccard_oracle(a, b)) <= 1e-9


# ---------------------------------------------------------------------------
# contour F


def test_contour_identical_masks():
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    assert contour_f(m, m) == 1.0


def test_contour_translated_thin_shape_zero():
    a = np.zeros((16, 16), bool)
    a[2, :] = True
    b = np.zeros((16, 16), bool)
    b[12, :] = True  # translated far beyond the tolerance
    assert contour_f(a, b, tol=1.0) == 0.0


def test_contour_empty_cases():
    empty = np.zeros((8, 8), bool)
    full = np.ones((8, 8), bool)
    assert contour_f(empty, empty) == 1.0
    assert contour_f(empty, full) == 0.0
    assert contour_f(full, empty) == 0.0


def test_boundary_pixels_match_oracle():
    rng = np.random.default_rng(1)
    for mask in random_mask_pool(rng, 30):
        np.testing.assert_array_equal(boundary_pixels(mask), boundary_oracle(mask))


def test_contour_f_matches_all_pairs_oracle():
    rng = np.random.default_rng(2)
    pool = random_mask_pool(rng, 12)
    tol = default_boundary_tolerance((8, 8))
    for a in pool:
        for b in pool:
            assert abs(contour_f(a, b) - contour_f_oracle(a, b, tol)) <= 1e-9


def test_default_tolerance_davis_convention():
    assert default_boundary_tolerance((8, 8)) == math.ceil(0.008 * math.hypot(8, 8))
    assert default_boundary_tolerance((480, 854)) == math.ceil(0.008 * math.hypot(480, 854))


# ---------------------------------------------------------------------------
# box metrics


def test_box_perfect_track():
    boxes = [(1, 1, 5, 6)] * 5
    out = box_success_metrics(boxes, boxes, [1] * 5)
    assert out["AUC"] == 1.0 and out["P"] == 1.0 and out["AO"] == 1.0
    assert out["SR@0.5"] == 1.0 and out["SR@0.75"] == 1.0 and out["Pnorm"] == 1.0


def test_box_all_disjoint_far():
    preds = [(0, 0, 2, 2)] * 4
    gts = [(50, 50, 60, 60)] * 4
    out = box_success_metrics(preds, gts, [1] * 4)
    assert out["AUC"] == 0.0 and out["P"] == 0.0 and out["AO"] == 0.0


def test_box_metrics_match_oracle_on_random_5_frame_cases():
    rng = np.random.default_rng(3)
    for _ in range(200):
        def rand_box():
            x1, y1 = rng.uniform(0, 40, 2)
            return (x1, y1, x1 + rng.uniform(2, 40), y1 + rng.uniform(2, 40))

        preds = [rand_box() if rng.uniform() > 0.1 else None for _ in range(5)]
        gts = [rand_box() for _ in range(5)]
        vis = [int(rng.uniform() > 0.2) for _ in range(5)]
        ours = box_success_metrics(preds, gts, vis)
        ref = box_metrics_oracle(preds, gts, vis)
        for key, value in ref.items():
            assert abs(ours[key] - value) <= 1e-9, key


def test_box_length_mismatch():
    with pytest.raises(ValueError):
        box_success_metrics([(0, 0, 1, 1)], [(0, 0, 1, 1)] * 2, [1, 1])


def test_box_iou_basic():
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


# ---------------------------------------------------------------------------
# point metrics


def test_aj_oa_perfect():
    pts = [(3.0, 4.0)] * 6
    out = point_aj_oa(pts, [1] * 6, pts, [1] * 6, resolution=64)
    assert out["AJ"] == 1.0 and out["OA"] == 1.0


def test_aj_oa_always_visible_on_occluded_gt():
    pts = [(3.0, 4.0)] * 6
    out = point_aj_oa(pts, [1] * 6, pts, [0] * 6, resolution=64)
    assert out["AJ"] == 0.0 and out["OA"] == 0.0


def test_aj_oa_matches_oracle_on_random_6_frame_cases():
    rng = np.random.default_rng(4)
    for _ in range(300):
        gt = [tuple(rng.uniform(0, 63, 2)) for _ in range(6)]
        pred = [
            None if rng.uniform() < 0.1 else (g[0] + rng.normal(0, 3), g[1] + rng.normal(0, 3))
            for g in gt
        ]
        pv = [int(rng.uniform() > 0.3) for _ in range(6)]
        gv = [int(rng.uniform() > 0.3) for _ in range(6)]
        ours = point_aj_oa(pred, pv, gt, gv, resolution=64)
        aj_ref, oa_ref = aj_oa_oracle(pred, pv, gt, gv, 64)
        assert abs(ours["AJ"] - aj_ref) <= 1e-9
        assert abs(ours["OA"] - oa_ref) <= 1e-9


def test_pck_threshold_behaviour():
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True  # area 64 -> tol = 0.2 * 8 = 1.6
    gt = [(8.0, 8.0)] * 4
    masks = [mask] * 4
    exact = pck_t(gt, gt, masks, [1] * 4)
    assert exact == 1.0
    off = [(8.0 + 1.7, 8.0)] * 4  # just above tolerance on every frame
    assert pck_t(off, gt, masks, [1] * 4) == 0.0
    near = [(8.0 + 1.5, 8.0)] * 4
    assert pck_t(near, gt, masks, [1] * 4) == 1.0


def test_pck_matches_enumeration_on_mixed_10_frame_case():
    rng = np.random.default_rng(5)
    mask = np.zeros((16, 16), bool)
    mask[2:14, 2:14] = True
    tol = 0.2 * math.sqrt(mask.sum())
    gt = [tuple(rng.uniform(2, 13, 2)) for _ in range(10)]
    pred = [tuple(np.array(g) + rng.normal(0, 1.5, 2)) for g in gt]
    vis = [int(rng.uniform() > 0.3) for _ in range(10)]
    ours = pck_t(pred, gt, [mask] * 10, vis)
    correct = counted = 0
    for p, g, v in zip(pred, gt, vis):
        if not v:
            continue
        counted += 1
        if math.hypot(p[0] - g[0], p[1] - g[1]) <= tol:
            correct += 1
    expected = 1.0 if counted == 0 else correct / counted
    assert abs(ours - expected) <= 1e-9


# ---------------------------------------------------------------------------
# visibility


def test_visibility_perfect_flags():
    out = visibility_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert out["Acc"] == out["Precision"] == out["Recall"] == out["F1"] == 1.0


def test_visibility_all_visible_prediction():
    out = visibility_metrics([1, 1, 1, 1], [1, 1, 0, 0])
    assert out["Recall"] == 1.0
    assert out["Precision"] == 0.5


def test_visibility_matches_confusion_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        pred = rng.uniform(size=20) > 0.5
        gt = rng.uniform(size=20) > 0.5
        out = visibility_metrics(pred, gt)
        tp, tn, fp, fn = confusion_oracle(pred, gt)
        assert out["TP"] == tp and out["TN"] == tn and out["FP"] == fp and out["FN"] == fn
        assert abs(out["Acc"] - (tp + tn) / 20) <= 1e-12
        assert tp + tn + fp + fn == 20


# ---------------------------------------------------------------------------
# invariances


def test_metrics_invariant_under_joint_translation():
    rng = np.random.default_rng(7)
    base_pred = np.zeros((16, 16), bool)
    base_pred[3:8, 3:9] = True
    base_gt = np.zeros((16, 16), bool)
    base_gt[4:9, 4:10] = True
    j0 = jaccard(base_pred, base_gt)
    f0 = contour_f(base_pred, base_gt)
    pred_t = np.roll(base_pred, (4, 2), axis=(0, 1))
    gt_t = np.roll(base_gt, (4, 2), axis=(0, 1))
    assert jaccard(pred_t, gt_t) == pytest.approx(j0, abs=1e-12)
    assert contour_f(pred_t, gt_t) == pytest.approx(f0, abs=1e-12)
    # boxes too
    p, g = (2, 2, 6, 7), (3, 3, 7, 8)
    shift = (5.0, 3.0)
    p2 = (p[0] + shift[0], p[1] + shift[1], p[2] + shift[0], p[3] + shift[1])
    g2 = (g[0] + shift[0], g[1] + shift[1], g[2] + shift[0], g[3] + shift[1])
    assert box_iou(p2, g2) == pytest.approx(box_iou(p, g), abs=1e-12)


def test_monotonicity_improving_one_frame_never_hurts():
    rng = np.random.default_rng(8)
    gts = [(10.0, 10.0, 30.0, 30.0)] * 6
    preds = [(12.0, 12.0, 33.0, 29.0)] * 6
    base = box_success_metrics(preds, gts, [1] * 6)
    improved = list(preds)
    improved[2] = gts[2]  # strictly higher IoU on frame 2
    better = box_success_metrics(improved, gts, [1] * 6)
    for key in ("AUC", "AO", "SR@0.5", "SR@0.75", "P", "Pnorm"):
        assert better[key] >= base[key] - 1e-12


def test_mask_sequence_eval_excludes_occluded_frames():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 2:6] = True
    preds = [gt, np.zeros_like(gt), gt]
    out = evaluate_mask_sequence(preds, [gt] * 3, [1, 0, 1])
    assert out["frames"] == 2
    assert out["J"] == 1.0 and out["J&F"] == 1.0
