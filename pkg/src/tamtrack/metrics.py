"""Multi-granularity evaluation metrics.

Masks: region Jaccard J and boundary F (DAVIS-style, tolerance 0.8% of the
image diagonal, rounded up).  Boxes: success-curve AUC, centre-error
precision P (20 px) and size-normalized precision Pnorm (0.2), average
overlap AO and SR@0.5/0.75.  Points: TAP-Vid-style average Jaccard over
{1,2,4,8,16} px thresholds at a 256x256 evaluation scale plus occlusion
accuracy, in query-first mode; PCK-T with tolerance 0.2 sqrt(mask area).
Frames whose ground truth is occluded are excluded from accuracy
aggregates and only count toward occlusion/visibility accuracy.

A frame with zero box overlap counts as a failure at every success-curve
threshold, so a perfect track scores AUC 1 and a fully lost track scores 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

AJ_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
AJ_EVAL_RESOLUTION = 256
PCK_FACTOR = 0.2
PRECISION_PX = 20.0
PNORM_THRESHOLD = 0.2
BOUNDARY_TOL_FRACTION = 0.008


# ---------------------------------------------------------------------------
# masks


def jaccard(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """|P & G| / |P | G|; both-empty counts as a perfect 1."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"jaccard shape mismatch: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """4-connectivity boundary: foreground pixels with a background
    4-neighbour (the image border counts as background)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros_like(m)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_boundary_tolerance(shape: tuple[int, int]) -> int:
    return int(math.ceil(BOUNDARY_TOL_FRACTION * math.hypot(*shape)))


def contour_f(pred_mask: np.ndarray, gt_mask: np.ndarray, tol: float | None = None) -> float:
    """Boundary F-measure: precision/recall of boundary pixels matched
    within ``tol`` (Euclidean), F = 2PR/(P+R)."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"contour_f shape mismatch: {pred.shape} vs {gt.shape}")
    if tol is None:
        tol = default_boundary_tolerance(pred.shape)
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tol).mean())
    recall = float((dist_to_pred[gb] <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# boxes


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0) + max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def _centre(box):
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def box_success_metrics(pred_boxes, gt_boxes, visibility) -> dict[str, float]:
    """Sequence-level box metrics over visible-GT frames.

    Missing predictions on visible frames count as zero overlap and
    unbounded centre error.
    """
    if not (len(pred_boxes) == len(gt_boxes) == len(visibility)):
        raise ValueError("box metric sequences must align")
    ious = []
    centre_err = []
    norm_err = []
    for pred, gt, vis in zip(pred_boxes, gt_boxes, visibility):
        if not vis or gt is None:
            continue
        if pred is None:
            ious.append(0.0)
            centre_err.append(float("inf"))
            norm_err.append(float("inf"))
            continue
        ious.append(box_iou(pred, gt))
        (pcx, pcy), (gcx, gcy) = _centre(pred), _centre(gt)
        centre_err.append(math.hypot(pcx - gcx, pcy - gcy))
        gw = max(gt[2] - gt[0], 1e-9)
        gh = max(gt[3] - gt[1], 1e-9)
        norm_err.append(math.hypot((pcx - gcx) / gw, (pcy - gcy) / gh))
    if not ious:
        return {"AUC": 1.0, "P": 1.0, "Pnorm": 1.0, "AO": 1.0, "SR@0.5": 1.0, "SR@0.75": 1.0, "frames": 0}
    iou_arr = np.array(ious)
    thresholds = np.linspace(0.0, 1.0, 51)
    success = np.array([np.mean((iou_arr >= t) & (iou_arr > 0)) for t in thresholds])
    return {
        "AUC": float(success.mean()),
        "P": float(np.mean(np.array(centre_err) <= PRECISION_PX)),
        "Pnorm": float(np.mean(np.array(norm_err) <= PNORM_THRESHOLD)),
        "AO": float(iou_arr.mean()),
        "SR@0.5": float(np.mean(iou_arr >= 0.5)),
        "SR@0.75": float(np.mean(iou_arr >= 0.75)),
        "frames": len(ious),
    }


# ---------------------------------------------------------------------------
# points


def point_aj_oa(
    pred_points,
    pred_visible,
    gt_points,
    gt_visible,
    resolution: int,
    eval_resolution: int = AJ_EVAL_RESOLUTION,
    thresholds=AJ_THRESHOLDS,
) -> dict[str, float]:
    """Average Jaccard over distance thresholds plus occlusion accuracy.

    Coordinates rescale to ``eval_resolution``; a frame is a true positive
    at threshold d when both flags are visible and the error is under d.
    """
    n = len(gt_points)
    if not (len(pred_points) == len(pred_visible) == len(gt_visible) == n):
        raise ValueError("point metric sequences must align")
    scale = eval_resolution / resolution
    errors = np.full(n, np.inf)
    for i, (pred, gt) in enumerate(zip(pred_points, gt_points)):
        if pred is not None and gt is not None:
            errors[i] = math.hypot(pred[0] - gt[0], pred[1] - gt[1]) * scale
    pv = np.asarray(pred_visible, dtype=bool)
    gv = np.asarray(gt_visible, dtype=bool)
    jaccards = []
    for delta in thresholds:
        within = errors < delta
        tp = int(np.sum(pv & gv & within))
        fp = int(np.sum(pv & ~(gv & within)))
        fn = int(np.sum(gv & ~(pv & within)))
        denom = tp + fp + fn
        jaccards.append(1.0 if denom == 0 else tp / denom)
    oa = float(np.mean(pv == gv)) if n else 1.0
    return {"AJ": float(np.mean(jaccards)), "OA": oa, "jaccards": tuple(jaccards)}


def pck_t(pred_points, gt_points, gt_masks, visibility, factor: float = PCK_FACTOR) -> float:
    """Fraction of visible frames with error within factor*sqrt(mask area)."""
    n = len(gt_points)
    if not (len(pred_points) == len(gt_masks) == len(visibility) == n):
        raise ValueError("pck_t sequences must align")
    correct = 0
    counted = 0
    for pred, gt, mask, vis in zip(pred_points, gt_points, gt_masks, visibility):
        if not vis or gt is None or mask is None:
            continue
        counted += 1
        if pred is None:
            continue
        tol = factor * math.sqrt(float(np.asarray(mask, dtype=bool).sum()))
        if math.hypot(pred[0] - gt[0], pred[1] - gt[1]) <= tol:
            correct += 1
    if counted == 0:
        return 1.0
    return correct / counted


# ---------------------------------------------------------------------------
# visibility flags


def visibility_metrics(pred_flags, gt_flags) -> dict[str, float]:
    """Accuracy / precision / recall / F1 with visible as the positive class.
    Vacuous denominators count as perfect (a correct all-negative prediction
    scores 1 across the board)."""
    pred = np.asarray(pred_flags, dtype=bool)
    gt = np.asarray(gt_flags, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("visibility sequences must align")
    tp = int(np.sum(pred & gt))
    tn = int(np.sum(~pred & ~gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    total = tp + tn + fp + fn
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    accuracy = (tp + tn) / total if total else 1.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return {"Acc": accuracy, "Precision": precision, "Recall": recall, "F1": f1,
            "TP": tp, "TN": tn, "FP": fp, "FN": fn}


# ---------------------------------------------------------------------------
# sequence-level evaluation and reports


def evaluate_mask_sequence(pred_masks, gt_masks, gt_visible, tol: float | None = None) -> dict[str, float]:
    """Mean J / F / J&F over visible-GT frames of one sequence."""
    js, fs = [], []
    for pred, gt, vis in zip(pred_masks, gt_masks, gt_visible):
        if not vis:
            continue
        pred = np.zeros_like(np.asarray(gt)) if pred is None else pred
        js.append(jaccard(pred, gt))
        fs.append(contour_f(pred, gt, tol))
    if not js:
        return {"J": 1.0, "F": 1.0, "J&F": 1.0, "frames": 0}
    j, f = float(np.mean(js)), float(np.mean(fs))
    return {"J": j, "F": f, "J&F": (j + f) / 2, "frames": len(js)}


@dataclass
class EvalReport:
    """Per-sequence values plus aggregate means; metadata records the
    conventions in force (Pnorm threshold, AJ grid, PCK factor)."""

    task: str
    per_sequence: list[dict] = field(default_factory=list)
    metadata: dict = field(
        default_factory=lambda: {
            "pnorm_threshold": PNORM_THRESHOLD,
            "precision_px": PRECISION_PX,
            "aj_thresholds": list(AJ_THRESHOLDS),
            "aj_eval_resolution": AJ_EVAL_RESOLUTION,
            "pck_factor": PCK_FACTOR,
            "boundary_tol_fraction": BOUNDARY_TOL_FRACTION,
        }
    )

    def add(self, name: str, values: dict) -> None:
        self.per_sequence.append({"sequence": name, **values})

    @property
    def aggregate(self) -> dict[str, float]:
        keys = [
            k
            for k in (self.per_sequence[0] if self.per_sequence else {})
            if k != "sequence" and isinstance(self.per_sequence[0][k], (int, float))
        ]
        return {k: float(np.mean([row[k] for row in self.per_sequence])) for k in keys}

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "task": self.task,
            "metadata": self.metadata,
            "aggregate": self.aggregate,
            "per_sequence": self.per_sequence,
        }
