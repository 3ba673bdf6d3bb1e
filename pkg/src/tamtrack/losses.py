"""Multi-task loss stack.

Per frame and object the loss is a weighted sum of mask terms (focal +
dice), an L1 on predicted-vs-actual candidate IoUs, a cross-entropy on the
occlusion logit, and task extras (CIoU + L1 for boxes, L1 on the
soft-argmax coordinate for points).  With several candidates only the one
with the lowest combined task loss is supervised, while IoU prediction is
supervised for all candidates.  When the target is invisible every term
except the occlusion cross-entropy is skipped, so those heads receive
exactly zero gradient.

Weights follow the training recipe: mask/point tasks use focal 20 / dice 1,
the box task focal 0.5 / dice 0.1 with CIoU 1 and box L1 1, point L1 20,
IoU L1 1 and occlusion CE 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, abs_, arctan, maximum, mean, minimum, sigmoid, softplus, sum_

_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    focal: float
    dice: float
    iou_l1: float = 1.0
    occlusion_ce: float = 1.0
    ciou: float = 0.0
    box_l1: float = 0.0
    point_l1: float = 0.0

    def __post_init__(self):
        for name in ("focal", "dice", "iou_l1", "occlusion_ce", "ciou", "box_l1", "point_l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def weights_for_task(task: str) -> LossWeights:
    if task == "mask":
        return LossWeights(focal=20.0, dice=1.0)
    if task == "box":
        return LossWeights(focal=0.5, dice=0.1, ciou=1.0, box_l1=1.0)
    if task == "point":
        return LossWeights(focal=20.0, dice=1.0, point_l1=20.0)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class SupervisionTarget:
    """Ground truth for one (frame, object); fields may be None when the
    matching task is inactive or the object is invisible."""

    visible: bool
    gt_mask: np.ndarray | None = None  # (S, S), binary or soft [0, 1]
    gt_box: tuple[float, float, float, float] | None = None  # pixels
    gt_point: tuple[float, float] | None = None  # pixels


# ---------------------------------------------------------------------------
# individual terms


def focal_loss(logits: Tensor, gt_mask: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Pixel-mean sigmoid focal loss; accepts soft targets in [0, 1]."""
    if logits.shape != gt_mask.shape:
        raise ValueError(f"focal_loss shape mismatch: {logits.shape} vs {gt_mask.shape}")
    g = Tensor(np.asarray(gt_mask, dtype=logits.dtype))
    p = sigmoid(logits)
    pos = g * (1.0 - p) ** gamma * softplus(logits * -1.0) * alpha
    neg = (1.0 - g) * p**gamma * softplus(logits) * (1.0 - alpha)
    return mean(pos + neg)


def dice_loss(probs: Tensor, gt_mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - 2|P.G| / (|P| + |G|) with additive smoothing."""
    if probs.shape != gt_mask.shape:
        raise ValueError(f"dice_loss shape mismatch: {probs.shape} vs {gt_mask.shape}")
    g = Tensor(np.asarray(gt_mask, dtype=probs.dtype))
    inter = sum_(probs * g)
    denom = sum_(probs) + float(np.asarray(gt_mask, dtype=np.float64).sum())
    return 1.0 - (inter * 2.0 + smooth) / (denom + smooth)


def iou_l1_loss(pred_scores: Tensor, actual_ious: np.ndarray) -> Tensor:
    """Mean |predicted - actual| IoU over all candidates."""
    actual = np.asarray(actual_ious, dtype=pred_scores.dtype)
    if pred_scores.shape != actual.shape:
        raise ValueError("iou_l1_loss candidate count mismatch")
    return mean(abs_(pred_scores - Tensor(actual)))


def occlusion_ce(occlusion_logit: Tensor, visible: bool | int) -> Tensor:
    """Binary cross-entropy with logits against occluded = 1 - visible."""
    target = 1.0 - float(bool(visible))
    return softplus(occlusion_logit) * (1.0 - target) + softplus(occlusion_logit * -1.0) * target


def _box_parts(box: Tensor):
    x1, y1, x2, y2 = box[0], box[1], box[2], box[3]
    return x1, y1, x2, y2


def ciou_loss(pred_box: Tensor, gt_box) -> Tensor:
    """Complete-IoU loss on normalized [0,1] boxes: 1 - IoU + centre-distance
    over enclosing diagonal + aspect-consistency term (alpha detached)."""
    gt = np.asarray(gt_box, dtype=np.float64)
    if not (gt[0] < gt[2] and gt[1] < gt[3]):
        raise ValueError(f"degenerate ground-truth box: {gt.tolist()}")
    px1, py1, px2, py2 = _box_parts(pred_box)
    gx1, gy1, gx2, gy2 = (float(v) for v in gt)

    inter_w = maximum(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    inter_h = maximum(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = inter_w * inter_h
    area_p = maximum(px2 - px1, 0.0) * maximum(py2 - py1, 0.0)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / (union + _EPS)

    pcx, pcy = (px1 + px2) * 0.5, (py1 + py2) * 0.5
    gcx, gcy = (gx1 + gx2) * 0.5, (gy1 + gy2) * 0.5
    centre = (pcx - gcx) ** 2.0 + (pcy - gcy) ** 2.0

    ex1, ey1 = minimum(px1, gx1), minimum(py1, gy1)
    ex2, ey2 = maximum(px2, gx2), maximum(py2, gy2)
    diag = (ex2 - ex1) ** 2.0 + (ey2 - ey1) ** 2.0

    pw = maximum(px2 - px1, _EPS)
    ph = maximum(py2 - py1, _EPS)
    gt_aspect = float(np.arctan((gx2 - gx1) / (gy2 - gy1)))
    v = (gt_aspect - arctan(pw / ph)) ** 2.0 * (4.0 / np.pi**2)
    # alpha kept differentiable so the loss gradient is exactly its finite
    # difference; the usual stop-gradient trade-off is not needed here
    alpha = v / ((1.0 - iou) + v + _EPS)
    return 1.0 - iou + centre / (diag + _EPS) + v * alpha


def box_l1(pred_box: Tensor, gt_box) -> Tensor:
    """Mean absolute error over the four normalized coordinates."""
    gt = np.asarray(gt_box, dtype=pred_box.dtype)
    return mean(abs_(pred_box - Tensor(gt)))


def point_l1(pred_point: Tensor, gt_point, resolution: int) -> Tensor:
    """Mean absolute error of (x/S, y/S) differences."""
    gt = np.asarray(gt_point, dtype=pred_point.dtype)
    return mean(abs_(pred_point * (1.0 / resolution) - Tensor(gt / resolution)))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Binary IoU; two empty masks count as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# combined task loss


def task_loss(task: str, prediction, target: SupervisionTarget, weights: LossWeights, resolution: int):
    """Combine all terms for one (frame, object) prediction.

    ``prediction`` carries candidate mask logits at full resolution,
    predicted IoU scores, an occlusion logit, and per-candidate box/point
    readouts (see decoder.TrainPrediction).  Returns (total, breakdown,
    chosen_candidate_position); the position indexes the candidate list and
    is -1 for invisible targets where no candidate is supervised.
    """
    occ = occlusion_ce(prediction.occlusion_logit, target.visible)
    breakdown = {"occlusion_ce": float(occ.data)}
    total = occ * weights.occlusion_ce

    if not target.visible:
        return total, breakdown, -1

    if target.gt_mask is None:
        raise ValueError("visible target requires gt_mask")
    gt_mask = target.gt_mask
    gt_bin = np.asarray(gt_mask) >= 0.5

    candidates = []
    terms = []
    for i, logits in enumerate(prediction.candidate_logits):
        f = focal_loss(logits, gt_mask)
        d = dice_loss(sigmoid(logits), gt_mask)
        cand_total = f * weights.focal + d * weights.dice
        cand_terms = {"focal": float(f.data), "dice": float(d.data)}
        if task == "box":
            if target.gt_box is None:
                raise ValueError("box task requires gt_box")
            gt_norm = np.asarray(target.gt_box, dtype=np.float64) / resolution
            c = ciou_loss(prediction.boxes[i] * (1.0 / resolution), gt_norm)
            l = box_l1(prediction.boxes[i] * (1.0 / resolution), gt_norm)
            cand_total = cand_total + c * weights.ciou + l * weights.box_l1
            cand_terms["ciou"] = float(c.data)
            cand_terms["box_l1"] = float(l.data)
        elif task == "point":
            if target.gt_point is None:
                raise ValueError("point task requires gt_point")
            pl = point_l1(prediction.points[i], target.gt_point, resolution)
            cand_total = cand_total + pl * weights.point_l1
            cand_terms["point_l1"] = float(pl.data)
        candidates.append(cand_total)
        terms.append(cand_terms)

    chosen = int(np.argmin([float(c.data) for c in candidates]))
    total = total + candidates[chosen]
    breakdown.update(terms[chosen])

    actual = np.array([mask_iou(l.data > 0, gt_bin) for l in prediction.candidate_logits])
    iou_term = iou_l1_loss(prediction.iou_scores, actual)
    total = total + iou_term * weights.iou_l1
    breakdown["iou_l1"] = float(iou_term.data)
    return total, breakdown, chosen
