"""Loss-stack tests against scalar brute-force oracles and finite differences."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from tamtrack.autodiff import Tensor, backward, finite_difference_grad, sigmoid
from tamtrack.losses import (
    LossWeights,
    SupervisionTarget,
    box_l1,
    ciou_loss,
    dice_loss,
    focal_loss,
    iou_l1_loss,
    mask_iou,
    occlusion_ce,
    point_l1,
    task_loss,
    weights_for_task,
)


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


# ---------------------------------------------------------------------------
# oracles


def focal_reference(logits, gt, gamma=2.0, alpha=0.25):
    """Per-pixel closed-form focal loss, plain python floats."""
    total = 0.0
    for logit, g in zip(np.ravel(logits), np.ravel(gt)):
        p = 1.0 / (1.0 + math.exp(-logit))
        p = min(max(p, 1e-300), 1 - 1e-16)
        total += alpha * g * (1 - p) ** gamma * -math.log(p)
        total += (1 - alpha) * (1 - g) * p**gamma * -math.log(1 - p)
    return total / np.size(logits)


def dice_reference(probs, gt, smooth=1.0):
    inter = float((np.asarray(probs) * np.asarray(gt)).sum())
    return 1.0 - (2 * inter + smooth) / (float(np.sum(probs)) + float(np.sum(gt)) + smooth)


def ciou_reference(pred, gt):
    """Scalar CIoU implementation independent of the tensor version."""
    px1, py1, px2, py2 = pred
    gx1, gy1, gx2, gy2 = gt
    iw = max(0.0, min(px2, gx2) - max(px1, gx1))
    ih = max(0.0, min(py2, gy2) - max(py1, gy1))
    inter = iw * ih
    union = max(px2 - px1, 0) * max(py2 - py1, 0) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = inter / (union + 1e-9)
    centre = ((px1 + px2) / 2 - (gx1 + gx2) / 2) ** 2 + ((py1 + py2) / 2 - (gy1 + gy2) / 2) ** 2
    diag = (max(px2, gx2) - min(px1, gx1)) ** 2 + (max(py2, gy2) - min(py1, gy1)) ** 2
    v = 4 / math.pi**2 * (math.atan((gx2 - gx1) / (gy2 - gy1)) - math.atan(max(px2 - px1, 1e-9) / max(py2 - py1, 1e-9))) ** 2
    alpha = v / ((1 - iou) + v + 1e-9)
    return 1 - iou + centre / (diag + 1e-9) + alpha * v


# ---------------------------------------------------------------------------
# focal / dice


def test_focal_and_dice_near_zero_for_perfect_confident_prediction():
    gt = (np.random.default_rng(0).uniform(size=(64, 64)) > 0.5).astype(float)
    logits = Tensor(np.where(gt > 0, 30.0, -30.0))
    assert float(focal_loss(logits, gt).data) < 1e-9
    assert float(dice_loss(sigmoid(logits), gt).data) < 1e-3


def test_dice_complement_saturates_to_one():
    gt = np.zeros((16, 16))
    gt[:8] = 1.0
    probs = Tensor(1.0 - gt)
    value = float(dice_loss(probs, gt).data)
    assert value == pytest.approx(1.0, abs=1e-2)


def test_focal_matches_reference_on_random_instance():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 4)) * 2
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    ours = float(focal_loss(Tensor(logits), gt).data)
    assert ours == pytest.approx(focal_reference(logits, gt), rel=1e-10)


def test_dice_matches_reference_on_random_instance():
    rng = np.random.default_rng(2)
    probs = rng.uniform(size=(4, 4))
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    ours = float(dice_loss(Tensor(probs), gt).data)
    assert ours == pytest.approx(dice_reference(probs, gt), rel=1e-12)


def test_focal_shape_mismatch_raises():
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_focal_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.uniform(size=(3, 3)) > 0.5).astype(float)
    logits = rng.standard_normal((3, 3))

    def f(x):
        return focal_loss(x, gt)

    t = Tensor(logits, requires_grad=True)
    backward(f(t))
    assert rel_err(t.grad, finite_difference_grad(f, Tensor(logits))) < 1e-4


# ---------------------------------------------------------------------------
# iou L1 / occlusion


def test_iou_l1_exact_cases():
    assert float(iou_l1_loss(Tensor(np.array([0.3, 0.7])), np.array([0.3, 0.7])).data) == 0.0
    assert float(iou_l1_loss(Tensor(np.ones(3)), np.zeros(3)).data) == 1.0
    rng = np.random.default_rng(3)
    pred, actual = rng.uniform(size=5), rng.uniform(size=5)
    assert float(iou_l1_loss(Tensor(pred), actual).data) == pytest.approx(np.abs(pred - actual).mean())


def test_occlusion_ce_values():
    assert float(occlusion_ce(Tensor(np.array(-30.0)), visible=1).data) < 1e-9
    assert float(occlusion_ce(Tensor(np.array(0.0)), visible=1).data) == pytest.approx(math.log(2))
    assert float(occlusion_ce(Tensor(np.array(0.0)), visible=0).data) == pytest.approx(math.log(2))


def test_occlusion_ce_gradient():
    for visible in (0, 1):
        def f(x, v=visible):
            return occlusion_ce(x, v)

        x0 = np.array(0.37)
        t = Tensor(x0, requires_grad=True)
        backward(f(t))
        assert rel_err(t.grad, finite_difference_grad(f, Tensor(x0))) < 1e-4


# ---------------------------------------------------------------------------
# box losses


def test_ciou_identical_boxes_zero():
    box = np.array([0.2, 0.3, 0.6, 0.8])
    assert float(ciou_loss(Tensor(box), box).data) == pytest.approx(0.0, abs=1e-6)
    assert float(box_l1(Tensor(box), box).data) == 0.0


def test_ciou_disjoint_matches_reference():
    pred = np.array([0.0, 0.0, 0.2, 0.2])
    gt = (0.5, 0.5, 0.7, 0.7)
    ours = float(ciou_loss(Tensor(pred), gt).data)
    ref = ciou_reference(pred.tolist(), gt)
    assert ours == pytest.approx(ref, rel=1e-9)
    assert ours > 1.0  # IoU term contributes its full 1


def test_ciou_concentric_same_aspect():
    gt = (0.25, 0.25, 0.75, 0.75)
    pred = np.array([0.35, 0.35, 0.65, 0.65])  # same centre, same aspect
    ours = float(ciou_loss(Tensor(pred), gt).data)
    iou = (0.3 * 0.3) / (0.5 * 0.5)
    assert ours == pytest.approx(1 - iou, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_ciou_random_matches_reference(seed):
    rng = np.random.default_rng(seed)
    def rand_box():
        x1, y1 = rng.uniform(0, 0.5, 2)
        return [x1, y1, x1 + rng.uniform(0.1, 0.5), y1 + rng.uniform(0.1, 0.5)]

    pred, gt = np.array(rand_box()), tuple(rand_box())
    assert float(ciou_loss(Tensor(pred), gt).data) == pytest.approx(ciou_reference(pred.tolist(), gt), rel=1e-7)


def test_ciou_rejects_degenerate_gt():
    with pytest.raises(ValueError):
        ciou_loss(Tensor(np.array([0, 0, 1, 1.0])), (0.5, 0.5, 0.5, 0.9))


@pytest.mark.parametrize("seed", range(3))
def test_ciou_gradient_matches_fd(seed):
    rng = np.random.default_rng(10 + seed)
    gt = (0.2, 0.25, 0.7, 0.8)
    pred = np.array([0.1, 0.15, 0.55, 0.7]) + rng.uniform(-0.05, 0.05, 4)

    def f(x):
        return ciou_loss(x, gt)

    t = Tensor(pred, requires_grad=True)
    backward(f(t))
    assert rel_err(t.grad, finite_difference_grad(f, Tensor(pred))) < 1e-4


# ---------------------------------------------------------------------------
# point loss


def test_point_l1_cases():
    assert float(point_l1(Tensor(np.array([10.0, 20.0])), (10.0, 20.0), 128).data) == 0.0
    val = float(point_l1(Tensor(np.array([64.0 + 64.0, 0.0])), (64.0, 0.0), 128).data)
    assert val == pytest.approx(0.25)  # offset (S/2, 0) -> (0.5 + 0)/2


def test_point_l1_gradient_through_soft_argmax():
    from tamtrack.nn import spatial_soft_argmax

    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 6))
    gt = (2.0, 3.0)

    def f(x):
        return point_l1(spatial_soft_argmax(x), gt, 6)

    t = Tensor(logits, requires_grad=True)
    backward(f(t))
    assert rel_err(t.grad, finite_difference_grad(f, Tensor(logits))) < 1e-4


# ---------------------------------------------------------------------------
# combined task loss


def make_prediction(rng, n=3, s=16, with_boxes=False, with_points=False, requires_grad=False):
    logits = [Tensor(rng.standard_normal((s, s)), requires_grad=requires_grad) for _ in range(n)]
    return SimpleNamespace(
        candidate_logits=logits,
        iou_scores=Tensor(rng.uniform(size=n), requires_grad=requires_grad),
        occlusion_logit=Tensor(np.array(rng.standard_normal() * 0.1), requires_grad=requires_grad),
        boxes=[Tensor(np.array([2.0, 2.0, 9.0, 9.0]) + rng.uniform(-1, 1, 4)) for _ in range(n)] if with_boxes else None,
        points=[Tensor(rng.uniform(0, s - 1, 2)) for _ in range(n)] if with_points else None,
    )


def test_invisible_target_keeps_only_occlusion_term():
    rng = np.random.default_rng(5)
    pred = make_prediction(rng, requires_grad=True)
    target = SupervisionTarget(visible=False)
    total, breakdown, chosen = task_loss("mask", pred, target, weights_for_task("mask"), 16)
    assert chosen == -1
    assert set(breakdown) == {"occlusion_ce"}
    backward(total)
    # occlusion head got gradient, every mask candidate got none
    assert pred.occlusion_logit.grad is not None
    for logit in pred.candidate_logits:
        assert logit.grad is None
    assert pred.iou_scores.grad is None


def test_single_candidate_mask_composition():
    rng = np.random.default_rng(6)
    pred = make_prediction(rng, n=1)
    gt = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    target = SupervisionTarget(visible=True, gt_mask=gt)
    weights = LossWeights(focal=20.0, dice=1.0, iou_l1=1.0, occlusion_ce=1.0)
    total, breakdown, chosen = task_loss("mask", pred, target, weights, 16)
    assert chosen == 0
    manual = (
        20.0 * float(focal_loss(pred.candidate_logits[0], gt).data)
        + float(dice_loss(sigmoid(pred.candidate_logits[0]), gt).data)
        + float(iou_l1_loss(pred.iou_scores, np.array([mask_iou(pred.candidate_logits[0].data > 0, gt > 0.5)])).data)
        + float(occlusion_ce(pred.occlusion_logit, True).data)
    )
    assert float(total.data) == pytest.approx(manual, rel=1e-12)


def test_best_candidate_selection_and_invariance():
    rng = np.random.default_rng(7)
    gt = np.zeros((16, 16))
    gt[4:12, 4:12] = 1.0
    # candidate 2 matches GT, candidates 0/1 are bad
    logits = [Tensor(np.full((16, 16), -5.0)), Tensor(rng.standard_normal((16, 16))), Tensor(np.where(gt > 0, 8.0, -8.0))]
    pred = SimpleNamespace(
        candidate_logits=logits,
        iou_scores=Tensor(np.array([0.2, 0.4, 0.9])),
        occlusion_logit=Tensor(np.array(0.0)),
        boxes=None,
        points=None,
    )
    target = SupervisionTarget(visible=True, gt_mask=gt)
    total, _, chosen = task_loss("mask", pred, target, weights_for_task("mask"), 16)
    assert chosen == 2

    # worsening a non-selected candidate's mask leaves the total unchanged
    # except through the (constant-target) IoU term with identical actual IoU
    logits_worse = [Tensor(np.full((16, 16), -50.0)), logits[1], logits[2]]
    pred2 = SimpleNamespace(
        candidate_logits=logits_worse,
        iou_scores=pred.iou_scores,
        occlusion_logit=pred.occlusion_logit,
        boxes=None,
        points=None,
    )
    total2, _, chosen2 = task_loss("mask", pred2, target, weights_for_task("mask"), 16)
    assert chosen2 == 2
    assert float(total2.data) == pytest.approx(float(total.data), rel=1e-12)


def test_box_task_includes_ciou_and_l1():
    rng = np.random.default_rng(8)
    pred = make_prediction(rng, n=2, with_boxes=True)
    gt = np.zeros((16, 16))
    gt[2:9, 2:9] = 1.0
    target = SupervisionTarget(visible=True, gt_mask=gt, gt_box=(2, 2, 9, 9))
    total, breakdown, chosen = task_loss("box", pred, target, weights_for_task("box"), 16)
    assert {"focal", "dice", "ciou", "box_l1", "iou_l1", "occlusion_ce"} <= set(breakdown)
    assert float(total.data) > 0


def test_point_task_includes_point_l1():
    rng = np.random.default_rng(9)
    pred = make_prediction(rng, n=2, with_points=True)
    from tamtrack.prompts import gaussian_point_map

    gt_map = gaussian_point_map((8, 8), sigma=2.0, radius=6.0, h=16, w=16)
    target = SupervisionTarget(visible=True, gt_mask=gt_map, gt_point=(8, 8))
    total, breakdown, chosen = task_loss("point", pred, target, weights_for_task("point"), 16)
    assert "point_l1" in breakdown
    assert float(total.data) > 0


def test_missing_gt_while_visible_raises():
    rng = np.random.default_rng(10)
    pred = make_prediction(rng)
    with pytest.raises(ValueError):
        task_loss("mask", pred, SupervisionTarget(visible=True), weights_for_task("mask"), 16)


def test_all_losses_finite_and_nonnegative():
    rng = np.random.default_rng(11)
    for _ in range(10):
        logits = Tensor(rng.standard_normal((8, 8)) * 5)
        gt = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        for value in (
            float(focal_loss(logits, gt).data),
            float(dice_loss(sigmoid(logits), gt).data),
            float(occlusion_ce(Tensor(np.array(rng.standard_normal() * 3)), rng.integers(2)).data),
        ):
            assert np.isfinite(value) and value >= 0


def test_paper_weight_table():
    mask = weights_for_task("mask")
    box = weights_for_task("box")
    point = weights_for_task("point")
    assert (mask.focal, mask.dice) == (20.0, 1.0)
    assert (box.focal, box.dice, box.ciou, box.box_l1) == (0.5, 0.1, 1.0, 1.0)
    assert (point.focal, point.dice, point.point_l1) == (20.0, 1.0, 20.0)
    for w in (mask, box, point):
        assert w.iou_l1 == 1.0 and w.occlusion_ce == 1.0
