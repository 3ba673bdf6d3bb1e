"""Held-out synthetic validation: run sessions, score per task.

The validation pool mirrors the training challenge mix (motion, scale
change, occlusion, exits, distractors) but uses disjoint seeds.  Frame 0
carries the prompt and is excluded from accuracy aggregates, matching the
first-frame-given protocol; occluded-GT frames count only toward
occlusion/visibility accuracy.
"""

from __future__ import annotations

import numpy as np

from .inference import prompts_from_annotations, track_sequence
from .metrics import EvalReport, box_success_metrics, evaluate_mask_sequence, pck_t, point_aj_oa
from .model import Tracker
from .prompts import GaussianSchedule
from .synthetic import generate_sequence, preset_scene

VAL_KINDS = ("static", "moving", "moving", "scale", "occlusion", "exit", "distractor", "moving")


def build_val_scenes(seed: int, resolution: int, frame_count: int = 16, kinds=VAL_KINDS):
    rng = np.random.default_rng(seed)
    scenes = []
    for i, kind in enumerate(kinds):
        scenes.append((f"{kind}_{i}", preset_scene(kind, seed=int(rng.integers(2**31 - 1)), resolution=resolution, frame_count=frame_count)))
    return scenes


def evaluate_tracker(
    model: Tracker,
    task: str,
    scenes,
    schedule: GaussianSchedule | None = None,
    within_px: float = 8.0,
) -> EvalReport:
    """Track every scene online from its frame-0 ground truth and score it."""
    report = EvalReport(task=task)
    for name, spec in scenes:
        frames, annotations = generate_sequence(spec)
        prompts = prompts_from_annotations(model, task, annotations[0], objects=[0], schedule=schedule)
        if not prompts:
            continue
        outputs = track_sequence(model, task, frames, prompts)
        rows = _score_sequence(model, task, outputs, annotations, within_px)
        report.add(name, rows)
    return report


def _score_sequence(model, task, outputs, annotations, within_px):
    obj = 0
    eval_frames = range(1, len(outputs))  # frame 0 is the prompt
    gt_vis = [bool(annotations[t][obj].visible) for t in eval_frames]
    pred_vis = [outputs[t][obj].predicted_visible for t in eval_frames]
    if task == "mask":
        preds = [(outputs[t][obj].selected_mask_logits > 0) for t in eval_frames]
        gts = [annotations[t][obj].mask for t in eval_frames]
        rows = evaluate_mask_sequence(preds, gts, gt_vis)
    elif task == "box":
        preds = [outputs[t][obj].box for t in eval_frames]
        gts = [annotations[t][obj].box for t in eval_frames]
        rows = box_success_metrics(preds, gts, gt_vis)
    else:
        preds = [outputs[t][obj].point for t in eval_frames]
        gt_points = [annotations[t][obj].point for t in eval_frames]
        point_vis = [bool(v and g is not None) for v, g in zip(gt_vis, gt_points)]
        rows = dict(point_aj_oa(preds, pred_vis, gt_points, point_vis, model.config.resolution))
        rows.pop("jaccards", None)
        errors = [
            float(np.hypot(p[0] - g[0], p[1] - g[1]))
            for p, g, v in zip(preds, gt_points, point_vis)
            if v and p is not None and g is not None
        ]
        rows["within_8px"] = float(np.mean([e <= within_px for e in errors])) if errors else 1.0
        gt_masks = [annotations[t][obj].mask for t in eval_frames]
        rows["PCK-T"] = pck_t(preds, gt_points, gt_masks, point_vis)
    # occlusion-flag agreement on frames where GT is occluded
    occluded = [(p, g) for p, g in zip(pred_vis, gt_vis) if not g]
    rows["occlusion_flip_rate"] = (
        float(np.mean([not p for p, _ in occluded])) if occluded else 1.0
    )
    rows["visibility_acc"] = float(np.mean([p == g for p, g in zip(pred_vis, gt_vis)]))
    return rows


def primary_metric(task: str) -> str:
    return {"mask": "J&F", "box": "AUC", "point": "AJ"}[task]
