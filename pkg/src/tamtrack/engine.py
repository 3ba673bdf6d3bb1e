"""Model-in-the-loop auto-annotation.

A sequence with manual annotations at sparse keyframes is split into clips
between consecutive keyframes.  Each clip's interior is filled by tracking
forward from the clip's first keyframe, optionally fused with a backward
session from its last keyframe and with a session started at the very
first video frame (which is guaranteed to contain the target).  Keyframe
annotations are never overwritten.

Per-task defaults mirror the validated strategy selections: mask uses
backward + first-frame, box uses forward only, point adds the first-frame
session only.  Visibility fusion supports AND / OR / primary-source rules;
geometry fusion averages mask logits, weights boxes by their predicted IoU
confidence, and takes point midpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import Prediction
from .inference import init_session, prompts_from_annotations, track_frame
from .metrics import visibility_metrics
from .model import Tracker
from .synthetic import MIN_VISIBLE_AREA, ObjectAnnotation

VISIBILITY_STRATEGIES = ("and", "or", "primary")


@dataclass(frozen=True)
class ClipPlan:
    keyframes: tuple[int, ...]
    clips: tuple[tuple[int, int], ...]
    backward: bool = False
    use_first_frame: bool = False
    visibility_strategy: str = "primary"

    def __post_init__(self):
        if self.visibility_strategy not in VISIBILITY_STRATEGIES:
            raise ValueError(f"unknown visibility strategy {self.visibility_strategy!r}")


def split_clips(keyframes, sequence_length: int, **options) -> ClipPlan:
    """Clips cover [k_i, k_{i+1}] with shared endpoints; keyframes must be
    sorted, unique, start at 0 and end at the last frame so every
    non-keyframe belongs to exactly one clip interior."""
    keys = list(keyframes)
    if len(keys) < 2:
        raise ValueError("need at least two keyframes")
    if keys != sorted(keys) or len(set(keys)) != len(keys):
        raise ValueError("keyframes must be sorted and unique")
    if keys[0] != 0:
        raise ValueError("keyframes must include frame 0")
    if keys[-1] != sequence_length - 1:
        raise ValueError("keyframes must include the final frame")
    clips = tuple((keys[i], keys[i + 1]) for i in range(len(keys) - 1))
    return ClipPlan(keyframes=tuple(keys), clips=clips, **options)


def default_plan_options(task: str) -> dict:
    if task == "mask":
        return {"backward": True, "use_first_frame": True, "visibility_strategy": "primary"}
    if task == "box":
        return {"backward": False, "use_first_frame": False, "visibility_strategy": "primary"}
    if task == "point":
        return {"backward": False, "use_first_frame": True, "visibility_strategy": "primary"}
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# fusion


@dataclass
class SourceResult:
    """One tracking source's verdict for a single (frame, object)."""

    visible: bool
    mask_logits: np.ndarray | None = None
    box: tuple[float, float, float, float] | None = None
    confidence: float = 1.0  # predicted IoU of the selected candidate
    point: tuple[float, float] | None = None


def fuse_sources(task: str, sources: list[SourceResult], strategy: str) -> ObjectAnnotation:
    """Combine verdicts from 1..k sources into one annotation."""
    if not sources:
        raise ValueError("fusion needs at least one source")
    if strategy not in VISIBILITY_STRATEGIES:
        raise ValueError(f"unknown visibility strategy {strategy!r}")
    flags = [s.visible for s in sources]
    if strategy == "and":
        visible = all(flags)
    elif strategy == "or":
        visible = any(flags)
    else:
        visible = flags[0]
    live = [s for s in sources if s.visible] or sources
    shape = next((np.asarray(s.mask_logits).shape for s in sources if s.mask_logits is not None), (1, 1))
    if not visible:
        return ObjectAnnotation(mask=np.zeros(shape, dtype=np.uint8), visible=False, box=None, point=None)

    mask = np.zeros(shape, dtype=np.uint8)
    if any(s.mask_logits is not None for s in live):
        stack = np.stack([np.asarray(s.mask_logits) for s in live if s.mask_logits is not None])
        mask = (stack.mean(axis=0) > 0).astype(np.uint8)

    box = None
    boxes = [(s.box, max(s.confidence, 1e-6)) for s in live if s.box is not None]
    if boxes:
        weights = np.array([w for _, w in boxes])
        weights = weights / weights.sum()
        arr = np.array([b for b, _ in boxes])
        box = tuple(float(v) for v in (weights[:, None] * arr).sum(axis=0))

    point = None
    points = [s.point for s in live if s.point is not None]
    if points:
        arr = np.array(points)
        point = (float(arr[:, 0].mean()), float(arr[:, 1].mean()))

    if task == "mask" and mask.sum() < MIN_VISIBLE_AREA:
        return ObjectAnnotation(mask=np.zeros(shape, dtype=np.uint8), visible=False, box=None, point=None)
    return ObjectAnnotation(mask=mask, visible=True, box=box, point=point)


def fuse(task: str, forward: SourceResult, backward: SourceResult | None, strategy: str) -> ObjectAnnotation:
    """Two-source convenience wrapper (forward is the primary source)."""
    sources = [forward] if backward is None else [forward, backward]
    return fuse_sources(task, sources, strategy)


# ---------------------------------------------------------------------------
# auto-annotation


def _source_from_prediction(task: str, prediction: Prediction) -> SourceResult:
    return SourceResult(
        visible=prediction.predicted_visible,
        mask_logits=prediction.selected_mask_logits,
        box=prediction.box if task == "box" else None,
        confidence=float(prediction.iou_scores[prediction.selected_index]),
        point=prediction.point if task == "point" else None,
    )


def _object_sessions(model, task, frames, manual, obj, plan):
    """Per-frame SourceResults for one object from every enabled source.

    Returns {frame_index: [SourceResult, ...]} over clip interiors, with
    the forward clip session always first (the primary source).
    """
    per_frame: dict[int, list[SourceResult]] = {t: [] for t in range(len(frames))}

    def run(start_index, frame_indices):
        prompts = prompts_from_annotations(model, task, manual[start_index], objects=[obj])
        if not prompts:
            return {}
        session, _ = init_session(model, task, frames[start_index], prompts)
        outputs = {}
        for t in frame_indices:
            outputs[t] = track_frame(session, frames[t])[obj]
        return outputs

    for a, b in plan.clips:
        interior = list(range(a + 1, b))
        if not interior:
            continue
        fwd = run(a, interior)
        for t in interior:
            if t in fwd:
                per_frame[t].append(_source_from_prediction(task, fwd[t]))
        if plan.backward:
            bwd = run(b, list(reversed(interior)))
            for t in interior:
                if t in bwd:
                    per_frame[t].append(_source_from_prediction(task, bwd[t]))
    if plan.use_first_frame:
        all_after_zero = list(range(1, len(frames)))
        extra = run(0, all_after_zero)
        keyset = set(plan.keyframes)
        for t, prediction in extra.items():
            if t not in keyset:
                per_frame[t].append(_source_from_prediction(task, prediction))
    return per_frame


def auto_annotate(model: Tracker, task: str, frames: np.ndarray, manual: dict[int, dict[int, ObjectAnnotation]], plan: ClipPlan):
    """Fill clip interiors by tracking; keyframes keep their manual
    annotations exactly.  ``manual`` maps keyframe index -> per-object
    annotations.  Returns per-frame dicts for the whole sequence."""
    missing = [k for k in plan.keyframes if k not in manual]
    if missing:
        raise ValueError(f"manual annotations missing for keyframes {missing}")
    objects = sorted(manual[0].keys())
    s = model.config.resolution
    results: list[dict[int, ObjectAnnotation]] = [dict() for _ in range(len(frames))]
    for k in plan.keyframes:
        results[k] = {o: manual[k][o] for o in manual[k]}
    empty = ObjectAnnotation(mask=np.zeros((s, s), dtype=np.uint8), visible=False, box=None, point=None)
    for obj in objects:
        per_frame = _object_sessions(model, task, frames, manual, obj, plan)
        for t in range(len(frames)):
            if t in plan.keyframes:
                continue
            sources = per_frame[t]
            results[t][obj] = fuse_sources(task, sources, plan.visibility_strategy) if sources else empty
    return results


# ---------------------------------------------------------------------------
# scoring


@dataclass
class EngineReport:
    task: str
    quality: dict[str, float] = field(default_factory=dict)
    visibility: dict[str, float] = field(default_factory=dict)
    frames_scored: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "task": self.task,
            "quality": self.quality,
            "visibility": self.visibility,
            "frames_scored": self.frames_scored,
        }


def score_annotations(task: str, produced, reference, interior_frames, obj: int = 0) -> EngineReport:
    """Compare produced interior annotations against held-out ground truth."""
    from .metrics import box_success_metrics, evaluate_mask_sequence, point_aj_oa

    pred_vis = [bool(produced[t][obj].visible) for t in interior_frames]
    gt_vis = [bool(reference[t][obj].visible) for t in interior_frames]
    report = EngineReport(task=task, frames_scored=len(interior_frames))
    report.visibility = visibility_metrics(pred_vis, gt_vis)
    assert report.visibility["TP"] + report.visibility["TN"] + report.visibility["FP"] + report.visibility["FN"] == len(
        interior_frames
    )
    if task == "mask":
        preds = [produced[t][obj].mask for t in interior_frames]
        gts = [reference[t][obj].mask for t in interior_frames]
        report.quality = evaluate_mask_sequence(preds, gts, gt_vis)
    elif task == "box":
        preds = [produced[t][obj].box for t in interior_frames]
        gts = [reference[t][obj].box for t in interior_frames]
        report.quality = box_success_metrics(preds, gts, gt_vis)
    else:
        preds = [produced[t][obj].point for t in interior_frames]
        gts = [reference[t][obj].point for t in interior_frames]
        resolution = reference[interior_frames[0]][obj].mask.shape[0]
        report.quality = point_aj_oa(preds, pred_vis, gts, gt_vis, resolution)
    return report
