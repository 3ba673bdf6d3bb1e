"""Deterministic synthetic videos with exact multi-granularity ground truth.

Scenes are parametric: rigid shapes (disk / rectangle / regular polygon)
move, rotate and scale over a plain or noisy background, optionally passing
behind occluder bars or leaving the frame and returning.  Rendering is
binary-coverage at pixel centres (no anti-aliasing) so masks, tight boxes,
keypoints and visibility flags are exact by construction.  All randomness
comes from the scene seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MIN_VISIBLE_AREA = 4  # pixels; below this the object counts as occluded


@dataclass(frozen=True)
class MotionSpec:
    velocity: tuple[float, float] = (0.0, 0.0)  # px / frame
    rotation_rate: float = 0.0  # radians / frame
    scale_rate: float = 0.0  # fraction / frame
    turn_frame: int | None = None  # reverse velocity from this frame (exit / re-entry)

    def pose(self, start: tuple[float, float], t: int) -> tuple[float, float, float, float]:
        """(cx, cy, angle, scale) at frame t."""
        vx, vy = self.velocity
        if self.turn_frame is None or t <= self.turn_frame:
            cx = start[0] + vx * t
            cy = start[1] + vy * t
        else:
            back = t - self.turn_frame
            cx = start[0] + vx * self.turn_frame - vx * back
            cy = start[1] + vy * self.turn_frame - vy * back
        angle = self.rotation_rate * t
        scale = max(1.0 + self.scale_rate * t, 0.2)
        return cx, cy, angle, scale


@dataclass(frozen=True)
class ObjectSpec:
    kind: str  # disk | rect | polygon
    size: float  # radius / half-diagonal, px
    start: tuple[float, float]
    motion: MotionSpec = field(default_factory=MotionSpec)
    color: tuple[float, float, float] = (0.9, 0.3, 0.2)
    aspect: float = 1.0  # rects: half-height = size * aspect
    sides: int = 5  # polygons
    anchor: str = "centroid"  # centroid | vertex_<k>

    def __post_init__(self):
        if self.kind not in ("disk", "rect", "polygon"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.size <= 0:
            raise ValueError("size must be positive")


@dataclass(frozen=True)
class OccluderSpec:
    """Opaque bar sweeping over the scene, drawn above every object."""

    start: tuple[float, float]
    width: float
    height: float
    velocity: tuple[float, float] = (0.0, 0.0)
    color: tuple[float, float, float] = (0.1, 0.1, 0.1)


@dataclass(frozen=True)
class SceneSpec:
    resolution: int = 128
    frame_count: int = 8
    objects: tuple[ObjectSpec, ...] = ()
    occluders: tuple[OccluderSpec, ...] = ()
    background: str = "solid"  # solid | gradient | noise
    noise_level: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        if self.background not in ("solid", "gradient", "noise"):
            raise ValueError(f"unknown background {self.background!r}")


@dataclass
class ObjectAnnotation:
    """Per-(frame, object) ground truth at all three granularities."""

    mask: np.ndarray  # (S, S) uint8, visible support only
    visible: bool
    box: tuple[float, float, float, float] | None  # tight over the mask
    point: tuple[float, float] | None  # keypoint, when trackable


def _support(kind: str, spec: ObjectSpec, pose, s: int) -> np.ndarray:
    cx, cy, angle, scale = pose
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    if kind == "disk":
        r = spec.size * scale
        return (dx * dx + dy * dy) <= r * r
    cos_a, sin_a = math.cos(-angle), math.sin(-angle)
    rx = dx * cos_a - dy * sin_a
    ry = dx * sin_a + dy * cos_a
    if kind == "rect":
        return (np.abs(rx) <= spec.size * scale) & (np.abs(ry) <= spec.size * spec.aspect * scale)
    # regular polygon: inside all half-planes spanned by consecutive vertices
    verts = _polygon_vertices(spec, pose)
    inside = np.ones((s, s), dtype=bool)
    for i in range(len(verts)):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % len(verts)]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        inside &= cross >= 0
    return inside


def _polygon_vertices(spec: ObjectSpec, pose) -> list[tuple[float, float]]:
    cx, cy, angle, scale = pose
    r = spec.size * scale
    # counter-clockwise in image coordinates (y down) keeps cross >= 0 inside
    return [
        (cx + r * math.cos(angle - 2 * math.pi * i / spec.sides),
         cy + r * math.sin(angle - 2 * math.pi * i / spec.sides))
        for i in range(spec.sides)
    ]


def _anchor_point(spec: ObjectSpec, pose) -> tuple[float, float]:
    cx, cy, angle, scale = pose
    if spec.anchor == "centroid":
        return cx, cy
    if spec.anchor.startswith("vertex_"):
        k = int(spec.anchor.split("_", 1)[1])
        if spec.kind == "polygon":
            verts = _polygon_vertices(spec, pose)
            return verts[k % len(verts)]
        if spec.kind == "rect":
            w, h = spec.size * scale, spec.size * spec.aspect * scale
            corners = [(-w, -h), (w, -h), (w, h), (-w, h)]
            dx, dy = corners[k % 4]
            cos_a, sin_a = math.cos(angle), math.sin(angle)
            return cx + dx * cos_a - dy * sin_a, cy + dx * sin_a + dy * cos_a
        # disks: a point on the rim
        return cx + spec.size * scale * math.cos(pose[2]), cy + spec.size * scale * math.sin(pose[2])
    raise ValueError(f"unknown anchor {spec.anchor!r}")


def derive_annotations(
    mask: np.ndarray, anchor: tuple[float, float] | None, anchor_unoccluded: bool, min_area: int = MIN_VISIBLE_AREA
) -> ObjectAnnotation:
    """Tight box / keypoint / visibility from an exact visible-support mask."""
    mask = np.asarray(mask).astype(bool)
    area = int(mask.sum())
    visible = area >= min_area
    if not visible:
        return ObjectAnnotation(mask=mask.astype(np.uint8), visible=False, box=None, point=None)
    ys, xs = np.nonzero(mask)
    box = (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
    point = None
    if anchor is not None:
        ax, ay = anchor
        h, w = mask.shape
        on_screen = 0 <= ax <= w - 1 and 0 <= ay <= h - 1
        if on_screen and anchor_unoccluded:
            point = (float(ax), float(ay))
    return ObjectAnnotation(mask=mask.astype(np.uint8), visible=True, box=box, point=point)


def generate_sequence(spec: SceneSpec) -> tuple[np.ndarray, list[dict[int, ObjectAnnotation]]]:
    """Render frames and exact annotations.

    Returns (frames, annotations): frames are (T, 3, S, S) float32 in
    [0, 1]; annotations[t][obj_index] is an ObjectAnnotation.  Later
    objects draw above earlier ones; occluders draw above everything.
    """
    s = spec.resolution
    rng = np.random.default_rng(spec.seed)
    background = _render_background(spec, rng)
    frames = np.empty((spec.frame_count, 3, s, s), dtype=np.float32)
    annotations: list[dict[int, ObjectAnnotation]] = []

    for t in range(spec.frame_count):
        frame = background.copy()
        supports = []
        for obj in spec.objects:
            pose = obj.motion.pose(obj.start, t)
            supports.append((_support(obj.kind, obj, pose, s), pose))
        occ_masks = []
        for occ in spec.occluders:
            ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
            ox = occ.start[0] + occ.velocity[0] * t
            oy = occ.start[1] + occ.velocity[1] * t
            occ_masks.append((np.abs(xs - ox) <= occ.width / 2) & (np.abs(ys - oy) <= occ.height / 2))

        per_frame: dict[int, ObjectAnnotation] = {}
        for i, (obj, (support, pose)) in enumerate(zip(spec.objects, supports)):
            visible_mask = support.copy()
            for later_support, _ in supports[i + 1 :]:
                visible_mask &= ~later_support
            for om in occ_masks:
                visible_mask &= ~om
            anchor = _anchor_point(obj, pose)
            ax_int = (int(round(anchor[1])), int(round(anchor[0])))
            anchor_unoccluded = (
                0 <= ax_int[0] < s and 0 <= ax_int[1] < s and bool(visible_mask[ax_int[0], ax_int[1]])
            )
            per_frame[i] = derive_annotations(visible_mask, anchor, anchor_unoccluded)

        for i, (obj, (support, _)) in enumerate(zip(spec.objects, supports)):
            paint = support.copy()
            for later_support, _ in supports[i + 1 :]:
                paint &= ~later_support
            for c in range(3):
                frame[c][paint] = obj.color[c]
        for occ, om in zip(spec.occluders, occ_masks):
            for c in range(3):
                frame[c][om] = occ.color[c]
        if spec.noise_level > 0:
            frame = np.clip(frame + rng.normal(0, spec.noise_level, frame.shape).astype(np.float32), 0, 1)
        frames[t] = frame
        annotations.append(per_frame)
    return frames, annotations


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.resolution
    if spec.background == "solid":
        return np.full((3, s, s), 0.25, dtype=np.float32)
    if spec.background == "gradient":
        ramp = np.linspace(0.1, 0.4, s, dtype=np.float32)
        return np.stack([np.tile(ramp, (s, 1))] * 3)
    base = rng.uniform(0.15, 0.35, size=(3, s, s)).astype(np.float32)
    return base


# ---------------------------------------------------------------------------
# preset scenes: one knob per challenge so ablations can isolate them


def preset_scene(kind: str, seed: int = 0, resolution: int = 128, frame_count: int = 8) -> SceneSpec:
    rng = np.random.default_rng(seed)
    s = resolution
    margin = s // 4

    def spot():
        return tuple(rng.uniform(margin, s - margin, size=2))

    def color():
        hue = rng.uniform(0, 1)
        return (0.55 + 0.4 * math.sin(6.28 * hue), 0.55 + 0.4 * math.sin(6.28 * hue + 2.1), 0.55 + 0.4 * math.sin(6.28 * hue + 4.2))

    def mover(speed_scale=1.0):
        v = rng.uniform(-2.2, 2.2, size=2) * speed_scale * (s / 128)
        return MotionSpec(velocity=(float(v[0]), float(v[1])))

    size = rng.uniform(0.09, 0.16) * s
    if kind == "static":
        obj = ObjectSpec("disk", size, spot(), color=color())
        return SceneSpec(s, frame_count, (obj,), seed=seed)
    if kind == "moving":
        shape = ("disk", "rect", "polygon")[int(rng.integers(3))]
        obj = ObjectSpec(shape, size, spot(), motion=mover(), color=color(), sides=int(rng.integers(3, 7)))
        return SceneSpec(s, frame_count, (obj,), seed=seed)
    if kind == "scale":
        obj = ObjectSpec("disk", size, (s / 2, s / 2), motion=MotionSpec(scale_rate=float(rng.uniform(-0.06, 0.08))), color=color())
        return SceneSpec(s, frame_count, (obj,), seed=seed)
    if kind == "occlusion":
        obj = ObjectSpec("disk", size, (s * 0.5, s * 0.5), motion=mover(0.5), color=color())
        bar = OccluderSpec(start=(-s * 0.2, s * 0.5), width=s * 0.3, height=float(s * 1.2), velocity=(s * 0.18, 0.0))
        return SceneSpec(s, frame_count, (obj,), (bar,), seed=seed)
    if kind == "exit":
        start = (s * 0.75, s * 0.5)
        motion = MotionSpec(velocity=(s * 0.09, 0.0), turn_frame=frame_count // 2)
        obj = ObjectSpec("disk", size, start, motion=motion, color=color())
        return SceneSpec(s, frame_count, (obj,), seed=seed)
    if kind == "distractor":
        c = color()
        target = ObjectSpec("disk", size, (s * 0.3, s * 0.5), motion=mover(0.7), color=c)
        decoy_color = tuple(min(1.0, v + 0.06) for v in c)
        decoy = ObjectSpec("disk", size * 0.95, (s * 0.7, s * 0.5), motion=mover(0.7), color=decoy_color)
        return SceneSpec(s, frame_count, (target, decoy), seed=seed)
    if kind == "two_objects":
        a = ObjectSpec("rect", size, (s * 0.3, s * 0.35), motion=mover(0.8), color=color())
        b = ObjectSpec("polygon", size, (s * 0.7, s * 0.65), motion=mover(0.8), color=color(), sides=6)
        return SceneSpec(s, frame_count, (a, b), seed=seed)
    raise ValueError(f"unknown preset {kind!r}")


PRESET_KINDS = ("static", "moving", "scale", "occlusion", "exit", "distractor", "two_objects")
