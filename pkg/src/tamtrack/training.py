"""Episodic multi-task training.

Each step draws one task for the whole batch, builds episodes of
``frames_per_episode`` frames from synthetic sequences, and unrolls them
frame by frame while maintaining a memory bank per target:

* conditional frames with normal (ground-truth) prompts convert straight
  to memory and are not supervised;
* in interactive mode (mask/box only) conditional frames get a noisy box
  or a positive click, are decoded and supervised, and corrective frames
  iterate click sampling from the false-negative/false-positive regions;
* every other frame is decoded without prompts and supervised.

Optimization is AdamW with global-norm gradient clipping and a cosine
learning-rate schedule.  The point task always receives its exact
ground-truth point (plus the scheduled Gaussian map) on the first frame
and gets no interactive or corrective supervision.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .config import TASKS, ModelConfig, TrainConfig
from .decoder import select_candidate
from .losses import SupervisionTarget, task_loss, weights_for_task
from .memory import MemoryBank
from .model import Tracker
from .prompts import (
    BoxPrompt,
    GaussianSchedule,
    MaskPrompt,
    NEGATIVE,
    POSITIVE,
    PointGaussianPrompt,
    PointsPrompt,
    gaussian_point_map,
)
from .synthetic import ObjectAnnotation, PRESET_KINDS, generate_sequence, preset_scene


# ---------------------------------------------------------------------------
# episode construction


@dataclass
class Episode:
    task: str
    frames: np.ndarray  # (T, 3, S, S)
    annotations: list[dict[int, ObjectAnnotation]]
    objects: list[int]
    conditional_indices: tuple[int, ...]  # includes 0
    prompt_mode: str  # normal | interactive
    corrective_indices: tuple[int, ...]
    targets: list[dict[int, SupervisionTarget]] = field(default_factory=list)
    gaussian: tuple[float, float] = (0.0, 0.0)  # (radius, sigma) at this resolution

    def __post_init__(self):
        if 0 not in self.conditional_indices:
            raise ValueError("frame 0 must be conditional")
        if self.prompt_mode not in ("normal", "interactive"):
            raise ValueError(f"bad prompt mode {self.prompt_mode!r}")
        if self.task == "point" and (self.prompt_mode != "normal" or self.corrective_indices):
            raise ValueError("point task is normal-prompt only, without corrective frames")


def sample_task(rng: np.random.Generator, probs) -> str:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,) or abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
        raise ValueError("sample_probs must be a 3-way distribution")
    return TASKS[int(rng.choice(3, p=probs))]


def _object_trackable(ann: ObjectAnnotation, task: str) -> bool:
    if not ann.visible:
        return False
    if task == "point":
        return ann.point is not None
    if task == "box":
        return ann.box is not None
    return True


def build_episode(
    frames: np.ndarray,
    annotations: list[dict[int, ObjectAnnotation]],
    task: str,
    config: TrainConfig,
    rng: np.random.Generator,
    gaussian: tuple[float, float],
    resolution: int,
) -> Episode | None:
    """Cut a window, pick targets visible at its first frame, choose
    conditional/corrective frames and the prompt mode.  Returns None when
    no object is trackable at frame 0 (resample signal)."""
    total = len(frames)
    t_len = config.frames_per_episode
    if total < t_len:
        raise ValueError(f"sequence of {total} frames is shorter than an episode ({t_len})")
    start = int(rng.integers(0, total - t_len + 1))
    window = slice(start, start + t_len)
    win_frames = frames[window]
    win_annotations = [dict(a) for a in annotations[window]]

    candidates = [i for i, ann in win_annotations[0].items() if _object_trackable(ann, task)]
    if not candidates:
        return None
    rng.shuffle(candidates)
    objects = sorted(candidates[: config.max_objects(task)])

    if task == "point":
        conditional = (0,)
        prompt_mode = "normal"
        corrective: tuple[int, ...] = ()
    else:
        count = int(rng.integers(1, config.max_conditional_frames + 1))
        extra: list[int] = []
        if count > 1:
            usable = [
                t
                for t in range(1, t_len)
                if all(_object_trackable(win_annotations[t].get(o, _INVISIBLE), task) for o in objects)
            ]
            if usable:
                extra = [int(rng.choice(usable))]
        conditional = tuple(sorted({0, *extra}))
        prompt_mode = "interactive" if rng.random() < config.interactive_prob else "normal"
        if prompt_mode == "interactive" and config.max_corrective_frames > 0:
            n_corr = int(rng.integers(1, config.max_corrective_frames + 1))
            picks = list(conditional)
            rng.shuffle(picks)
            corrective = tuple(sorted(picks[:n_corr]))
        else:
            corrective = ()

    targets = [
        {o: _target_for(task, frame_ann.get(o, _INVISIBLE), gaussian, resolution) for o in objects}
        for frame_ann in win_annotations
    ]
    return Episode(
        task=task,
        frames=win_frames,
        annotations=win_annotations,
        objects=objects,
        conditional_indices=conditional,
        prompt_mode=prompt_mode,
        corrective_indices=corrective,
        targets=targets,
        gaussian=gaussian,
    )


_INVISIBLE = ObjectAnnotation(mask=np.zeros((1, 1), dtype=np.uint8), visible=False, box=None, point=None)


def _target_for(task: str, ann: ObjectAnnotation, gaussian: tuple[float, float], resolution: int) -> SupervisionTarget:
    if task == "point":
        visible = ann.visible and ann.point is not None
        if not visible:
            return SupervisionTarget(visible=False)
        radius, sigma = gaussian
        gt_map = gaussian_point_map(ann.point, sigma=sigma, radius=radius, h=resolution, w=resolution)
        return SupervisionTarget(visible=True, gt_mask=gt_map, gt_point=ann.point)
    if not ann.visible:
        return SupervisionTarget(visible=False)
    if task == "box":
        return SupervisionTarget(visible=True, gt_mask=ann.mask.astype(np.float64), gt_box=ann.box)
    return SupervisionTarget(visible=True, gt_mask=ann.mask.astype(np.float64))


# ---------------------------------------------------------------------------
# prompt simulation


def normal_prompt(task: str, ann: ObjectAnnotation, gaussian: tuple[float, float], resolution: int):
    if task == "mask":
        return MaskPrompt(ann.mask.astype(np.uint8))
    if task == "box":
        return BoxPrompt(*ann.box)
    radius, sigma = gaussian
    x, y = ann.point
    return PointGaussianPrompt(x, y, gaussian_point_map((x, y), sigma=sigma, radius=radius, h=resolution, w=resolution))


def noisy_box_prompt(ann: ObjectAnnotation, rng: np.random.Generator, resolution: int) -> BoxPrompt:
    """Corner jitter ~ N(0, 0.05 * box size), clipped, min 2 px extent."""
    x1, y1, x2, y2 = ann.box
    w, h = x2 - x1, y2 - y1
    jitter = rng.normal(0, 0.05, size=4) * np.array([w, h, w, h])
    nx1 = float(np.clip(x1 + jitter[0], 0, resolution - 3))
    ny1 = float(np.clip(y1 + jitter[1], 0, resolution - 3))
    nx2 = float(np.clip(x2 + jitter[2], nx1 + 2, resolution - 1))
    ny2 = float(np.clip(y2 + jitter[3], ny1 + 2, resolution - 1))
    return BoxPrompt(nx1, ny1, nx2, ny2)


def positive_click_prompt(ann: ObjectAnnotation, rng: np.random.Generator) -> PointsPrompt:
    ys, xs = np.nonzero(ann.mask)
    i = int(rng.integers(len(xs)))
    return PointsPrompt(((float(xs[i]), float(ys[i])),), (POSITIVE,))


def interactive_prompt(task: str, ann: ObjectAnnotation, rng: np.random.Generator, resolution: int):
    if rng.random() < 0.5:
        return noisy_box_prompt(ann, rng, resolution)
    return positive_click_prompt(ann, rng)


def sample_corrective_click(pred_mask: np.ndarray, gt_mask: np.ndarray, rng: np.random.Generator):
    """Positive click from GT-minus-pred, negative from pred-minus-GT;
    region chosen with probability proportional to its area.  Returns
    ((x, y), label) or None when prediction matches ground truth exactly."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("corrective click masks must share a shape")
    false_neg = gt & ~pred
    false_pos = pred & ~gt
    n_fn, n_fp = int(false_neg.sum()), int(false_pos.sum())
    if n_fn + n_fp == 0:
        return None
    take_fn = rng.random() < n_fn / (n_fn + n_fp)
    region, label = (false_neg, POSITIVE) if take_fn else (false_pos, NEGATIVE)
    ys, xs = np.nonzero(region)
    i = int(rng.integers(len(xs)))
    return (float(xs[i]), float(ys[i])), label


# ---------------------------------------------------------------------------
# episode unroll


def run_episode(model: Tracker, episode: Episode, config: TrainConfig, rng: np.random.Generator, bank_trace=None):
    """Forward one episode; returns (total loss Tensor, per-term sums, count).

    ``bank_trace``, when given, collects (frame, object, retained frame
    indices) snapshots after every memory push, for FIFO verification.
    """
    resolution = model.config.resolution
    banks = {o: MemoryBank(capacity=model.config.memory_capacity) for o in episode.objects}
    terms: dict[str, float] = {}
    losses = []
    supervised = 0
    for t in range(len(episode.frames)):
        features = model.encode_frame(episode.frames[t], episode.task)
        for obj in episode.objects:
            ann = episode.annotations[t].get(obj, _INVISIBLE)
            target = episode.targets[t][obj]
            is_conditional = t in episode.conditional_indices and _object_trackable(ann, episode.task)
            if is_conditional and episode.prompt_mode == "normal":
                prompt = normal_prompt(episode.task, ann, episode.gaussian, resolution)
                banks[obj].push(model.memory_from_prompt(episode.task, features, prompt, t))
                if bank_trace is not None:
                    bank_trace.append((t, obj, tuple(banks[obj].frame_indices)))
                continue
            if is_conditional:  # interactive
                prompts = [interactive_prompt(episode.task, ann, rng, resolution)]
                prediction = model.predict_frame(episode.task, features, banks[obj], t, prompts, "train")
                total, breakdown, _ = task_loss(episode.task, prediction, target, weights_for_task(episode.task), resolution)
                losses.append(total)
                supervised += 1
                _merge_terms(terms, breakdown)
                if t in episode.corrective_indices:
                    clicks: list[tuple[tuple[float, float], int]] = []
                    for _ in range(config.max_corrective_points):
                        chosen = select_candidate(prediction.iou_scores)
                        pred_mask = prediction.candidate_logits[chosen].data > 0
                        click = sample_corrective_click(pred_mask, ann.mask > 0, rng)
                        if click is None:
                            break
                        clicks.append(click)
                        click_prompt = PointsPrompt(tuple(c for c, _ in clicks), tuple(l for _, l in clicks))
                        prediction = model.predict_frame(
                            episode.task, features, banks[obj], t, prompts + [click_prompt], "train"
                        )
                        total, breakdown, _ = task_loss(
                            episode.task, prediction, target, weights_for_task(episode.task), resolution
                        )
                        losses.append(total)
                        supervised += 1
                        _merge_terms(terms, breakdown)
                banks[obj].push(model.memory_from_prediction(episode.task, features, prediction, t, conditional=True))
                if bank_trace is not None:
                    bank_trace.append((t, obj, tuple(banks[obj].frame_indices)))
                continue
            prediction = model.predict_frame(episode.task, features, banks[obj], t, None, "train")
            total, breakdown, _ = task_loss(episode.task, prediction, target, weights_for_task(episode.task), resolution)
            losses.append(total)
            supervised += 1
            _merge_terms(terms, breakdown)
            banks[obj].push(model.memory_from_prediction(episode.task, features, prediction, t, conditional=False))
            if bank_trace is not None:
                bank_trace.append((t, obj, tuple(banks[obj].frame_indices)))
    if not losses:
        raise RuntimeError("episode produced no supervised frames")
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / supervised), terms, supervised


def _merge_terms(into: dict[str, float], terms: dict[str, float]) -> None:
    for key, value in terms.items():
        into[key] = into.get(key, 0.0) + value


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices only."""

    def __init__(self, named_params, lr: float, backbone_lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.backbone_lr = backbone_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            base_lr = self.backbone_lr if name.startswith("image_encoder.") else self.lr
            lr = base_lr * lr_scale
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if param.data.ndim >= 2 and self.weight_decay:
                param.data = param.data - lr * self.weight_decay * param.data
            param.data = param.data - lr * update


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def cosine_lr_scale(step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return 1.0
    progress = min(step / total_steps, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# data pool


class ScenePool:
    """Seeded pool of synthetic scenes with a small render cache."""

    def __init__(self, resolution: int, frame_count: int, seed: int, size: int = 48, kinds=PRESET_KINDS):
        rng = np.random.default_rng(seed)
        self.specs = [
            preset_scene(kinds[int(rng.integers(len(kinds)))], seed=int(rng.integers(2**31 - 1)),
                         resolution=resolution, frame_count=frame_count)
            for _ in range(size)
        ]
        self._cache: dict[int, tuple[np.ndarray, list]] = {}

    def sample(self, rng: np.random.Generator):
        idx = int(rng.integers(len(self.specs)))
        if idx not in self._cache:
            if len(self._cache) > 16:
                self._cache.pop(next(iter(self._cache)))
            self._cache[idx] = generate_sequence(self.specs[idx])
        return self._cache[idx]


# ---------------------------------------------------------------------------
# augmentation


def augment_episode(frames: np.ndarray, annotations, rng: np.random.Generator, resolution: int):
    """Horizontal flip (p=0.5) plus brightness jitter; annotations follow."""
    frames = frames.copy()
    if rng.random() < 0.5:
        frames = frames[..., ::-1].copy()
        flipped = []
        for frame_ann in annotations:
            out = {}
            for obj, ann in frame_ann.items():
                mask = ann.mask[:, ::-1].copy()
                box = None
                if ann.box is not None:
                    x1, y1, x2, y2 = ann.box
                    box = (resolution - 1 - x2, y1, resolution - 1 - x1, y2)
                point = None
                if ann.point is not None:
                    point = (resolution - 1 - ann.point[0], ann.point[1])
                out[obj] = ObjectAnnotation(mask=mask, visible=ann.visible, box=box, point=point)
            flipped.append(out)
        annotations = flipped
    gain = rng.uniform(0.9, 1.1)
    frames = np.clip(frames * gain, 0.0, 1.0)
    return frames, annotations


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepRecord:
    step: int
    epoch: int
    task: str
    loss: float
    lr_scale: float
    grad_norm: float
    terms: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "epoch": self.epoch,
                "task": self.task,
                "loss": round(self.loss, 6),
                "lr_scale": round(self.lr_scale, 6),
                "grad_norm": round(self.grad_norm, 6),
                **{f"term_{k}": round(v, 6) for k, v in sorted(self.terms.items())},
            }
        )


class Trainer:
    def __init__(self, model: Tracker, config: TrainConfig, pool: ScenePool | None = None):
        self.model = model
        self.config = config
        self.schedule = GaussianSchedule(config.gaussian_stages)
        self.pool = pool or ScenePool(
            model.config.resolution, max(config.frames_per_episode + 4, 12), seed=config.seed + 7_777
        )
        self.optimizer = AdamW(
            model.named_parameters(),
            lr=config.learning_rate,
            backbone_lr=config.backbone_learning_rate,
            weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng(config.seed)
        self.records: list[StepRecord] = []
        self._pool_executor = None

    # -- episode batch -----------------------------------------------------------

    def _build_batch(self, task: str, epoch: int) -> list[Episode]:
        gaussian = self.schedule.lookup(epoch, self.model.config.resolution)
        episodes: list[Episode] = []
        attempts = 0
        while len(episodes) < self.config.batch_size:
            attempts += 1
            if attempts > 200:
                raise RuntimeError("could not sample a valid batch; data too sparse")
            frames, annotations = self.pool.sample(self.rng)
            if self.config.augment:
                frames, annotations = augment_episode(frames, annotations, self.rng, self.model.config.resolution)
            episode = build_episode(
                frames, annotations, task, self.config, self.rng, gaussian, self.model.config.resolution
            )
            if episode is not None:
                episodes.append(episode)
        return episodes

    # -- gradients ----------------------------------------------------------------

    def _episode_grads(self, episode: Episode, seed: int):
        rng = np.random.default_rng(seed)
        self.model.zero_grad()
        loss, terms, supervised = run_episode(self.model, episode, self.config, rng)
        backward(loss)
        grads = {name: (p.grad.copy() if p.grad is not None else None) for name, p in self.model.named_parameters()}
        return float(loss.data), terms, grads

    def train_step(self, step: int, epoch: int, task: str | None = None) -> StepRecord:
        task = task or sample_task(self.rng, self.config.sample_probs)
        episodes = self._build_batch(task, epoch)
        seeds = [int(self.rng.integers(2**31 - 1)) for _ in episodes]

        total_loss = 0.0
        terms_sum: dict[str, float] = {}
        grad_sum: dict[str, np.ndarray] = {}
        results = self._run_episodes(episodes, seeds)
        for loss_value, terms, grads in results:
            if not math.isfinite(loss_value):
                raise FloatingPointError(f"non-finite loss at step {step} (task {task})")
            total_loss += loss_value
            _merge_terms(terms_sum, terms)
            for name, g in grads.items():
                if g is None:
                    continue
                if name in grad_sum:
                    grad_sum[name] += g
                else:
                    grad_sum[name] = g.copy()
        scale = 1.0 / len(episodes)
        for g in grad_sum.values():
            g *= scale
        grad_norm = clip_gradients(grad_sum, self.config.grad_clip_norm)
        total_steps = self.config.epochs * self.config.steps_per_epoch
        lr_scale = cosine_lr_scale(step, total_steps)
        self.optimizer.step(grad_sum, lr_scale=lr_scale)
        from .nn import clear_merged_weights

        clear_merged_weights(self.model)  # cached inference weights are now stale
        self.model.zero_grad()
        record = StepRecord(
            step=step,
            epoch=epoch,
            task=task,
            loss=total_loss * scale,
            lr_scale=lr_scale,
            grad_norm=grad_norm,
            terms={k: v * scale for k, v in terms_sum.items()},
        )
        self.records.append(record)
        return record

    def _run_episodes(self, episodes, seeds):
        if self.config.workers <= 1:
            return [self._episode_grads(ep, seed) for ep, seed in zip(episodes, seeds)]
        return self._run_parallel(episodes, seeds)

    def _run_parallel(self, episodes, seeds):
        if self._pool_executor is None:
            import dataclasses as dc

            self._pool_executor = ProcessPoolExecutor(
                max_workers=self.config.workers,
                initializer=_worker_init,
                initargs=(dc.asdict(self.model.config), dc.asdict(self.config)),
            )
        state = self.model.state_dict()
        futures = [
            self._pool_executor.submit(_worker_episode, state, episode, seed)
            for episode, seed in zip(episodes, seeds)
        ]
        return [f.result() for f in futures]

    # -- full loop -----------------------------------------------------------------

    def train(self, log_path: str | Path | None = None, progress: bool = False) -> list[StepRecord]:
        log_lines = []
        step = 0
        started = time.time()
        for epoch in range(self.config.epochs):
            for _ in range(self.config.steps_per_epoch):
                record = self.train_step(step, epoch)
                log_lines.append(record.to_json())
                if progress and step % 10 == 0:
                    elapsed = time.time() - started
                    print(f"[{elapsed:7.1f}s] step {step:4d} epoch {epoch} task {record.task:5s} loss {record.loss:.4f}")
                step += 1
        if self._pool_executor is not None:
            self._pool_executor.shutdown()
            self._pool_executor = None
        if log_path is not None:
            from .checkpoint import atomic_write_text

            atomic_write_text(log_path, "\n".join(log_lines) + "\n")
        return self.records


# worker-side globals for process-pool gradient evaluation
_WORKER_MODEL: Tracker | None = None
_WORKER_TRAIN: TrainConfig | None = None


def _worker_init(model_cfg: dict, train_cfg: dict) -> None:
    global _WORKER_MODEL, _WORKER_TRAIN
    _WORKER_MODEL = Tracker(ModelConfig(**model_cfg), seed=0)
    train_cfg = dict(train_cfg)
    train_cfg["gaussian_stages"] = tuple(tuple(s) for s in train_cfg["gaussian_stages"])
    train_cfg["sample_probs"] = tuple(train_cfg["sample_probs"])
    _WORKER_TRAIN = TrainConfig(**train_cfg)


def _worker_episode(state: dict[str, np.ndarray], episode: Episode, seed: int):
    model = _WORKER_MODEL
    model.load_state_dict(state)
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss, terms, _ = run_episode(model, episode, _WORKER_TRAIN, rng)
    backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else None) for name, p in model.named_parameters()}
    model.zero_grad()
    return float(loss.data), terms, grads
