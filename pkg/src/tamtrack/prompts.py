"""Task prompts and their embedding.

Every task's initial target state becomes a pair of embeddings: sparse
rows (one per encoded point, two per box) and a dense per-cell map.  The
point task carries both a coordinate and a Gaussian map centred on it,
``exp(-d^2 / 2 sigma^2)`` cut to zero outside ``radius``; the coordinate
feeds the sparse path and the map feeds the dense path.  Radius and sigma
shrink over training according to a staged schedule given at reference
resolution 1024 and rescaled linearly to the working resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .autodiff import Parameter, Tensor, concat
from .nn import Conv2d, FourierPositionEncoding, LayerNorm, Module, relu

POSITIVE = 1
NEGATIVE = 0


@dataclass(frozen=True)
class PointsPrompt:
    """Labeled clicks; labels are POSITIVE/NEGATIVE."""

    points: tuple[tuple[float, float], ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels must align")


@dataclass(frozen=True)
class BoxPrompt:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: ({self.x1},{self.y1})-({self.x2},{self.y2})")

    @property
    def corners(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return (self.x1, self.y1), (self.x2, self.y2)


@dataclass(frozen=True)
class MaskPrompt:
    mask: np.ndarray  # binary (S, S)

    def __post_init__(self):
        values = np.unique(self.mask)
        if not np.isin(values, (0, 1)).all():
            raise ValueError("mask prompt must be binary")


@dataclass(frozen=True)
class PointGaussianPrompt:
    """Point-task prompt: exact coordinate plus its Gaussian map."""

    x: float
    y: float
    map: np.ndarray  # (S, S) in [0, 1]

    def __post_init__(self):
        if self.map.min() < 0 or self.map.max() > 1:
            raise ValueError("gaussian map values must lie in [0, 1]")


Prompt = Union[PointsPrompt, BoxPrompt, MaskPrompt, PointGaussianPrompt]


def gaussian_point_map(center: tuple[float, float], sigma: float, radius: float, h: int, w: int) -> np.ndarray:
    """Gaussian bump at ``center`` (x, y) with a hard cutoff at ``radius``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    x0, y0 = center
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    d2 = (xs - x0) ** 2 + (ys - y0) ** 2
    out = np.exp(-d2 / (2.0 * sigma * sigma))
    out[d2 > radius * radius] = 0.0
    return out


@dataclass(frozen=True)
class GaussianSchedule:
    """Contiguous (epoch_start, epoch_end, radius, sigma) stages at 1024 px."""

    stages: tuple[tuple[float, float, float, float], ...]

    REFERENCE_RESOLUTION = 1024

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        prev_end = self.stages[0][0]
        prev_r, prev_s = np.inf, np.inf
        for start, end, radius, sigma in self.stages:
            if start != prev_end:
                raise ValueError("stages must be contiguous and non-overlapping")
            if end <= start:
                raise ValueError("empty stage")
            if radius > prev_r or sigma > prev_s:
                raise ValueError("radius and sigma must be non-increasing")
            prev_end, prev_r, prev_s = end, radius, sigma

    def lookup(self, epoch: float, resolution: int) -> tuple[float, float]:
        """(radius, sigma) for ``epoch``, rescaled by resolution/1024.

        Epochs past the last stage keep the last stage's values.
        """
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        chosen = self.stages[-1]
        for stage in self.stages:
            if stage[0] <= epoch < stage[1]:
                chosen = stage
                break
        scale = resolution / self.REFERENCE_RESOLUTION
        return chosen[2] * scale, chosen[3] * scale

    def final_values(self, resolution: int) -> tuple[float, float]:
        last = self.stages[-1]
        scale = resolution / self.REFERENCE_RESOLUTION
        return last[2] * scale, last[3] * scale


def default_gaussian_schedule() -> GaussianSchedule:
    return GaussianSchedule(((0, 20, 50.0, 16.0), (20, 50, 20.0, 8.0), (50, 100, 5.0, 2.0)))


def schedule_lookup(schedule: GaussianSchedule, epoch: float, resolution: int) -> tuple[float, float]:
    return schedule.lookup(epoch, resolution)


@dataclass
class PromptEmbeddings:
    sparse: Tensor  # (K, C)
    dense: Tensor  # (C, H/16, W/16)


class PromptEncoder(Module):
    """Maps prompts to sparse rows (positional encoding + type embedding)
    and a dense grid (strided convolutions over the mask-form input)."""

    def __init__(self, resolution: int, channels: int, stride: int, rng: np.random.Generator, dtype=np.float64):
        self.resolution = resolution
        self.channels = channels
        self.stride = stride
        self.position = FourierPositionEncoding(channels, seed=17, dtype=dtype)
        init = lambda: Parameter((rng.standard_normal(channels) * 0.02).astype(dtype))  # noqa: E731
        self.point_pos = init()
        self.point_neg = init()
        self.box_tl = init()
        self.box_br = init()
        self.no_mask = init()
        # 16x downscale in four stride-2 convolutions, then project to C
        widths = [1, max(channels // 8, 4), max(channels // 4, 8), max(channels // 2, 16)]
        self.down = [
            Conv2d(widths[i], widths[i + 1] if i + 1 < len(widths) else channels, 3, rng, stride=2, padding=1, dtype=dtype)
            for i in range(4)
        ]
        self.down_norms = [
            LayerNorm(widths[i + 1] if i + 1 < len(widths) else channels, dtype=dtype) for i in range(4)
        ]

    # -- sparse side ---------------------------------------------------------

    def positional_encode(self, point: tuple[float, float]) -> Tensor:
        x, y = point
        self._check_point(x, y)
        coords = np.array([[x / self.resolution, y / self.resolution]])
        return Tensor(self.position.encode(coords)[0])

    def encode_points(self, points: Sequence[tuple[float, float]], labels: Sequence[int]) -> Tensor:
        if len(points) != len(labels):
            raise ValueError("points/labels length mismatch")
        if not points:
            return Tensor(np.zeros((0, self.channels), dtype=self.point_pos.dtype))
        rows = []
        for (x, y), label in zip(points, labels):
            base = self.positional_encode((x, y))
            kind = self.point_pos if label == POSITIVE else self.point_neg
            rows.append((base + kind).reshape(1, self.channels))
        return concat(rows, axis=0)

    def encode_box(self, box: BoxPrompt) -> Tensor:
        tl = (self.positional_encode((box.x1, box.y1)) + self.box_tl).reshape(1, self.channels)
        br = (self.positional_encode((box.x2, box.y2)) + self.box_br).reshape(1, self.channels)
        return concat([tl, br], axis=0)

    # -- dense side ------------------------------------------------------------

    def encode_mask(self, mask: np.ndarray | Tensor) -> Tensor:
        data = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=self.point_pos.dtype)
        if data.shape != (self.resolution, self.resolution):
            raise ValueError(f"mask must be {self.resolution}x{self.resolution}, got {data.shape}")
        x = mask if isinstance(mask, Tensor) else Tensor(data.astype(self.point_pos.dtype))
        x = x.reshape(1, self.resolution, self.resolution)
        for conv, norm in zip(self.down, self.down_norms):
            x = conv(x)
            x = _channels_norm(x, norm)
            x = relu(x)
        return x

    def no_mask_dense(self) -> Tensor:
        grid = self.resolution // self.stride
        ones = Tensor(np.ones((1, grid, grid), dtype=self.no_mask.dtype))
        return self.no_mask.reshape(self.channels, 1, 1) * ones

    # -- combined -------------------------------------------------------------

    def encode(self, prompts: Sequence[Prompt]) -> PromptEmbeddings:
        """Concatenate sparse rows across prompts (input order); the dense
        slot holds the mask-form prompt if one is present, else a learned
        no-mask embedding."""
        sparse_blocks = []
        dense = None
        for prompt in prompts:
            if isinstance(prompt, PointsPrompt):
                sparse_blocks.append(self.encode_points(prompt.points, prompt.labels))
            elif isinstance(prompt, BoxPrompt):
                sparse_blocks.append(self.encode_box(prompt))
            elif isinstance(prompt, MaskPrompt):
                dense = self.encode_mask(prompt.mask)
            elif isinstance(prompt, PointGaussianPrompt):
                sparse_blocks.append(self.encode_points([(prompt.x, prompt.y)], [POSITIVE]))
                dense = self.encode_mask(prompt.map)
            else:
                raise TypeError(f"unknown prompt type: {type(prompt).__name__}")
        blocks = [b for b in sparse_blocks if b.shape[0] > 0]
        if blocks:
            sparse = concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        else:
            sparse = Tensor(np.zeros((0, self.channels), dtype=self.point_pos.dtype))
        if dense is None:
            dense = self.no_mask_dense()
        return PromptEmbeddings(sparse=sparse, dense=dense)

    def _check_point(self, x: float, y: float) -> None:
        if not (0 <= x < self.resolution and 0 <= y < self.resolution):
            raise ValueError(f"point ({x},{y}) outside [0,{self.resolution})^2")


def _channels_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """LayerNorm over the channel axis of a (C, H, W) map."""
    c, h, w = x.shape
    flat = x.reshape(c, h * w).transpose()
    return norm(flat).transpose().reshape(c, h, w)


def count_prompt_points(prompts: Sequence[Prompt]) -> int:
    """Point-equivalent count used by the multi-candidate gate (box = 2)."""
    total = 0
    for prompt in prompts:
        if isinstance(prompt, PointsPrompt):
            total += len(prompt.points)
        elif isinstance(prompt, BoxPrompt):
            total += 2
        elif isinstance(prompt, PointGaussianPrompt):
            total += 1
        elif isinstance(prompt, MaskPrompt):
            total += 3  # full mask: never ambiguous
    return total
