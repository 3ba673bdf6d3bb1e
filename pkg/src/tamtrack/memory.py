"""Task-adaptive memory: encoders, FIFO bank, and adapted memory attention.

Each task owns its convolutional memory encoder outright, and owns a
low-rank adapter on every q/k/v/out projection inside memory attention;
everything else in the model is shared.  The bank keeps spatial memories
plus object pointers in frame order, evicting the oldest non-conditional
entry once capacity is exceeded.  Conditional entries (prompted frames)
are never evicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, concat, relu
from .config import TASKS, ModelConfig
from .nn import AttentionBlock, Conv2d, LayerNorm, Linear, MLP, Module, avg_pool


@dataclass
class MemoryEntry:
    spatial: Tensor  # (C, H/16, W/16)
    object_pointer: Tensor | None  # (C,) or None for prompt-converted entries
    frame_index: int
    is_conditional: bool = False


@dataclass
class MemoryBank:
    """Ordered store with FIFO eviction of non-conditional entries."""

    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)

    def push(self, entry: MemoryEntry) -> None:
        self.entries.append(entry)
        self.entries.sort(key=lambda e: e.frame_index)
        loose = [e for e in self.entries if not e.is_conditional]
        while len(loose) > self.capacity:
            oldest = loose.pop(0)
            self.entries.remove(oldest)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]


def bank_push(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    bank.push(entry)
    return bank


class MemoryEncoder(Module):
    """Convolutional fusion of frame features with a downscaled mask map."""

    def __init__(self, channels: int, stride: int, rng: np.random.Generator, dtype=np.float64):
        self.stride = stride
        self.fuse1 = Conv2d(channels + 1, channels, 3, rng, padding=1, dtype=dtype)
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.fuse2 = Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype=dtype)

    def forward(self, features: Tensor, mask_probs: Tensor) -> Tensor:
        """features: (C, h, w); mask_probs: (S, S) probabilities."""
        s = mask_probs.shape[-1]
        ds = avg_pool(mask_probs.reshape(1, s, s), self.stride)
        x = concat([features, ds], axis=0)
        x = relu(_norm_chw(self.fuse1(x), self.norm1))
        return _norm_chw(self.fuse2(x), self.norm2)

    __call__ = forward


class MemoryAttentionLayer(Module):
    def __init__(self, dim: int, heads: int, rng, tasks, rank: int, alpha: float, dtype=np.float64):
        self.self_attn = AttentionBlock(dim, heads, rng, tasks=tasks, rank=rank, alpha=alpha, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.cross_attn = AttentionBlock(dim, heads, rng, tasks=tasks, rank=rank, alpha=alpha, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP([dim, dim * 4, dim], rng, dtype)
        self.norm3 = LayerNorm(dim, dtype=dtype)

    def forward(self, tokens: Tensor, memory: Tensor, task: str) -> Tensor:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, task=task))
        tokens = self.norm2(tokens + self.cross_attn(tokens, memory, memory, task=task))
        return self.norm3(tokens + self.mlp(tokens))

    __call__ = forward


class TaskMemory(Module):
    """Per-task memory encoders plus shared-weight memory attention whose
    projections carry per-task low-rank adapters."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.channels
        dtype = config.np_dtype
        self.config = config
        if config.decoupled_memory:
            self.encoders = {task: MemoryEncoder(c, config.feature_stride, rng, dtype) for task in TASKS}
            adapter_tasks: tuple[str, ...] | None = TASKS
        else:
            # fully-shared ablation: one encoder, no adapters
            self.encoders = {"shared": MemoryEncoder(c, config.feature_stride, rng, dtype)}
            adapter_tasks = None
        self.attention_layers = [
            MemoryAttentionLayer(c, config.attention_heads, rng, adapter_tasks, config.lora_rank, config.lora_alpha, dtype)
            for _ in range(config.memory_attention_layers)
        ]
        self.pointer_proj = Linear(c, c, rng, dtype)
        # temporal position by age; slot 0 is reserved for conditional entries
        self.temporal_pos = Parameter((rng.standard_normal((config.memory_capacity + 1, c)) * 0.02).astype(dtype))
        self.no_memory = Parameter(np.zeros(c, dtype=dtype))
        from .nn import FourierPositionEncoding

        self.image_pe = FourierPositionEncoding(c, seed=29, dtype=dtype)
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- pieces -----------------------------------------------------------------

    def encode_memory(self, task: str, features: Tensor, mask_probs: Tensor) -> Tensor:
        if task not in TASKS:
            raise KeyError(f"unknown task {task!r}")
        encoder = self.encoders[task] if self.config.decoupled_memory else self.encoders["shared"]
        return encoder(features, mask_probs)

    def make_object_pointer(self, mask_token_output: Tensor) -> Tensor:
        """Linear projection of the selected mask token; (1, C) -> (C,)."""
        out = self.pointer_proj(mask_token_output)
        return out.reshape(out.shape[-1])

    def _grid_pe(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pe_cache:
            self._pe_cache[key] = self.image_pe.grid(h, w)
        return self._pe_cache[key]

    def _memory_rows(self, bank: MemoryBank, current_frame: int) -> Tensor:
        blocks = []
        pointers = []
        for entry in bank.entries:
            c, h, w = entry.spatial.shape
            rows = entry.spatial.reshape(c, h * w).transpose()
            if entry.is_conditional:
                slot = 0
            else:
                age = max(current_frame - entry.frame_index, 1)
                slot = min(age, self.config.memory_capacity)
            rows = rows + self.temporal_pos[slot : slot + 1]
            blocks.append(rows)
            if entry.object_pointer is not None:
                pointers.append(entry.object_pointer.reshape(1, c))
        return concat(blocks + pointers, axis=0)

    def memory_attention(self, task: str, features: Tensor, bank: MemoryBank, current_frame: int) -> Tensor:
        """Condition frame features on the bank; empty bank = first-frame
        bypass that only marks the features with a learned no-memory bias."""
        if task not in TASKS:
            raise KeyError(f"unknown task {task!r}")
        c, h, w = features.shape
        if len(bank) == 0:
            return features + self.no_memory.reshape(c, 1, 1)
        tokens = features.reshape(c, h * w).transpose() + Tensor(self._grid_pe(h, w))
        memory = self._memory_rows(bank, current_frame)
        for layer in self.attention_layers:
            tokens = layer(tokens, memory, task)
        return tokens.transpose().reshape(c, h, w)


def _norm_chw(x: Tensor, norm: LayerNorm) -> Tensor:
    c, h, w = x.shape
    return norm(x.reshape(c, h * w).transpose()).transpose().reshape(c, h, w)
