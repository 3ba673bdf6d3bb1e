"""Assembled tracker: image encoder, prompt encoder, memory, decoder.

The image encoder is a small stride-16 convolutional stack (the paper-scale
hierarchical backbone is out of scope at desk size).  Everything downstream
follows the promptable-decoder / memory-attention pipeline: frame features
are conditioned on the task's memory bank, fused with prompt embeddings in
the two-way decoder, and the selected mask output is folded back into
memory through the task's own encoder.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad, relu, sigmoid
from .config import TASKS, ModelConfig
from .decoder import Prediction, TrainPrediction, UnifiedDecoder, extract_point, select_candidate
from .memory import MemoryBank, MemoryEntry, TaskMemory, _norm_chw
from .nn import Conv2d, LayerNorm, LowRankAdapter, Module
from .prompts import (
    BoxPrompt,
    MaskPrompt,
    PointGaussianPrompt,
    Prompt,
    PromptEncoder,
    count_prompt_points,
    gaussian_point_map,
)


class ImageEncoder(Module):
    """Four stride-2 convolutions: (3, S, S) -> (C, S/16, S/16)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.channels
        dtype = config.np_dtype
        widths = [3, max(c // 4, 8), max(c // 2, 16), c, c]
        self.convs = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1, dtype=dtype) for i in range(4)]
        self.norms = [LayerNorm(widths[i + 1], dtype=dtype) for i in range(4)]
        # optional per-task adapters on the conv weights (flattened matrices);
        # off by default, see ModelConfig.image_encoder_lora
        if config.image_encoder_lora:
            self.lora = {
                task: [
                    LowRankAdapter(conv.weight.shape[0], int(np.prod(conv.weight.shape[1:])), config.lora_rank,
                                   config.lora_alpha, rng, dtype)
                    for conv in self.convs
                ]
                for task in TASKS
            }
        else:
            self.lora = {}

    def forward(self, frame: Tensor, task: str | None = None) -> Tensor:
        x = frame
        adapters = self.lora.get(task) if (task and self.lora) else None
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            delta = adapters[i].delta().reshape(conv.weight.shape) if adapters else None
            x = relu(_norm_chw(conv(x, weight_delta=delta), norm))
        return x

    __call__ = forward


def prompt_mask_form(prompt: Prompt, resolution: int) -> np.ndarray:
    """Mask-form rendering of a ground-truth prompt, the unified memory input:
    masks stay themselves, boxes fill their rectangle, point prompts use
    their Gaussian map."""
    if isinstance(prompt, MaskPrompt):
        return np.asarray(prompt.mask, dtype=np.float64)
    if isinstance(prompt, BoxPrompt):
        out = np.zeros((resolution, resolution))
        ys = np.arange(resolution)
        xs = np.arange(resolution)
        inside_y = (ys >= prompt.y1) & (ys <= prompt.y2)
        inside_x = (xs >= prompt.x1) & (xs <= prompt.x2)
        out[np.ix_(inside_y, inside_x)] = 1.0
        return out
    if isinstance(prompt, PointGaussianPrompt):
        return np.asarray(prompt.map, dtype=np.float64)
    raise TypeError(f"no mask form for prompt type {type(prompt).__name__}")


class Tracker(Module):
    """The unified multi-granularity tracker."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.image_encoder = ImageEncoder(config, rng)
        self.prompt_encoder = PromptEncoder(config.resolution, config.channels, config.feature_stride, rng, config.np_dtype)
        self.memory = TaskMemory(config, rng)
        self.decoder = UnifiedDecoder(config, rng)
        self.bind_names()

    # -- forward pieces --------------------------------------------------------

    def encode_frame(self, frame: np.ndarray | Tensor, task: str | None = None) -> Tensor:
        x = frame if isinstance(frame, Tensor) else Tensor(np.asarray(frame, dtype=self.config.np_dtype))
        if x.shape != (3, self.config.resolution, self.config.resolution):
            raise ValueError(f"frame must be (3, {self.config.resolution}, {self.config.resolution}), got {x.shape}")
        return self.image_encoder(x, task)

    def predict_frame(
        self,
        task: str,
        features: Tensor,
        bank: MemoryBank,
        frame_index: int,
        prompts: list[Prompt] | None = None,
        mode: str = "infer",
    ) -> TrainPrediction:
        """Condition on memory, fuse prompts, decode one (frame, object).

        Multi-candidate gating: with no prompt or at most one point
        (a box counts as two), all mask tokens are active; richer prompts
        switch to the single-candidate path.
        """
        prompts = prompts or []
        conditioned = self.memory.memory_attention(task, features, bank, frame_index)
        embeddings = self.prompt_encoder.encode(prompts)
        multimask = count_prompt_points(prompts) <= 1
        return self.decoder.decode(
            conditioned,
            embeddings.dense,
            embeddings.sparse,
            multimask,
            mode,
            with_boxes=(task == "box"),
            with_points=(task == "point"),
        )

    # -- memory writes ------------------------------------------------------------

    def memory_from_prediction(
        self, task: str, features: Tensor, prediction: TrainPrediction, frame_index: int, conditional: bool = False
    ) -> MemoryEntry:
        selected = select_candidate(prediction.iou_scores)
        probs = sigmoid(prediction.candidate_logits[selected])
        spatial = self.memory.encode_memory(task, features, probs)
        pointer = self.memory.make_object_pointer(prediction.mask_token_outputs[selected])
        return MemoryEntry(spatial=spatial, object_pointer=pointer, frame_index=frame_index, is_conditional=conditional)

    def memory_from_prompt(self, task: str, features: Tensor, prompt: Prompt, frame_index: int) -> MemoryEntry:
        """Ground-truth prompts convert straight to memory, skipping prediction."""
        mask_form = Tensor(prompt_mask_form(prompt, self.config.resolution).astype(self.config.np_dtype))
        spatial = self.memory.encode_memory(task, features, mask_form)
        return MemoryEntry(spatial=spatial, object_pointer=None, frame_index=frame_index, is_conditional=True)

    # -- plain-array outputs ---------------------------------------------------------

    def prediction_outputs(self, task: str, prediction: TrainPrediction) -> Prediction:
        """Convert a decode result into the numpy-facing Prediction record."""
        with no_grad():
            logits = np.stack([m.data for m in prediction.candidate_logits])
            iou = prediction.iou_scores.data.copy()
            selected = select_candidate(iou)
            box = None
            if task == "box" and prediction.boxes is not None:
                box = tuple(float(v) for v in prediction.boxes[selected].data)
            point = None
            if task == "point":
                point = extract_point(prediction.candidate_logits[selected], "infer")
            return Prediction(
                mask_logits=logits,
                iou_scores=iou,
                occlusion_logit=float(prediction.occlusion_logit.data),
                selected_index=selected,
                box=box,
                point=point,
            )

    def point_prompt(self, x: float, y: float, radius: float, sigma: float) -> PointGaussianPrompt:
        s = self.config.resolution
        return PointGaussianPrompt(x, y, gaussian_point_map((x, y), sigma=sigma, radius=radius, h=s, w=s))


def build_tracker(config: ModelConfig | None = None, seed: int = 0) -> Tracker:
    return Tracker(config or ModelConfig(), seed=seed)
