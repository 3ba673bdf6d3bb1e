"""Unified decoder: two-way transformer plus mask / box / point heads.

Prompt rows and a set of learnable tokens (existence, IoU rating, N mask
tokens) attend back and forth with the memory-conditioned image grid.  The
image features are then upsampled 4x; each mask token yields a candidate
logit map by per-pixel dot product, the IoU head rates the candidates, the
existence token drives an occlusion logit, a corner head regresses a box
from token-modulated features, and the point readout is the (soft-)argmax
of the selected candidate map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, concat, maximum, minimum, relu, sigmoid, stack
from .config import ModelConfig
from .nn import (
    AttentionBlock,
    Conv2d,
    FourierPositionEncoding,
    LayerNorm,
    Linear,
    MLP,
    Module,
    interpolate_bilinear,
    spatial_soft_argmax,
)


@dataclass
class TrainPrediction:
    """Tensor-valued prediction for one (frame, object); feeds the losses."""

    candidate_logits: list  # n_active tensors (S, S)
    iou_scores: Tensor  # (n_active,)
    occlusion_logit: Tensor  # scalar
    boxes: list | None  # n_active tensors (4,) in pixels, or None
    points: list | None  # n_active tensors (2,) in pixels, or None
    mask_token_outputs: list = field(default_factory=list)  # (1, C) per candidate
    candidate_ids: tuple = ()


@dataclass
class Prediction:
    """Plain-array prediction emitted by inference for one (frame, object)."""

    mask_logits: np.ndarray  # (n_active, S, S)
    iou_scores: np.ndarray  # (n_active,)
    occlusion_logit: float
    selected_index: int
    box: tuple[float, float, float, float] | None = None
    point: tuple[float, float] | None = None

    @property
    def selected_mask_logits(self) -> np.ndarray:
        return self.mask_logits[self.selected_index]

    @property
    def predicted_visible(self) -> bool:
        return self.occlusion_logit < 0


def select_candidate(iou_scores) -> int:
    """Highest predicted IoU wins; ties resolve to the lowest index."""
    scores = np.asarray(iou_scores.data if isinstance(iou_scores, Tensor) else iou_scores)
    if scores.size == 0:
        raise ValueError("no candidates to select from")
    return int(np.argmax(scores))


def extract_point(mask_logits, mode: str) -> tuple:
    """Point readout from a logit map.

    infer: coordinates of the maximum (row-major first occurrence on ties),
    returned as floats.  train: differentiable spatial soft-argmax Tensor.
    """
    if mode == "infer":
        data = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits)
        flat = int(np.argmax(data))
        y, x = divmod(flat, data.shape[1])
        return (float(x), float(y))
    if mode == "train":
        logits = mask_logits if isinstance(mask_logits, Tensor) else Tensor(mask_logits)
        return spatial_soft_argmax(logits)
    raise ValueError(f"unknown extract_point mode {mode!r}")


class TwoWayLayer(Module):
    """One round of token self-attention, token->image and image->token
    cross-attention with post-norm residuals."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64):
        self.self_attn = AttentionBlock(dim, heads, rng, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.cross_t2i = AttentionBlock(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP([dim, dim * 4, dim], rng, dtype=dtype)
        self.norm3 = LayerNorm(dim, dtype=dtype)
        self.cross_i2t = AttentionBlock(dim, heads, rng, dtype=dtype)
        self.norm4 = LayerNorm(dim, dtype=dtype)

    def forward(self, tokens: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.cross_t2i(tokens, image, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(image, tokens, tokens))
        return tokens, image

    __call__ = forward


class TwoWayTransformer(Module):
    def __init__(self, dim: int, heads: int, layers: int, rng, dtype=np.float64):
        self.layers = [TwoWayLayer(dim, heads, rng, dtype) for _ in range(layers)]
        self.final_t2i = AttentionBlock(dim, heads, rng, dtype=dtype)
        self.final_norm = LayerNorm(dim, dtype=dtype)

    def forward(self, tokens: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            tokens, image = layer(tokens, image)
        tokens = self.final_norm(tokens + self.final_t2i(tokens, image, image))
        return tokens, image

    __call__ = forward


class CornerHead(Module):
    """Token-modulated features feed two conv branches; the box corners are
    the soft-argmax of the top-left / bottom-right heatmaps."""

    def __init__(self, feat_ch: int, rng, dtype=np.float64):
        self.modulation = Linear(feat_ch * 4, feat_ch, rng, dtype)  # token C -> C/4 channels
        mid = max(feat_ch // 2, 4)
        self.tl_branch = self._branch(feat_ch, mid, rng, dtype)
        self.br_branch = self._branch(feat_ch, mid, rng, dtype)

    @staticmethod
    def _branch(ch: int, mid: int, rng, dtype):
        return [
            Conv2d(ch, mid, 3, rng, padding=1, dtype=dtype),
            Conv2d(mid, mid, 3, rng, padding=1, dtype=dtype),
            Conv2d(mid, 1, 1, rng, dtype=dtype),
        ]

    def heatmaps(self, feats: Tensor, mask_token: Tensor) -> tuple[Tensor, Tensor]:
        ch = feats.shape[0]
        gate = sigmoid(self.modulation(mask_token)).reshape(ch, 1, 1)
        x = feats * gate
        return self._run(self.tl_branch, x), self._run(self.br_branch, x)

    @staticmethod
    def _run(branch, x: Tensor) -> Tensor:
        for i, conv in enumerate(branch):
            x = conv(x)
            if i < len(branch) - 1:
                x = relu(x)
        return x.reshape(x.shape[1], x.shape[2])

    def forward(self, feats: Tensor, mask_token: Tensor, resolution: int) -> Tensor:
        """Box (x1, y1, x2, y2) in image pixels, corners swapped into order."""
        tl_map, br_map = self.heatmaps(feats, mask_token)
        stride = resolution / tl_map.shape[1]
        tl = spatial_soft_argmax(tl_map) * stride + (stride * 0.5 - 0.5)
        br = spatial_soft_argmax(br_map) * stride + (stride * 0.5 - 0.5)
        x1 = minimum(tl[0:1], br[0:1])
        x2 = maximum(tl[0:1], br[0:1])
        y1 = minimum(tl[1:2], br[1:2])
        y2 = maximum(tl[1:2], br[1:2])
        return concat([x1, y1, x2, y2], axis=0)

    __call__ = forward


class UnifiedDecoder(Module):
    """Promptable decoder emitting mask candidates plus box/point readouts."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.channels
        dtype = config.np_dtype
        n = config.num_mask_tokens
        self.config = config
        self.obj_token = Parameter((rng.standard_normal(c) * 0.02).astype(dtype))
        self.iou_token = Parameter((rng.standard_normal(c) * 0.02).astype(dtype))
        self.mask_tokens = Parameter((rng.standard_normal((n, c)) * 0.02).astype(dtype))
        self.transformer = TwoWayTransformer(c, config.attention_heads, config.decoder_layers, rng, dtype)
        half, quarter = c // 2, c // 4
        self.up_conv1 = Conv2d(c, half, 3, rng, padding=1, dtype=dtype)
        self.up_norm1 = LayerNorm(half, dtype=dtype)
        self.up_conv2 = Conv2d(half, quarter, 3, rng, padding=1, dtype=dtype)
        self.up_norm2 = LayerNorm(quarter, dtype=dtype)
        self.mask_mlps = [MLP([c, c, quarter], rng, dtype) for _ in range(n)]
        self.iou_head = MLP([c, c, n], rng, dtype)
        self.occlusion_head = MLP([c, c, 1], rng, dtype)
        self.corner_head = CornerHead(quarter, rng, dtype)
        self.image_pe = FourierPositionEncoding(c, seed=23, dtype=dtype)
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- pieces ---------------------------------------------------------------

    def _grid_pe(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pe_cache:
            self._pe_cache[key] = self.image_pe.grid(h, w)
        return self._pe_cache[key]

    def two_way_decode(self, cond_features: Tensor, dense: Tensor, sparse: Tensor):
        """Run twTrans over [sparse; learnable tokens] and the prompt-added
        image grid; returns (upsampled features, token outputs, k_sparse)."""
        c, h, w = cond_features.shape
        if dense.shape != (c, h, w):
            raise ValueError(f"dense prompt shape {dense.shape} != features {cond_features.shape}")
        if sparse.shape[-1] != c:
            raise ValueError("sparse prompt channel mismatch")
        image = (cond_features + dense).reshape(c, h * w).transpose()
        image = image + Tensor(self._grid_pe(h, w))
        k = sparse.shape[0]
        tokens = concat(
            [sparse, self.obj_token.reshape(1, c), self.iou_token.reshape(1, c), self.mask_tokens],
            axis=0,
        ) if k else concat(
            [self.obj_token.reshape(1, c), self.iou_token.reshape(1, c), self.mask_tokens], axis=0
        )
        tokens_out, image_out = self.transformer(tokens, image)
        feats = image_out.transpose().reshape(c, h, w)
        feats = interpolate_bilinear(feats, (2 * h, 2 * w))
        feats = relu(_norm_chw(self.up_conv1(feats), self.up_norm1))
        feats = interpolate_bilinear(feats, (4 * h, 4 * w))
        feats = relu(_norm_chw(self.up_conv2(feats), self.up_norm2))
        return feats, tokens_out, k

    def predict_masks(self, feats: Tensor, tokens_out: Tensor, k_sparse: int, candidate_ids):
        """Candidate logit maps at the upsampled grid plus IoU/occlusion."""
        ch, hh, ww = feats.shape
        obj = tokens_out[k_sparse : k_sparse + 1]
        iou = tokens_out[k_sparse + 1 : k_sparse + 2]
        flat = feats.reshape(ch, hh * ww)
        logit_maps = []
        token_outputs = []
        for i in candidate_ids:
            tok = tokens_out[k_sparse + 2 + i : k_sparse + 3 + i]
            emb = self.mask_mlps[i](tok)  # (1, C/4)
            logit_maps.append((emb @ flat).reshape(hh, ww))
            token_outputs.append(tok)
        iou_all = sigmoid(self.iou_head(iou)).reshape(self.config.num_mask_tokens)
        iou_scores = concat([iou_all[i : i + 1] for i in candidate_ids], axis=0)
        occlusion = self.occlusion_head(obj).reshape(())
        return logit_maps, iou_scores, occlusion, token_outputs

    def decode(
        self,
        cond_features: Tensor,
        dense: Tensor,
        sparse: Tensor,
        multimask: bool,
        mode: str,
        with_boxes: bool = False,
        with_points: bool = False,
    ) -> TrainPrediction:
        """Full decode pass; mode selects train (soft-argmax) or infer readouts.

        Box and point heads run only when requested, so other tasks skip
        their cost.
        """
        s = self.config.resolution
        feats, tokens_out, k = self.two_way_decode(cond_features, dense, sparse)
        ids = tuple(range(self.config.num_mask_tokens)) if multimask else (0,)
        maps, iou_scores, occlusion, token_outputs = self.predict_masks(feats, tokens_out, k, ids)
        full_maps = [interpolate_bilinear(m, (s, s)) for m in maps]
        boxes = [self.corner_head(feats, tok, s) for tok in token_outputs] if with_boxes else None
        points = [extract_point(m, "train") for m in full_maps] if (with_points and mode == "train") else None
        return TrainPrediction(
            candidate_logits=full_maps,
            iou_scores=iou_scores,
            occlusion_logit=occlusion,
            boxes=boxes,
            points=points,
            mask_token_outputs=token_outputs,
            candidate_ids=ids,
        )


def _norm_chw(x: Tensor, norm: LayerNorm) -> Tensor:
    c, h, w = x.shape
    return norm(x.reshape(c, h * w).transpose()).transpose().reshape(c, h, w)


def outer_box_of_mask(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    """Tight box of a binary mask; baseline utility only, not the SOT output."""
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    if ys.size == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
