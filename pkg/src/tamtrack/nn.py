"""Neural building blocks on top of the autodiff engine.

Everything here is shape-explicit and unbatched: images are ``(C, H, W)``,
token sets are ``(n, C)``.  Batching in this codebase happens one episode
at a time, so the layers stay simple and the tape stays small.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    _make,
    concat,
    exp,
    matmul,
    relu,
    reshape,
    sigmoid,
    stack,
    sum_,
    transpose,
)

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "MLP",
    "Conv2d",
    "LowRankAdapter",
    "LoraLinear",
    "lora_merge",
    "AttentionBlock",
    "softmax",
    "attention",
    "conv2d",
    "interpolate_bilinear",
    "spatial_soft_argmax",
    "avg_pool",
    "FourierPositionEncoding",
]


# ---------------------------------------------------------------------------
# module tree


class Module:
    """Base class for parameterized components.

    Child modules and parameters are discovered from instance attributes
    (including lists and string-keyed dicts of modules).  ``bind_names``
    assigns each parameter its dotted path, which is the key used by the
    checkpoint format.
    """

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            yield from _walk(value, path)

    def bind_names(self) -> "Module":
        seen: set[str] = set()
        for name, param in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name: {name}")
            seen.add(name)
            param.name = name
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, path: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{path}.{key}")


# ---------------------------------------------------------------------------
# primitive spatial ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a single image.

    x: (C_in, H, W); weight: (C_out, C_in, k, k); bias: (C_out,) or None.
    Implemented as im2col + matmul with an explicit scatter backward.
    """
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: {cin} vs {cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[1:]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    cols = np.empty((cin, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols_mat = cols.reshape(cin * kh * kw, oh * ow)
    w_mat = weight.data.reshape(cout, cin * kh * kw)
    out = w_mat @ cols_mat
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(cout, oh, ow)

    def backward_fn(g):
        g_mat = g.reshape(cout, oh * ow)
        gw = (g_mat @ cols_mat.T).reshape(weight.shape)
        gb = g_mat.sum(axis=1) if bias is not None else None
        gcols = (w_mat.T @ g_mat).reshape(cin, kh, kw, oh, ow)
        gxp = np.zeros((cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, i, j]
        gx = gxp[:, padding : hp - padding, padding : wp - padding] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward_fn)


def interpolate_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resampling over the last two axes, align-corners-false.

    Constant maps stay constant; sampling is done at output pixel centres
    mapped back with ``src = (dst + 0.5) * (in/out) - 0.5`` and clamped.
    """
    *lead, h, w = x.shape
    oh, ow = out_hw
    y0, y1, wy = _interp_axis(h, oh)
    x0, x1, wx = _interp_axis(w, ow)

    xf = x.data.reshape(-1, h, w)
    b = xf.shape[0]
    w00 = ((1 - wy)[:, None] * (1 - wx)[None, :]).astype(x.data.dtype)
    w01 = ((1 - wy)[:, None] * wx[None, :]).astype(x.data.dtype)
    w10 = (wy[:, None] * (1 - wx)[None, :]).astype(x.data.dtype)
    w11 = (wy[:, None] * wx[None, :]).astype(x.data.dtype)
    out = (
        xf[:, y0[:, None], x0[None, :]] * w00
        + xf[:, y0[:, None], x1[None, :]] * w01
        + xf[:, y1[:, None], x0[None, :]] * w10
        + xf[:, y1[:, None], x1[None, :]] * w11
    )
    out = out.reshape(*lead, oh, ow)

    def backward_fn(g):
        gf = g.reshape(b, oh, ow)
        gx = np.zeros((b, h, w), dtype=g.dtype)
        bidx = np.arange(b)[:, None, None]
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gx, (bidx, yy[None, :, None], xx[None, None, :]), gf * ww)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward_fn)


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling by an integer factor over (…, H, W)."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool: {h}x{w} not divisible by {factor}")
    r = reshape(x, (*lead, h // factor, factor, w // factor, factor))
    return r.mean(axis=(len(lead) + 1, len(lead) + 3))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction on a detached max)."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / sum_(e, axis=axis, keepdims=True)


def attention(queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention: softmax(QK^T/sqrt(d)) V.

    queries: (n, d) or (h, n, d); keys/values share the count m and, for
    keys, the feature dim d.  ``mask`` is boolean with True = attend.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError(f"query/key dims differ: {queries.shape[-1]} vs {keys.shape[-1]}")
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("keys and values must agree in count")
    d = queries.shape[-1]
    scores = matmul(queries, transpose(keys, _swap_last(keys.ndim))) * (1.0 / math.sqrt(d))
    if mask is not None:
        scores = scores + Tensor(np.where(mask, 0.0, -1e30).astype(scores.dtype))
    return matmul(softmax(scores, axis=-1), values)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def spatial_soft_argmax(logits: Tensor) -> Tensor:
    """Expected (x, y) coordinate under the softmax of an (H, W) logit map."""
    h, w = logits.shape
    p = softmax(reshape(logits, (1, h * w)), axis=-1)
    xs = np.tile(np.arange(w, dtype=logits.dtype), h)
    ys = np.repeat(np.arange(h, dtype=logits.dtype), w)
    x = sum_(p * Tensor(xs))
    y = sum_(p * Tensor(ys))
    return stack([x, y])


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        scale = 1.0 / math.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-scale, scale, size=(out_dim, in_dim)).astype(dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, transpose(self.weight))
        if self.bias is not None:
            out = out + self.bias
        return out

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.offset = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps) ** 0.5 * self.gain + self.offset

    __call__ = forward


class MLP(Module):
    """Stack of linears with ReLU between (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, dtype=np.float64):
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype) for i in range(len(dims) - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    __call__ = forward


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dtype=np.float64,
    ):
        scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.weight = Parameter(rng.uniform(-scale, scale, size=(out_ch, in_ch, kernel, kernel)).astype(dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, weight_delta: Tensor | None = None) -> Tensor:
        w = self.weight if weight_delta is None else self.weight + weight_delta
        return conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)

    __call__ = forward


# ---------------------------------------------------------------------------
# low-rank adapters


class LowRankAdapter(Module):
    """Additive low-rank weight delta ``scale * B @ A`` for a 2-D weight.

    B starts at zero so a fresh adapter is an exact identity.
    """

    def __init__(self, out_dim: int, in_dim: int, rank: int, alpha: float, rng: np.random.Generator, dtype=np.float64):
        self.down = Parameter((rng.standard_normal((rank, in_dim)) / math.sqrt(in_dim)).astype(dtype))
        self.up = Parameter(np.zeros((out_dim, rank), dtype=dtype))
        self.rank = rank
        self.scale = alpha / rank

    def delta(self) -> Tensor:
        return matmul(self.up, self.down) * self.scale

    def apply(self, x: Tensor) -> Tensor:
        """Adapter contribution scale * (x A^T) B^T for row-major inputs."""
        return matmul(matmul(x, transpose(self.down)), transpose(self.up)) * self.scale


def clear_merged_weights(root: Module) -> None:
    """Drop all cached merged weights below ``root`` (after param updates)."""
    stack = [root]
    while stack:
        module = stack.pop()
        if isinstance(module, LoraLinear):
            module.clear_merged()
        for v in vars(module).values():
            if isinstance(v, Module):
                stack.append(v)
            elif isinstance(v, (list, tuple)):
                stack.extend(x for x in v if isinstance(x, Module))
            elif isinstance(v, dict):
                stack.extend(x for x in v.values() if isinstance(x, Module))


def lora_merge(base_weight: np.ndarray, adapter: LowRankAdapter) -> np.ndarray:
    """Fold an adapter into its base weight: W' = W + scale * B @ A."""
    delta = adapter.scale * (adapter.up.data @ adapter.down.data)
    if delta.shape != base_weight.shape:
        raise ValueError(f"adapter delta {delta.shape} does not match weight {base_weight.shape}")
    return base_weight + delta


class LoraLinear(Module):
    """Linear layer with one optional low-rank adapter per task key.

    For inference a merged weight per task can be cached (folding the
    adapter into the base weight); the cache is only consulted while
    gradient recording is off and is dropped on ``clear_merged``.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        tasks: Sequence[str],
        rank: int,
        alpha: float,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        self.base = Linear(in_dim, out_dim, rng, dtype)
        self.lora = {t: LowRankAdapter(out_dim, in_dim, rank, alpha, rng, dtype) for t in tasks}
        self._merged: dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, task: str | None = None) -> Tensor:
        from . import autodiff

        if task is not None and not autodiff._grad_enabled:
            merged = self._merged.get(task)
            if merged is not None:
                out = matmul(x, Tensor(merged.T))
                return out + self.base.bias if self.base.bias is not None else out
        out = self.base(x)
        if task is not None:
            out = out + self.lora[task].apply(x)
        return out

    __call__ = forward

    def merged_weight(self, task: str) -> np.ndarray:
        return lora_merge(self.base.weight.data, self.lora[task])

    def cache_merged(self, task: str) -> None:
        self._merged[task] = self.merged_weight(task)

    def clear_merged(self) -> None:
        self._merged.clear()


class AttentionBlock(Module):
    """Multi-head attention with optional per-task adapters on q/k/v/out."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        kv_dim: int | None = None,
        tasks: Sequence[str] | None = None,
        rank: int = 4,
        alpha: float = 8.0,
        dtype=np.float64,
    ):
        kv_dim = kv_dim or dim
        make: Callable[[int, int], Module]
        if tasks:
            make = lambda i, o: LoraLinear(i, o, tasks, rank, alpha, rng, dtype)  # noqa: E731
        else:
            make = lambda i, o: Linear(i, o, rng, dtype)  # noqa: E731
        self.q_proj = make(dim, dim)
        self.k_proj = make(kv_dim, dim)
        self.v_proj = make(kv_dim, dim)
        self.out_proj = make(dim, dim)
        self.heads = heads
        self.dim = dim

    def forward(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, task: str | None = None) -> Tensor:
        args = (task,) if isinstance(self.q_proj, LoraLinear) else ()
        q = self._split(self.q_proj(q_in, *args))
        k = self._split(self.k_proj(k_in, *args))
        v = self._split(self.v_proj(v_in, *args))
        out = attention(q, k, v)
        merged = reshape(transpose(out, (1, 0, 2)), (q_in.shape[0], self.dim))
        return self.out_proj(merged, *args)

    __call__ = forward

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        dh = self.dim // self.heads
        return transpose(reshape(x, (n, self.heads, dh)), (1, 0, 2))


class FourierPositionEncoding:
    """Fixed random-Fourier encoding of normalized 2-D coordinates.

    Not trainable; the frequency matrix is drawn once from a seeded RNG so
    encodings are deterministic across runs.
    """

    def __init__(self, dim: int, seed: int = 17, scale: float = 1.0, dtype=np.float64):
        if dim % 2:
            raise ValueError("encoding dim must be even")
        rng = np.random.default_rng(seed)
        self.freq = (rng.standard_normal((dim // 2, 2)) * scale).astype(dtype)
        self.dim = dim

    def encode(self, coords01: np.ndarray) -> np.ndarray:
        """coords01: (n, 2) in [0, 1]; returns (n, dim)."""
        proj = 2.0 * np.pi * np.asarray(coords01, dtype=self.freq.dtype) @ self.freq.T
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)

    def grid(self, h: int, w: int) -> np.ndarray:
        """Encodings of all pixel centres of an h x w grid, shape (h*w, dim)."""
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return self.encode(np.stack([xx.ravel(), yy.ravel()], axis=-1))
