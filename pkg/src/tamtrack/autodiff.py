"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array together with an optional gradient.
Every differentiable op records a backward closure on a per-forward tape
(the graph hanging off ``_parents``); :func:`backward` replays that tape in
reverse topological order.  The engine is deliberately small: float64 is
the default dtype and is what every test oracle runs in, float32 is
accepted for faster training, and higher-order derivatives are not
supported (the tape holds plain numpy arrays, not tensors).

Gradient recording can be suspended with :func:`no_grad` for inference.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "backward",
    "forward_backward",
    "finite_difference_grad",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording; ops inside return plain constant tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        raise TypeError("expected raw array data, got Tensor")
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array node in the autodiff graph.

    ``data`` is row-major numpy storage; ``grad`` (same shape) is populated
    by :func:`backward` for tensors with ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph plumbing -------------------------------------------------------

    @property
    def _needs_graph(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    # operators defined after the op functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable tensor; ``name`` is bound by the owning model tree."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name or '<unnamed>'}, shape={self.data.shape})"


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _coerce(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _const_like(value, ref)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p._needs_graph for p in parents):
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes introduced by broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    # stable log(1 + exp(x)) = max(x, 0) + log1p(exp(-|x|)); derivative sigmoid(x)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def arctan(a: Tensor) -> Tensor:
    return _make(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),))


def maximum(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    pick_a = a.data >= b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * pick_a, a.shape),
            _unbroadcast(g * ~pick_a, b.shape),
        )

    return _make(np.maximum(a.data, b.data), (a, b), backward_fn)


def minimum(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    pick_a = a.data <= b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * pick_a, a.shape),
            _unbroadcast(g * ~pick_a, b.shape),
        )

    return _make(np.minimum(a.data, b.data), (a, b), backward_fn)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward_fn(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def take(a: Tensor, index) -> Tensor:
    """Indexing/slicing; integer-array indices accumulate on backward."""
    out = a.data[index]

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        if _index_is_basic(index):
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(out, (a,), backward_fn)


def _index_is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice, type(Ellipsis), type(None))) for i in items)


# -- reductions ----------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands must be at least 2-D (numpy broadcasting
    applies over any leading dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D; reshape vectors first")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), backward_fn)


# -- graph execution -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``grad`` of every requires_grad leaf."""
    if grad is None:
        if output.size != 1:
            raise ValueError("backward() without explicit gradient requires a scalar output")
        grad = np.ones_like(output.data)
    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent._needs_graph:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def forward_backward(output: Tensor, parameters: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Backprop a scalar and return a gradient per parameter.

    Parameters unreachable from ``output`` get zero gradients.
    """
    params = list(parameters)
    if output.size != 1:
        raise ValueError("forward_backward expects a scalar output")
    for p in params:
        p.grad = None
    backward(output)
    grads = {}
    for p in params:
        grads[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, per element.

    This is the independent oracle against which analytic gradients are
    checked; it never touches the tape (f is re-evaluated under no_grad).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    grad_flat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(base.copy())).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            grad_flat[i] = (hi - lo) / (2.0 * eps)
    return grad
