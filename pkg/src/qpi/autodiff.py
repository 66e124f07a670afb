"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation builds an output :class:`Tensor` whose
``node`` records the parent tensors and a closure mapping the output
gradient to one gradient per parent. :func:`backward` walks the graph in
reverse topological order and accumulates gradients additively.

Broadcasting is deliberately narrow: a rank-1 bias over the last axis, or a
rank-0 (scalar) operand. Everything else must match shapes exactly.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float64
MASK_FILL = -1e9

_state = threading.local()
# op name -> factor applied to that op's input gradients; used only by the
# gradient-check negative control.
_GRAD_FAULTS: dict[str, float] = {}


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def fault_injection(op: str, factor: float = 1.5):
    """Scale the backward output of every ``op`` node by ``factor``."""
    _GRAD_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


@dataclass
class GraphNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: GraphNode | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op, parents, backward_fn)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss`` that requires it."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        parent_grads = t.node.backward_fn(g)
        factor = _GRAD_FAULTS.get(t.node.op)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{t.node.op} backward produced gradient {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _operand(b, a)
    if a.shape == b.shape:
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.ndim == 0:
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, np.asarray(g.sum())))
    if a.ndim == 0:
        return add(b, a)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=lead)))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _operand(b, a)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))
    if b.ndim == 0:
        ad, bd = a.data, b.data
        return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, np.asarray((g * ad).sum())))
    if a.ndim == 0:
        return mul(b, a)
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), "getitem", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor, clamp_min: float | None = None) -> Tensor:
    x = a.data
    if clamp_min is None:
        return _make(np.log(x), "log", (a,), lambda g: (g / x,))
    live = x > clamp_min
    safe = np.where(live, x, clamp_min)
    return _make(np.log(safe), "log", (a,), lambda g: (np.where(live, g / safe, 0.0),))


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    return _make(np.where(live, a.data, 0.0).astype(a.dtype), "relu", (a,), lambda g: (g * live,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make((x * cdf).astype(a.dtype), "gelu", (a,), lambda g: (g * (cdf + x * pdf),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.dtype)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# fused ops with hand-written backward rules


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks positions that may
    receive weight; the others get ``MASK_FILL`` added before normalising.
    """
    if x.shape[-1] < 1:
        raise UsageError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = x.data
    if mask is not None:
        z = z + np.where(mask, 0.0, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y.astype(x.dtype), "softmax", (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise UsageError(f"layer_norm needs a last axis of at least 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], "embedding", (table,), bw)


def unfold(x: Tensor, width: int) -> Tensor:
    """Sliding windows along axis -2: ``[..., n, d] -> [..., n-width+1, width*d]``.

    Window ``i`` is the row-major flattening of ``x[..., i:i+width, :]``.
    """
    n, d = x.shape[-2], x.shape[-1]
    if n < width:
        raise UsageError(f"cannot take windows of width {width} over length {n}")
    m = n - width + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=-2)
    # sliding_window_view puts the window axis last: [..., m, d, width]
    out = np.swapaxes(windows, -1, -2).reshape(x.shape[:-2] + (m, width * d))
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        g = g.reshape(src_shape[:-2] + (m, width, d))
        dx = np.zeros(src_shape, dtype=dtype)
        for j in range(width):
            dx[..., j : j + m, :] += g[..., :, j, :]
        return (dx,)

    return _make(np.ascontiguousarray(out), "unfold", (x,), bw)


def masked_max(x: Tensor, valid: np.ndarray | None = None, axis: int = -2) -> Tensor:
    """Maximum along ``axis`` over positions where ``valid`` is true.

    ``valid`` has the shape of ``x`` with trailing axes after ``axis``
    dropped. The gradient goes to the first maximising position only.
    """
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise UsageError("max over an empty axis")
    z = x.data
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not np.all(valid.any(axis=-1)):
            raise UsageError("max over a slice with no valid position")
        expand = valid.reshape(valid.shape + (1,) * (x.ndim - valid.ndim))
        z = np.where(expand, z, -np.inf)
    idx = np.expand_dims(np.argmax(z, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        dx = np.zeros(src_shape, dtype=dtype)
        np.put_along_axis(dx, idx, np.expand_dims(g, axis), axis=axis)
        return (dx,)

    return _make(out, "max", (x,), bw)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x[..., n, d]`` restricted to rows where ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean: mask {mask.shape} vs input {x.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise UsageError("mean over a slice with every position masked")
    w = (mask / counts)[..., None].astype(x.dtype)
    return _make((x.data * w).sum(axis=-2), "masked_mean", (x,), lambda g: (g[..., None, :] * w,))


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    h: float
    evaluations: int = 0
    elements: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tol}

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest absolute disagreement, relative to the tensor's gradient scale.

    The scale is the larger of the two max-norms, but never below ``floor``;
    tensors whose true gradient vanishes (a key bias, for one) are thereby
    judged on an absolute scale well above finite-difference round-off.
    """
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), floor)
    return float(np.abs(analytic - numeric).max()) / scale


def finite_diff_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``params`` is a :class:`~qpi.registry.ParamRegistry` (or any mapping of
    name to Tensor); every trainable tensor is perturbed element by element.
    """
    first = f().data.copy()
    second = f().data.copy()
    if not np.array_equal(first, second):
        raise UsageError("f is not deterministic (disable dropout before checking gradients)")

    items = [(n, t) for n, t in params.items() if t.requires_grad]
    if names is not None:
        wanted = set(names)
        items = [(n, t) for n, t in items if n in wanted]
    for _, t in items:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in items}

    errors: dict[str, float] = {}
    elements: dict[str, int] = {}
    evaluations = 3
    with no_grad():
        for name, t in items:
            flat = t.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
                evaluations += 2
            errors[name] = relative_error(analytic[name].reshape(-1), numeric, floor)
            elements[name] = flat.size
    return GradCheckReport(errors=errors, tol=tol, h=h, evaluations=evaluations, elements=elements)
