"""Dense float64 tensors with reverse-mode differentiation.

The op set is deliberately small: matmul, add (same shape or trailing-vector
bias), scale, elementwise product, row softmax, layer norm, row gather,
concatenation, mean-squared error and GELU.  A few structural ops (reshape,
axis permutation, full sum) move data around without doing arithmetic.
Everything the model needs is composed from these.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradientError",
    "tensor",
    "constant",
    "matmul",
    "add",
    "sub",
    "scale",
    "mul",
    "softmax_rows",
    "layer_norm",
    "gather",
    "concat",
    "mse",
    "gelu",
    "reshape",
    "permute",
    "sum_all",
    "backward",
    "grad_check",
    "GradCheckResult",
]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised for misuse of backward (non-scalar loss, NaNs in softmax input, ...)."""


class Tensor:
    """A node in the compute graph.

    ``data`` is always a float64 ndarray.  ``grad`` is filled by :func:`backward`
    and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=fn)


# ---------------------------------------------------------------------------
# arithmetic ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared by every leading index of ``a`` or a
    stack with exactly the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector matching ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.ndim == 1 and a.ndim > 1 and b.shape[0] == a.shape[-1]
    if a.shape != b.shape and not bias:
        raise ShapeError(f"add shapes differ: {a.shape} + {b.shape}")
    out = a.data + b.data

    def fn(g):
        gb = None
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return (g if a.requires_grad else None), gb

    return _make(out, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")

    def fn(g):
        return (g * b.data if a.requires_grad else None), (g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise GradientError("softmax_rows received NaN input")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def fn(g):
        gx = g * y
        gx -= y * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return _make(y, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply per-channel gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gbias

    return _make(out, (x, gain, bias), fn)


def gather(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    table = _as_tensor(table)
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather index must be integer, got {index.dtype}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")
    out = table.data[index]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (gt,)

    return _make(out, (table,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (the token axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat shapes incompatible: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences, as a scalar."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.array(np.mean(diff * diff))

    def fn(g):
        gp = (2.0 / n) * g * diff
        return (gp if pred.requires_grad else None), (-gp if target.requires_grad else None)

    return _make(out, (pred, target), fn)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = _as_tensor(x)
    xd = x.data
    sq = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * sq))
    half = 0.5 * (1.0 + th)
    out = xd * half

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (half + 0.5 * xd * (1.0 - th * th) * du),)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# reverse pass


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Propagate d(loss)/d(node) through the graph rooted at ``loss``.

    Every reachable node that requires grad gets ``.grad`` set.  Returns the
    gradients of ``params`` in order; parameters that the loss does not depend
    on get zeros.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = None
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


class GradCheckResult(float):
    """Max relative error, with the number of coordinates checked attached."""

    checked: int
    reliable: bool

    def __new__(cls, value: float, checked: int, reliable: bool = True):
        obj = super().__new__(cls, value)
        obj.checked = checked
        obj.reliable = reliable
        return obj

    @property
    def vacuous(self) -> bool:
        return self.checked == 0


def grad_check(
    closure: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    Returns ``max(|g_a - g_n| / (|g_a| + |g_n| + 1e-12))`` over the checked
    coordinates.  With ``max_coords`` set, that many coordinates per parameter
    are sampled (with ``rng``) instead of checking all of them.  A closure that
    returns different values for the same parameters marks the result
    unreliable.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    params = list(params)
    if not params:
        return GradCheckResult(0.0, 0)
    loss = closure()
    analytic = [g.copy() for g in backward(loss, params)]
    reliable = float(closure().data) == float(loss.data)

    worst = 0.0
    checked = 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(closure().data)
            flat[i] = orig - epsilon
            down = float(closure().data)
            flat[i] = orig
            gn = (up - down) / (2 * epsilon)
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - gn) / (abs(a) + abs(gn) + 1e-12))
            checked += 1
    return GradCheckResult(worst, checked, reliable)
