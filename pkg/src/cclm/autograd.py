"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op produces a new :class:`Tensor` holding its parents and a backward
rule. :func:`backward` linearises the graph reachable from a scalar loss into
a tape (topological order) and replays it in reverse.

Binary ops never broadcast. Shapes must match exactly; use :func:`expand`
or :func:`reshape` to make them agree.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count(1)
_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create tensors in ``dtype`` inside the block (float64 for gradient checks)."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = old


def _grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray) -> Tensor:
    """Tensor around an op result, keeping the dtype numpy produced."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.requires_grad = False
    out.node_id = next(_ids)
    out._parents = ()
    out._backward = None
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = _wrap(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for tensor of rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + x.dtype.type(0.044715) * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = c * (1.0 + x.dtype.type(3 * 0.044715) * (x * x))
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _make(y.astype(x.dtype, copy=False), (a,), rule, "gelu")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; those entries get zero gradient."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: shape mismatch {a.shape} vs mask {mask.shape}")
    y = np.where(mask, a.data.dtype.type(value), a.data)
    return _make(y, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),), "masked_fill")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc
    old = a.shape
    return _make(y, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs rank >= 2, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(a, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes up to ``shape`` (ranks must already agree)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    y = np.broadcast_to(a.data, shape)
    return _make(y, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    ax = _axis("concat", axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != u for i, (s, u) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {ax}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
        "concat",
    )


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    ax = _axis("slice", axis, a.ndim)
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), rule, "slice")


def embedding_gather(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``; result shape ids.shape + table.shape[1:]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding_gather: ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding_gather: id out of range [0, {n}) (got {ids.min()}..{ids.max()})")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _make(table.data[ids], (table,), rule, "embedding_gather")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2-D product, or batched product with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim >= 2 and a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]
    if not ok:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), rule, "matmul")


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is not None:
        axis = _axis("sum", axis, a.ndim)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    y = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    return _make(y, (a,), rule, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[_axis("mean", axis, a.ndim)]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation / softmax


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis("softmax", axis, a.ndim)
    x = a.data
    z = x - x.max(axis=ax, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return _make(p, (a,), rule, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis("log_softmax", axis, a.ndim)
    x = a.data
    z = x - x.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def rule(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _make(y, (a,), rule, "log_softmax")


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine part)."""
    a = as_tensor(a)
    ax = _axis("layer_norm", axis, a.ndim)
    x = a.data
    mu = x.mean(axis=ax, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv

    def rule(g):
        gm = g.mean(axis=ax, keepdims=True)
        gy = (g * y).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y.astype(x.dtype, copy=False), (a,), rule, "layer_norm")


def l2_normalize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    a = as_tensor(a)
    ax = _axis("l2_normalize", axis, a.ndim)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=ax, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    y = x / denom
    floored = norm < eps

    def rule(g):
        proj = (g * y).sum(axis=ax, keepdims=True)
        gx = (g - np.where(floored, 0, y * proj)) / denom
        return (gx.astype(g.dtype, copy=False),)

    return _make(y, (a,), rule, "l2_normalize")


def cross_entropy_from_logits(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows whose target != ignore_index.

    logits is (n, C); rows with ignored targets contribute nothing. With no
    valid row the result is 0.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy_from_logits: shape mismatch {logits.shape} vs targets {targets.shape}")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    x = logits.data
    dt = x.dtype.type
    if n_valid == 0:
        return _make(np.asarray(0.0, dtype=x.dtype), (logits,), lambda g: (np.zeros_like(x),), "cross_entropy")
    t = np.where(valid, targets, 0)
    if t.min() < 0 or t.max() >= x.shape[1]:
        raise IndexError(f"cross_entropy_from_logits: target out of range [0, {x.shape[1]})")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(x.shape[0])
    nll = -logp[rows, t]
    loss = np.asarray((nll * valid).sum() / dt(n_valid), dtype=x.dtype)

    def rule(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= (valid / dt(n_valid))[:, None].astype(x.dtype)
        return (p * g,)

    return _make(loss, (logits,), rule, "cross_entropy")


# ---------------------------------------------------------------- backward


def tape_of(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every requires-grad node, keyed by node_id.

    The graph is left intact, so calling this twice gives identical results.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return grads
    grads[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(tape_of(loss)):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return grads


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(t.node_id)
    return np.zeros_like(t.data) if g is None else g


class NondeterministicError(RuntimeError):
    pass


def finite_diff_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is a zero-argument closure over ``inputs`` (whose ``.data`` is
    perturbed in place and restored). With ``max_coords`` only that many
    coordinates per input are probed, chosen by ``rng``.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    out = f()
    again = f()
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check: f must be scalar, got {out.shape}")
    if not np.array_equal(out.data, again.data):
        raise NondeterministicError("finite_diff_check: two forward passes disagree")
    grads = backward(out)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = grad_of(grads, t).reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            an = float(analytic[i])
            err = abs(an - num) / max(abs(an), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
