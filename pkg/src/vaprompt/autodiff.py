"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive computes its output with numpy and, when any input requires a
gradient, records a node holding the parent tensors and a closure that maps
the output gradient to input gradients.  Node ids increase monotonically, so
sorting reachable nodes by id gives a valid reverse topological order without
recursion (GRU graphs over 100 audio steps are thousands of nodes deep).

The graph lives only as long as the tensors that reference it; ``backward``
detaches every interior node once its gradient has been propagated.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "PRIMITIVES",
    "forward_primitive",
    "backward",
    "graph_nodes",
    "gradient_check",
    "GradCheckReport",
    "no_grad_copy",
    "no_grad",
]

_node_ids = itertools.count()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes (evaluation/inference)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's rule."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # Operator sugar; constants are wrapped as non-differentiable tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    out._id = next(_node_ids)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite output")
    return data


class _IndexedGrad:
    """Gradient that is zero except at ``index``; scattered on accumulation."""

    __slots__ = ("index", "value", "shape")

    def __init__(self, index, value, shape):
        self.index, self.value, self.shape = index, value, shape

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        full[self.index] = self.value
        return full


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# Elementwise binary primitives (numpy broadcasting)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(ad / bd, "div")

    def grad_fn(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), grad_fn, "div")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _make(a.data * c, (a,), grad_fn, "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# Elementwise unary primitives
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # exp(-|x|) never overflows; pick the matching branch by sign.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), grad_fn, "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), grad_fn, "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), grad_fn, "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(np.log(x), "log")

    def grad_fn(g):
        return (g / x,)

    return _make(out, (a,), grad_fn, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = _check_finite(np.sqrt(a.data), "sqrt")

    def grad_fn(g):
        with np.errstate(divide="ignore"):
            return (_check_finite(g * 0.5 / out, "sqrt-backward"),)

    return _make(out, (a,), grad_fn, "sqrt")


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data

    def grad_fn(g):
        return (2.0 * g * x,)

    return _make(x * x, (a,), grad_fn, "square")


def softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", over="ignore"):
        z = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = _check_finite(e / e.sum(axis=-1, keepdims=True), "softmax")

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", over="ignore"):
        z = a.data - a.data.max(axis=-1, keepdims=True)
        out = _check_finite(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), "log_softmax")
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), grad_fn, "log_softmax")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def slice(a, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis {ax} of shape {a.shape}")
    index = [np.s_[:]] * a.ndim
    index[ax] = np.s_[start:stop]
    index = tuple(index)
    shape = a.shape

    def grad_fn(g):
        return (_IndexedGrad(index, g, shape),)

    return _make(a.data[index], (a,), grad_fn, "slice")


def select(a, i: int, axis: int = 0) -> Tensor:
    """Pick index ``i`` along ``axis`` and drop that axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not (0 <= i < a.shape[ax]):
        raise ShapeError(f"select: index {i} outside axis {ax} of shape {a.shape}")
    index = [np.s_[:]] * a.ndim
    index[ax] = i
    index = tuple(index)
    shape = a.shape

    def grad_fn(g):
        return (_IndexedGrad(index, g, shape),)

    return _make(a.data[index], (a,), grad_fn, "select")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack: no inputs")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tensors, grad_fn, "stack")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None

    def grad_fn(g):
        return (g.reshape(old),)

    return _make(out, (a,), grad_fn, "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(x % a.ndim for x in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort([x % a.ndim for x in axes]))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), grad_fn, "transpose")


def causal_conv1d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Dilated causal convolution over the time axis.

    ``x`` is ``(..., T, C_in)``, ``weight`` is ``(k, C_in, C_out)``.  Tap ``j``
    reads ``x[t - (k - 1 - j) * dilation]``; positions before the start are
    zero.  Output is ``(..., T, C_out)``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 3 or x.ndim < 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"causal_conv1d: incompatible shapes {x.shape} and {weight.shape}")
    k, c_in, c_out = weight.shape
    if dilation < 1:
        raise ShapeError(f"causal_conv1d: dilation must be >= 1, got {dilation}")
    parents = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"causal_conv1d: bias shape {bias.shape} does not match {c_out}")
        parents = parents + (bias,)
    T = x.shape[-2]
    pad = (k - 1) * dilation
    pad_width = [(0, 0)] * (x.ndim - 2) + [(pad, 0), (0, 0)]
    xp = np.pad(x.data, pad_width)
    w = weight.data
    taps = [xp[..., j * dilation: j * dilation + T, :] for j in range(k)]
    out = taps[0] @ w[0]
    for j in range(1, k):
        out = out + taps[j] @ w[j]
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[..., j * dilation: j * dilation + T, :] += g @ w[j].T
            gx = gxp[..., pad:, :]
        if weight.requires_grad:
            g2 = g.reshape(-1, c_out)
            gw = np.stack([taps[j].reshape(-1, c_in).T @ g2 for j in range(k)])
        if bias is not None:
            gb = g.reshape(-1, c_out).sum(axis=0)
            return gx, gw, gb
        return gx, gw

    return _make(out, parents, grad_fn, "causal_conv1d")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "scale": scale,
    "concat": concat,
    "slice": slice,
    "select": select,
    "stack": stack,
    "reshape": reshape,
    "transpose": transpose,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "mean": mean,
    "sum": sum,
    "causal_conv1d": causal_conv1d,
}

_LIST_INPUT = {"concat", "stack"}


def forward_primitive(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply the primitive named ``op`` to ``inputs``.

    Keyword attributes are the primitive's static arguments (``axis``,
    ``start``/``stop``, ``c`` for scale, ``dilation`` ...).
    """
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op in _LIST_INPUT:
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All grad-requiring tensors reachable from ``root``, in insertion order."""
    seen: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack_.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; interior nodes are detached after
    their gradient has been pushed to their parents.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = graph_nodes(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    # Ids whose accumulated array was allocated here and may be updated in place.
    owned: set[int] = set()
    for node in reversed(nodes):
        g = grads.pop(node._id, None)
        owned.discard(node._id)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent._id
            prev = grads.get(pid)
            if isinstance(pg, _IndexedGrad):
                if prev is None:
                    prev = np.zeros(pg.shape)
                elif pid not in owned:
                    prev = prev.copy()
                owned.add(pid)
                prev[pg.index] += pg.value
                grads[pid] = prev
            elif prev is None:
                grads[pid] = pg
            elif pid in owned:
                prev += pg
            else:
                grads[pid] = prev + pg
                owned.add(pid)
        node._parents = ()
        node._backward = None


def no_grad_copy(t: Tensor) -> Tensor:
    """Detach: same values, no graph, no gradient."""
    return Tensor(t.data.copy())


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-element comparison of analytic and central-difference gradients.

    ``rel_error`` is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    elements whose true gradient is zero from reporting roundoff as 100%.
    """

    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tolerance: float
    floor: float
    checked: np.ndarray = field(repr=False)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def failures(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in idx) for idx in self.checked[self.rel_error > self.tolerance]]

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of a scalar ``f``.

    ``x`` is perturbed in place and restored, so ``f`` may close over it as a
    model parameter.  With ``max_elements`` a seeded random subset is checked.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic_full = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None

    all_idx = np.array(list(np.ndindex(*x.shape)) if x.shape else [()], dtype=np.int64)
    if all_idx.ndim == 1:
        all_idx = all_idx.reshape(len(all_idx), -1)
    if max_elements is not None and len(all_idx) > max_elements:
        rng = np.random.default_rng(seed)
        all_idx = all_idx[np.sort(rng.choice(len(all_idx), max_elements, replace=False))]

    analytic = np.empty(len(all_idx))
    numeric = np.empty(len(all_idx))
    for n, idx in enumerate(all_idx):
        idx = tuple(idx)
        orig = x.data[idx]
        x.data[idx] = orig + step
        fp = f(x).item()
        x.data[idx] = orig - step
        fm = f(x).item()
        x.data[idx] = orig
        numeric[n] = (fp - fm) / (2.0 * step)
        analytic[n] = analytic_full[idx]
    x.requires_grad = was
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, rel, tolerance, floor, all_idx)
