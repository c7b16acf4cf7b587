"""Dense float64 tensors with a reverse-mode autodiff tape.

Every operation computes its result eagerly with numpy and, while gradients
are enabled, attaches a tape node holding the backward rule. `backward`
orders the reachable operations topologically and replays them in reverse,
accumulating gradients additively into `.grad` (so repeated calls without a
reset sum up).

All arithmetic is float64. Matrix products offer an `exact` mode (einsum
instead of BLAS) whose per-row results are bitwise independent of the batch
they are computed in; evaluation-mode model code relies on this.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

Axes = int | tuple[int, ...] | None


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording within the block (evaluation / stat updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeNode:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to per-input gradients (None for non-differentiable inputs)."""

    __slots__ = ("op", "inputs", "backward_rule")

    def __init__(
        self,
        op: str,
        inputs: tuple["Tensor", ...],
        backward_rule: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ):
        self.op = op
        self.inputs = inputs
        self.backward_rule = backward_rule


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    # keep numpy from hijacking `ndarray <op> Tensor`
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis: Axes = None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis: Axes = None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, shape: Sequence[int]):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, out_data, backward_rule) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_rule)
    return out


class Tape:
    """Topologically ordered view of the tensors reachable from a root.

    `entries` lists every tensor that owns a recorded operation, inputs
    before outputs; replaying backward rules in reverse order accumulates
    gradients additively.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would scale with graph depth
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every `requires_grad` tensor `loss` depends on.

    Gradients accumulate across calls; callers reset between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad and loss.node is None:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return
    tape = Tape.trace(loss)
    for t in reversed(tape.entries):
        g_out = grads.pop(id(t), None)
        if g_out is None:
            continue
        if t.grad is None:
            t.grad = g_out.copy()
        else:
            t.grad = t.grad + g_out
        input_grads = t.node.backward_rule(g_out)
        for parent, g in zip(t.node.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.node is None:
                # leaf: accumulate directly
                parent.grad = g if parent.grad is None else parent.grad + g
            else:
                key = id(parent)
                grads[key] = g if key not in grads else grads[key] + g


# ---------------------------------------------------------------------------
# shape helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axis: Axes, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, in_shape: tuple[int, ...], axes: tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    if not keepdims:
        shape = list(in_shape)
        for a in axes:
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops


def _broadcast_binary(op: str, a: Tensor, b: Tensor, fn, da, db) -> Tensor:
    try:
        out = fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g: np.ndarray):
        ga = _unbroadcast(da(g), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g), b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record(op, (a, b), out, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_binary("mul", a, b, np.multiply,
                             lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_binary("div", a, b, np.divide,
                             lambda g: g / b.data,
                             lambda g: -g * a.data / (b.data * b.data))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return _record("power", (a,), out, lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _record("relu", (a,), out, lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis: Axes = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _record("sum", (a,), out,
                   lambda g: (_expand_reduced(g, a.data.shape, axes, keepdims),))


def mean(a: Tensor, axis: Axes = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _record(
        "mean", (a,), out,
        lambda g: (_expand_reduced(g, a.data.shape, axes, keepdims) / count,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))


def matmul(a: Tensor, b: Tensor, exact: bool = False) -> Tensor:
    """2-D matrix product. `exact=True` computes via einsum, whose row `i`
    is bitwise identical no matter how the batch is chunked."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if exact:
        out = np.einsum("ij,jk->ik", a.data, b.data)
    else:
        out = a.data @ b.data

    def rule(g: np.ndarray):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), out, rule)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (a,), out, rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, rule)


def gather_labels(a: Tensor, labels: np.ndarray) -> Tensor:
    """Pick `a[i, labels[i]]` for each row; the core of an NLL loss."""
    if a.ndim != 2:
        raise ShapeError(f"gather_labels: expected rank-2 input, got {a.shape}")
    labels = np.asarray(labels)
    n, c = a.shape
    if labels.shape != (n,):
        raise ShapeError(f"gather_labels: labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise ValueError(f"gather_labels: label out of range [0, {c})")
    rows = np.arange(n)
    out = a.data[rows, labels]

    def rule(g: np.ndarray):
        z = np.zeros_like(a.data)
        z[rows, labels] = g
        return (z,)

    return _record("gather_labels", (a,), out, rule)


# ---------------------------------------------------------------------------
# row routing (sub-batch dispatch)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def rule(g: np.ndarray):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record("gather_rows", (a,), out, rule)


def scatter_rows(a: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Embed rows into a zero tensor with `num_rows` rows at positions `idx`."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_rows: index shape {idx.shape} != ({a.shape[0]},)")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)

    def rule(g: np.ndarray):
        return (g[idx],)

    return _record("scatter_rows", (a,), out, rule)


# ---------------------------------------------------------------------------
# 2-D convolution (stride 1, zero padding) and pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 zero-padded convolution on (B, C, H, W) input.

    Implemented as a sum of shifted einsum contractions so the per-sample
    results stay chunk-invariant in evaluation mode.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    p = int(padding)
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} too large for input {(h, wd)} pad {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((bsz, cout, ho, wo))
    for u in range(kh):
        for v in range(kw):
            out += np.einsum("bcij,oc->boij", xp[:, :, u:u + ho, v:v + wo], w.data[:, :, u, v])
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)

    def rule(g: np.ndarray):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for u in range(kh):
            for v in range(kw):
                if gxp is not None:
                    gxp[:, :, u:u + ho, v:v + wo] += np.einsum(
                        "boij,oc->bcij", g, w.data[:, :, u, v])
                if gw is not None:
                    gw[:, :, u, v] = np.einsum(
                        "boij,bcij->oc", g, xp[:, :, u:u + ho, v:v + wo])
        gx = gxp[:, :, p:p + h, p:p + wd] if gxp is not None else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return _record("conv2d", inputs, out, rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected rank-4 input, got {x.shape}")
    return mean(x, axis=(2, 3))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    return mean(neg(gather_labels(log_softmax(logits, axis=1), labels)))
