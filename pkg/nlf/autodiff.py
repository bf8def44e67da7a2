"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op whose inputs require grad appends a node to the active
tape. ``backward(root)`` walks that tape in exact reverse recording order and
then consumes it, so a second backward without a new forward pass is rejected.
Leaf gradients accumulate additively until an optimizer step zeroes them.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import AutodiffError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], tuple["np.ndarray | None", ...]]

_state = threading.local()


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn
    index: int = -1


class Tape:
    """Ordered record of the ops of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            # backward() may have swapped a consumed tape for a fresh one.
            for k in range(len(stack) - 1, 0, -1):
                if stack[k] is self or stack[k].nodes == [] and k == len(stack) - 1:
                    stack.pop(k)
                    break

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)
        node.output._node = node
        node.output._tape = self

    def run_backward(self, root: Tensor) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed; run the forward pass again before backward")
        assert root._node is not None
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes[: root._node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.nodes.clear()
        self.consumed = True


def _stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = [Tape()]
        _state.stack = stack
    return stack


def current_tape() -> Tape:
    stack = _stack()
    if stack[-1].consumed:
        stack[-1] = Tape()
    return stack[-1]


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape")
    __array_ufunc__ = None

    def __init__(self, data: Any, *, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        out._tape = None
        return out

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
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, p: float) -> Tensor:
        return power(self, p)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, idx: Any) -> Tensor:
        return getitem(self, idx)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def parameter(data: Any, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(Node(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    A, B = a.data, b.data
    return _make(
        "mul",
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)),
    )


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Any, p: float) -> Tensor:
    a = as_tensor(a)
    A = a.data
    p = float(p)
    return _make("pow", A**p, (a,), lambda g: (g * p * A ** (p - 1.0),))


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _make("log", np.log(A), (a,), lambda g: (g / A,))


def sqrt(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sin(a: Any) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _make("sin", np.sin(A), (a,), lambda g: (g * np.cos(A),))


def cos(a: Any) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _make("cos", np.cos(A), (a,), lambda g: (-g * np.sin(A),))


def abs_(a: Any) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _make("abs", np.abs(A), (a,), lambda g: (g * np.sign(A),))


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Any, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a: Any) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Any) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _make("softplus", np.logaddexp(0.0, A), (a,), lambda g: (g * expit(A),))


def tanh(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a: Any, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond: np.ndarray, a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        "where",
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def tsum(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / max(count, 1))


def cumsum(a: Any, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _make(
        "cumsum",
        np.cumsum(a.data, axis=axis),
        (a,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
    )


def reshape(a: Any, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(perm))
    return _make("transpose", a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Any, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", src, tuple(shape)) from None
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None
    n = len(ts)
    return _make("stack", out, ts, lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)))


def _is_basic_index(idx: Any) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Any, idx: Any) -> Tensor:
    """Slicing and fancy indexing; repeated fancy indices accumulate in backward."""

    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice ({exc})", shape) from None
    return _make("slice", np.array(out, dtype=np.float64), (a,), backward)


def take(a: Any, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (axis 0); output shape is indices.shape + a.shape[1:]."""

    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        flat_idx = idx.reshape(-1)
        if len(shape) == 2:
            gflat = g.reshape(-1, shape[1])
            cols = [np.bincount(flat_idx, weights=gflat[:, c], minlength=shape[0]) for c in range(shape[1])]
            return (np.stack(cols, axis=1),)
        full = np.zeros(shape)
        np.add.at(full, flat_idx, g.reshape((-1,) + shape[1:]))
        return (full,)

    return _make("take", a.data[idx], (a,), backward)


def scatter(values: Any, index: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    """Place ``values`` at unique flat positions ``index`` of a zero array of ``shape``."""

    v = as_tensor(values)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if v.size != idx.size:
        raise ShapeError("scatter", v.shape, idx.shape)
    out = np.zeros(int(np.prod(shape)))
    out[idx] = v.data.reshape(-1)
    vshape = v.shape
    return _make("scatter", out.reshape(shape), (v,), lambda g: (g.reshape(-1)[idx].reshape(vshape),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    inner_b = B.shape[0] if B.ndim == 1 else B.shape[-2]
    if A.shape[-1] != inner_b:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = A @ B
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if B.ndim == 2 and A.ndim >= 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, B.shape[-1])
            return _unbroadcast(ga, A.shape), gb
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        g2 = np.asarray(g)
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(B2, -1, -2)
        gb = np.swapaxes(A2, -1, -2) @ g2
        if A.ndim == 1:
            ga = np.squeeze(ga, -2)
        if B.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _make("matmul", out, (a, b), backward)


def conv2d(x: Any, weight: Any, bias: Any | None = None, *, stride: int = 2, padding: int = 1) -> Tensor:
    """2D cross-correlation on (B, C, H, W) input with (O, C, k, k) kernels via im2col."""

    x, weight = as_tensor(x), as_tensor(weight)
    X, Wt = x.data, weight.data
    if X.ndim != 4 or Wt.ndim != 4 or X.shape[1] != Wt.shape[1] or Wt.shape[2] != Wt.shape[3]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c, h, w = X.shape
    o, k = Wt.shape[0], Wt.shape[2]
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = Wt.reshape(o, c * k * k)
    out = cols @ wmat.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(Wt.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, p : p + h, p : p + w]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make("conv2d", out, inputs, backward)


# ---------------------------------------------------------------- backward / optimizer


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires-grad leaf reachable from ``root``."""

    if root.data.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None:
        if root.requires_grad:
            root._accumulate(np.ones_like(root.data))
        return
    tape = root._tape
    if tape is None:
        raise AutodiffError("root is not recorded on any tape")
    tape.run_backward(root)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[int, np.ndarray] | None = None
    v: dict[int, np.ndarray] | None = None
    t: dict[int, int] | None = None

    def __post_init__(self) -> None:
        self.m = self.m or {}
        self.v = self.v or {}
        self.t = self.t or {}


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, *, warned: set[int] | None = None) -> None:
    """One Adam update over ``params``; gradients are zeroed afterwards."""

    for k, p in enumerate(params):
        if p.grad is None:
            if warned is None or k not in warned:
                logger.warning("parameter %s has no gradient; skipped", p.name or k)
                if warned is not None:
                    warned.add(k)
            continue
        g = p.grad
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        t = state.t.get(k, 0) + 1
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[k], state.v[k], state.t[k] = m, v, t
        p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, *, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)
        self._warned: set[int] = set()

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, self.state, self.lr if lr is None else lr, warned=self._warned)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], *, eps: float = 1e-5) -> float:
    """Worst norm-wise relative error between backprop and central differences over ``params``."""

    for p in params:
        p.grad = None
    with Tape():
        out = fn()
        backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            numeric = np.zeros(flat.size)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                f_plus = fn().item()
                flat[k] = orig - eps
                f_minus = fn().item()
                flat[k] = orig
                numeric[k] = (f_plus - f_minus) / (2.0 * eps)
            a = a.reshape(-1)
            denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    for p in params:
        p.grad = None
    return worst
