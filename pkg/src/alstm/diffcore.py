"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Outside a tape every operation is a
plain numpy forward computation, which is what inference uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])

Every operation accepts arbitrary leading (batch) dimensions, so the vector
forms used to describe the model also run on whole mini-batches.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EmptySupportError, LabelIndexError, ParameterError

CE_EPS = 1e-12

_local = threading.local()


class Tensor:
    """Array of 64-bit floats that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)


class _Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest and are thread-local, so separate
    threads may each own a tape without sharing state.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), tuple(outputs), backward))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def no_tape():
    """Context manager that suspends recording (forward-only evaluation)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _local.stack[:] = self._saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(inputs: Sequence[Tensor], outputs: Sequence[np.ndarray], backward: Callable):
    """Wrap raw output arrays as tensors and record the op if needed.

    ``backward`` receives one gradient array per output (zeros for outputs
    that did not reach the loss) and returns one gradient (or ``None``) per
    input.  Returns a single Tensor when there is one output, else a list.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    outs = [Tensor(o, requires_grad=track) for o in outputs]
    if track:
        tape.record(inputs, outs, backward)
    return outs[0] if len(outs) == 1 else outs


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        gouts = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gouts)]
        gins = node.backward(gouts)
        for inp, g in zip(node.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
            owners[key] = inp
    for key, g in grads.items():
        t = owners[key]
        if not t.requires_grad:
            continue
        g = np.broadcast_to(g, t.shape)
        t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op((a, b), (a.data + b.data,),
                    lambda g: (_unbroadcast(g[0], sa), _unbroadcast(g[0], sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op((a, b), (a.data - b.data,),
                    lambda g: (_unbroadcast(g[0], sa), _unbroadcast(-g[0], sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return apply_op((a, b), (ad * bd,),
                    lambda g: (_unbroadcast(g[0] * bd, ad.shape), _unbroadcast(g[0] * ad, bd.shape)))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bwd(g):
        g = g[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return apply_op((x,), (x.data.sum(axis=axis, keepdims=keepdims),), bwd)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


# --------------------------------------------------------------------------
# affine maps


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[..., i] = sum_j W[i, j] * x[..., j] + b[i]``."""
    if W.ndim != 2 or x.shape[-1:] != W.shape[1:] or (b is not None and b.shape != W.shape[:1]):
        bshape = None if b is None else b.shape
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape} / b {bshape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def bwd(g):
        g = g[0]
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        res = [g @ Wd, gW]
        if b is not None:
            res.append(g2.sum(axis=0))
        return res

    return apply_op(inputs, (out,), bwd)


def dot(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with vector ``w``: ``out[...] = x[..., :] . w``."""
    if w.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dot: x {x.shape} incompatible with w {w.shape}")
    xd, wd = x.data, w.data

    def bwd(g):
        g = g[0]
        gw = np.tensordot(g, xd, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        return g[..., None] * wd, gw

    return apply_op((x, w), (xd @ wd,), bwd)


# --------------------------------------------------------------------------
# nonlinearities


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return apply_op((x,), (s,), lambda g: (g[0] * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return apply_op((x,), (t,), lambda g: (g[0] * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return apply_op((x,), (np.where(pos, x.data, 0.0),), lambda g: (g[0] * pos,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax_stable(e: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; masked-out entries get exactly 0."""
    ed = e.data
    if mask is None:
        shifted = ed - ed.max(axis=axis, keepdims=True)
        z = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), ed.shape)
        if not mask.any(axis=axis).all():
            raise EmptySupportError("softmax over an empty support: every entry is masked")
        top = np.where(mask, ed, -np.inf).max(axis=axis, keepdims=True)
        z = np.where(mask, np.exp(np.where(mask, ed - top, 0.0)), 0.0)
    p = z / z.sum(axis=axis, keepdims=True)

    def bwd(g):
        g = g[0]
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return apply_op((e,), (p,), bwd)


def cross_entropy(probs: Tensor, target) -> Tensor:
    """``-ln(max(probs[target], 1e-12))`` over the last axis.

    ``target`` is an int for a single distribution or an int array matching
    the leading dimensions of ``probs``; the result has those leading dims.
    """
    k = probs.shape[-1]
    tgt = np.asarray(target)
    if not np.issubdtype(tgt.dtype, np.integer):
        raise LabelIndexError(f"class index must be an integer, got {target!r}")
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise LabelIndexError(f"class index {target!r} out of range for {k} classes")
    if tgt.shape != probs.shape[:-1]:
        raise DimensionError(f"targets {tgt.shape} do not match probs {probs.shape}")
    pd = probs.data
    picked = np.take_along_axis(pd, tgt[..., None], axis=-1)[..., 0]
    clamped = np.maximum(picked, CE_EPS)

    def bwd(g):
        gp = np.zeros_like(pd)
        local = np.where(picked > CE_EPS, -1.0 / clamped, 0.0) * g[0]
        np.put_along_axis(gp, tgt[..., None], local[..., None], axis=-1)
        return (gp,)

    return apply_op((probs,), (-np.log(clamped),), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))
    return apply_op((x,), (x.data * keep,), lambda g: (g[0] * keep,))


# --------------------------------------------------------------------------
# structural ops


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return apply_op(ts, (np.concatenate([t.data for t in ts], axis=axis),),
                    lambda g: np.split(g[0], cuts, axis=axis))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    cuts = np.cumsum(sizes)[:-1]
    parts = np.split(x.data, cuts, axis=axis)
    outs = apply_op((x,), parts, lambda g: (np.concatenate(g, axis=axis),))
    return outs if isinstance(outs, list) else [outs]


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    n = len(ts)

    def bwd(g):
        g = g[0]
        return [np.take(g, i, axis=axis) for i in range(n)]

    return apply_op(ts, (np.stack([t.data for t in ts], axis=axis),), bwd)


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    n = x.shape[axis]
    parts = [np.take(x.data, i, axis=axis) for i in range(n)]
    outs = apply_op((x,), parts, lambda g: (np.stack(g, axis=axis),))
    return outs if isinstance(outs, list) else [outs]


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply_op((x,), (x.data.reshape(shape),), lambda g: (g[0].reshape(old),))


def permute_steps(x: Tensor, order: np.ndarray) -> Tensor:
    """Reorder axis 1 of ``x`` (batch, steps, ...) independently per row.

    ``order[b]`` must be a permutation of ``range(steps)``; the output row is
    ``x[b, order[b]]``.
    """
    order = np.asarray(order)
    if order.shape != x.shape[:2]:
        raise DimensionError(f"order {order.shape} does not match leading dims of {x.shape}")
    idx = order.reshape(order.shape + (1,) * (x.ndim - 2))
    out = np.take_along_axis(x.data, idx, axis=1)

    def bwd(g):
        gx = np.empty_like(g[0])
        np.put_along_axis(gx, idx, g[0], axis=1)
        return (gx,)

    return apply_op((x,), (out,), bwd)


# --------------------------------------------------------------------------
# verification


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if h <= 0:
        raise ParameterError(f"step must be positive, got {h}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.array(t.data)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            y = f(*xs)
        if y.size != 1:
            raise DimensionError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
        tape.backward(y)
        worst = 0.0
        with no_tape():
            for t in xs:
                analytic = np.zeros(t.shape) if t.grad is None else t.grad
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f(*xs).item()
                    flat[i] = orig - h
                    fm = f(*xs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * h)
                    a = analytic.reshape(-1)[i]
                    err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                    worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
