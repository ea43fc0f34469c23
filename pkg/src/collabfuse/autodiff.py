"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable quantity in the pipeline is a :class:`Tensor`.  Operations
executed while a :class:`Tape` is active (and touching at least one tensor with
``requires_grad``) are recorded; :meth:`Tape.backward` replays them in reverse.

All arithmetic is float64.  Broadcasting follows numpy rules for the
elementwise kinds and is undone in the backward pass by summing over the
broadcast axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; everything funnels through forward()
    def __add__(self, other):
        return forward("add", [self, _lift(other)])

    def __radd__(self, other):
        return forward("add", [_lift(other), self])

    def __sub__(self, other):
        return forward("sub", [self, _lift(other)])

    def __rsub__(self, other):
        return forward("sub", [_lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return forward("scalar-mul", [self], c=float(other))
        return forward("elemwise-mul", [self, _lift(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return forward("scalar-mul", [self], c=1.0 / float(other))
        return forward("div", [self, _lift(other)])

    def __neg__(self):
        return forward("neg", [self])

    def __matmul__(self, other):
        return forward("matmul", [self, _lift(other)])

    def __getitem__(self, index):
        return forward("index", [self], index=index)

    def exp(self):
        return forward("exp", [self])

    def log(self):
        return forward("log", [self])

    def tanh(self):
        return forward("tanh", [self])

    def relu(self):
        return forward("relu", [self])

    def sigmoid(self):
        return forward("sigmoid", [self])

    def softplus(self):
        return forward("softplus", [self])

    def mean(self, axis: int | None = None, keepdims: bool = False):
        if axis is None:
            return forward("mean-all", [self])
        return forward("mean-axis", [self], axis=axis, keepdims=keepdims)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return forward("sum-axis", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward("reshape", [self], shape=shape)

    def softmax(self):
        return forward("softmax-lastaxis", [self])


def _not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class Node:
    kind: str
    inputs: list[Tensor]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before recording again")
        node.output._tape = self
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        """Fill ``.grad`` on every requires_grad leaf reachable from ``loss``.

        Leaf gradients are overwritten, not accumulated.  A constant loss (no
        differentiable path, e.g. everything behind stopgrad) sends no gradient
        anywhere; untouched leaves keep ``grad=None``, meaning zero.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss._tape is None and not loss.requires_grad:
            self.consumed = True
            return
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp._tape is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key].reshape(leaf.shape)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def stopgrad(x: Tensor) -> Tensor:
    return forward("stopgrad", [x])


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return forward("concat", list(tensors), axis=axis)


def select_mask(mask, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``mask ? a : b`` with a constant boolean mask."""
    return forward("select-mask", [_lift(a), _lift(b)], mask=np.asarray(mask, dtype=bool))


# ---------------------------------------------------------------------------
# op registry: kind -> (forward(arrays, **attrs) -> (out, ctx), backward(g, ctx))


def _binary_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _add(a, b):
    _binary_shape("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bw(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub(a, b):
    _binary_shape("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bw(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul(a, b):
    _binary_shape("elemwise-mul", a, b)
    return a * b, (a, b)


def _mul_bw(g, ctx):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div(a, b):
    _binary_shape("div", a, b)
    out = a / b
    return out, (a, b, out)


def _div_bw(g, ctx):
    a, b, out = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _matmul(a, b):
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, (a, b)


def _matmul_bw(g, ctx):
    a, b = ctx
    ga = g @ b.T
    a2 = a.reshape(-1, a.shape[-1])
    g2 = g.reshape(-1, b.shape[1])
    return ga, a2.T @ g2


def _softmax(a):
    if a.ndim < 1:
        raise ShapeError(f"softmax-lastaxis: needs at least 1 axis, got shape {a.shape}")
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)
    return s, s


def _softmax_bw(g, s):
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _sigmoid_np(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _concat(*arrays, axis):
    ref = arrays[0]
    ax = axis % ref.ndim if ref.ndim else 0
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            arr.shape[k] != ref.shape[k] for k in range(ref.ndim) if k != ax
        ):
            shapes = [x.shape for x in arrays]
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]
    return np.concatenate(arrays, axis=ax), (ax, bounds)


def _concat_bw(g, ctx):
    ax, bounds = ctx
    return tuple(np.split(g, bounds, axis=ax))


def _mean_axis(a, axis, keepdims):
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean-axis: axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError(f"mean-axis: empty axis {axis} in shape {a.shape}")
    return a.mean(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _mean_axis_bw(g, ctx):
    shape, axis, keepdims = ctx
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape) / shape[axis],)


def _sum_axis(a, axis, keepdims):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _sum_axis_bw(g, ctx):
    shape, axis, keepdims = ctx
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_all(a):
    if a.size == 0:
        raise ShapeError("mean-all: empty tensor")
    return np.asarray(a.mean()), a.shape


def _index_bw(g, ctx):
    shape, index = ctx
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return (out,)


def _select(a, b, mask):
    try:
        out = np.where(mask, a, b)
    except ValueError:
        raise ShapeError(
            f"select-mask: incompatible shapes mask {mask.shape}, {a.shape}, {b.shape}"
        ) from None
    return out, (mask, a.shape, b.shape, out.shape)


def _select_bw(g, ctx):
    mask, sa, sb, so = ctx
    m = np.broadcast_to(mask, so)
    return _unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb)


def _log(a):
    if np.any(a <= 0):
        raise ValueError("log: non-positive input")
    return np.log(a), a


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul, _matmul_bw),
    "add": (_add, _add_bw),
    "sub": (_sub, _sub_bw),
    "elemwise-mul": (_mul, _mul_bw),
    "div": (_div, _div_bw),
    "scalar-mul": (lambda a, c: (a * c, c), lambda g, c: (g * c,)),
    "relu": (lambda a: (np.maximum(a, 0.0), a > 0), lambda g, m: (g * m,)),
    "tanh": (lambda a: (lambda t: (t, t))(np.tanh(a)), lambda g, t: (g * (1.0 - t * t),)),
    "exp": (lambda a: (lambda e: (e, e))(np.exp(a)), lambda g, e: (g * e,)),
    "neg": (lambda a: (-a, None), lambda g, _: (-g,)),
    "log": (_log, lambda g, a: (g / a,)),
    "sigmoid": (lambda a: (lambda s: (s, s))(_sigmoid_np(a)), lambda g, s: (g * s * (1.0 - s),)),
    # log(1 + e^a) in overflow-safe form; derivative is sigmoid(a)
    "softplus": (
        lambda a: (np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a))), a),
        lambda g, a: (g * _sigmoid_np(a),),
    ),
    "mean-all": (_mean_all, lambda g, shape: (np.full(shape, float(g) / int(np.prod(shape))),)),
    "mean-axis": (_mean_axis, _mean_axis_bw),
    "sum-axis": (_sum_axis, _sum_axis_bw),
    "concat": (_concat, _concat_bw),
    "softmax-lastaxis": (_softmax, _softmax_bw),
    "reshape": (lambda a, shape: (a.reshape(shape), a.shape), lambda g, s: (g.reshape(s),)),
    "index": (lambda a, index: (a[index], (a.shape, index)), _index_bw),
    "select-mask": (_select, _select_bw),
    "stopgrad": (lambda a: (a.copy(), None), None),
}

OP_KINDS = tuple(_OPS)


def forward(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply op ``kind`` to ``inputs`` and record it on the active tape."""
    try:
        fwd, bwd = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    arrays = [t.data for t in inputs]
    out_data, ctx = fwd(*arrays, **attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    tape = active_tape()
    if bwd is not None and tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(kind, list(inputs), out, lambda g: bwd(g, ctx)))
    return out


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f(*x)`` must return a scalar.
    The tensors are perturbed in place, so ``f`` may also close over them.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step size h={h} outside [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*xs)
            if out.size != 1:
                raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
            tape.backward(out)
        worst = 0.0
        for t in xs:
            auto = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.flat
            for i in range(t.size):
                v = flat[i]
                flat[i] = v + h
                fp = f(*xs).item()
                flat[i] = v - h
                fm = f(*xs).item()
                flat[i] = v
                num = (fp - fm) / (2.0 * h)
                a = auto.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
        return worst
    finally:
        for t, rg in zip(xs, saved):
            t.requires_grad = rg
