"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its inputs and a backward rule. :func:`backward` orders the recorded
operations topologically into a :class:`ComputationRecord` and replays the
rules in reverse.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Op:
    """One executed operation: its inputs, its output and a backward rule.

    ``backward_fn`` maps the gradient of the output to a tuple holding one
    gradient (or ``None``) per input.

    The output is held weakly: tensor -> op -> tensor would otherwise form a
    cycle per node, and large graphs would linger until a full collection.
    """

    __slots__ = ("name", "inputs", "_output", "backward_fn")

    def __init__(self, name: str, inputs: tuple, backward_fn: Callable):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn
        self._output = None

    @property
    def output(self) -> Optional["Tensor"]:
        return None if self._output is None else self._output()

    @output.setter
    def output(self, tensor: "Tensor") -> None:
        self._output = weakref.ref(tensor)

    def __repr__(self) -> str:
        return f"Op({self.name})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[Op] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, name: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        op = Op(name, inputs, backward_fn)
        op.output = out
        out._op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"cannot {kind} tensors of shapes {a.shape} and {b.shape}"
        ) from None


# ----------------------------------------------------------------------------
# elementwise


def elementwise(op_kind: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Broadcasting ``add``, ``sub``, ``mul`` or ``div`` of two tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, op_kind)
    sa, sb = a.shape, b.shape
    if op_kind == "add":
        return _make(a.data + b.data, "add", (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))
    if op_kind == "sub":
        return _make(a.data - b.data, "sub", (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))
    if op_kind == "mul":
        ad, bd = a.data, b.data
        return _make(ad * bd, "mul", (a, b),
                     lambda g: (unbroadcast(g * bd, sa), unbroadcast(g * ad, sb)))
    if op_kind == "div":
        ad, bd = a.data, b.data
        return _make(
            ad / bd, "div", (a, b),
            lambda g: (unbroadcast(g / bd, sa), unbroadcast(-g * ad / (bd * bd), sb)),
        )
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero where the floor is active.
    NaN passes through so that divergence stays visible."""
    a = as_tensor(a)
    keep = ~(a.data < floor)
    return _make(np.where(keep, a.data, floor), "clamp_min", (a,),
                 lambda g: (g * keep,))


def selu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    scale = SELU_LAMBDA * SELU_ALPHA
    # exp(min(x, 0)) is 1 on the positive side, which is also the slope / lambda there
    e = np.exp(np.minimum(x, 0.0))
    slope = np.where(pos, SELU_LAMBDA, scale * e)
    out = np.where(pos, SELU_LAMBDA * x, scale * e - scale)
    return _make(out, "selu", (a,), lambda g: (g * slope,))


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product. Rank-2 operands give the plain product; higher ranks
    are treated as stacks of matrices with broadcast leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(out, "matmul", (a, b), backward)


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand(g: np.ndarray, axes, shape: tuple, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op_kind: str, t: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``max`` over ``axis`` (all axes when ``None``).

    ``max`` routes the whole gradient to the first maximal element.
    """
    t = as_tensor(t)
    axes = _norm_axis(axis, t.ndim)
    shape = t.shape
    if op_kind == "sum":
        out = t.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, "sum", (t,), lambda g: (_expand(g, axes, shape, keepdims),))
    if op_kind == "mean":
        count = t.size if axes is None else int(np.prod([shape[a] for a in axes]))
        out = t.data.mean(axis=axes, keepdims=keepdims)
        return _make(out, "mean", (t,),
                     lambda g: (_expand(g, axes, shape, keepdims) / count,))
    if op_kind == "max":
        if axes is None:
            flat = t.data.reshape(-1)
            idx = int(np.argmax(flat))
            out = flat[idx].reshape((1,) * t.ndim if keepdims else ())

            def backward(g):
                grad = np.zeros(t.size)
                grad[idx] = np.asarray(g).reshape(-1)[0]
                return (grad.reshape(shape),)

            return _make(out, "max", (t,), backward)
        if len(axes) != 1:
            raise ShapeError("max reduces over a single axis")
        ax = axes[0]
        idx = np.expand_dims(np.argmax(t.data, axis=ax), ax)
        out = np.take_along_axis(t.data, idx, axis=ax)
        if not keepdims:
            out = np.squeeze(out, ax)

        def backward(g):
            grad = np.zeros(shape)
            g = g if keepdims else np.expand_dims(g, ax)
            np.put_along_axis(grad, idx, g, axis=ax)
            return (grad,)

        return _make(out, "max", (t,), backward)
    raise ValueError(f"unknown reduction {op_kind!r}")


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(t: ArrayLike, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    return _make(t.data.reshape(shape), "reshape", (t,), lambda g: (g.reshape(old),))


def transpose(t: ArrayLike, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(t.data, axes), "transpose", (t,),
                 lambda g: (np.transpose(g, inverse),))


def getitem(t: ArrayLike, index) -> Tensor:
    t = as_tensor(t)
    shape = t.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(t.data[index]), "getitem", (t,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                 tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, backward)


# ----------------------------------------------------------------------------
# backward pass


@dataclass
class ComputationRecord:
    """Operations reachable from a loss, in topological (execution) order."""

    ops: list = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "ComputationRecord":
        order: list = []
        seen: set = set()
        stack_ = [(root, False)]
        while stack_:
            tensor, expanded = stack_.pop()
            op = tensor._op
            if op is None:
                continue
            if expanded:
                order.append(op)
                continue
            if id(op) in seen:
                continue
            seen.add(id(op))
            stack_.append((tensor, True))
            for inp in op.inputs:
                if inp._op is not None and id(inp._op) not in seen:
                    stack_.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)


def backward(loss: Tensor) -> ComputationRecord:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    that requires grad. Calling twice without zeroing adds the gradients."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = ComputationRecord.from_output(loss)
    grads: dict = {id(loss): np.ones(loss.shape)}
    holders: dict = {id(loss): loss}
    for op in reversed(record.ops):
        out = op.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _deposit(out, g)
        in_grads = op.backward_fn(g)
        for inp, ig in zip(op.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = inp
    for key, g in grads.items():
        _deposit(holders[key], g)
    return record


def _deposit(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# finite differences


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, index, step: float = 1e-5) -> float:
    """Central difference of ``fn`` w.r.t. ``array[index]`` (mutated in place
    and restored)."""
    orig = array[index]
    array[index] = orig + step
    up = fn()
    array[index] = orig - step
    down = fn()
    array[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``, elementwise.

    The floor keeps round-off on near-zero gradients from dominating.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Largest relative error between autodiff and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values. When
    ``max_entries`` is given, that many coordinates per parameter are probed
    at random instead of all of them.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return loss_fn().item()

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        for k in picks:
            num = numeric_gradient(value, flat, int(k), step)
            worst = max(worst, float(relative_error(ga.reshape(-1)[k], num)))
    return worst
