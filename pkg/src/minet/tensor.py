"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node holding the parents and a closure mapping the
output gradient to parent gradients; :func:`backward` walks the recorded
graph once in reverse topological order.

Shapes are usually (N, C, H, W) but any rank is accepted; elementwise
binary operations follow numpy broadcasting and reduce gradients back to
the operand shapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class GraphConsumedError(RuntimeError):
    """Raised when backward is run twice through the same graph."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._from_op(a.data**p, (a,), bw, "pow")

    def __getitem__(self, idx):
        a = self

        def bw(g):
            out = np.zeros_like(a.data)
            out[idx] = g
            return (out,)

        return Tensor._from_op(np.ascontiguousarray(a.data[idx]), (a,), bw, "index")

    # -- reductions and reshaping --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def abs(self):
        a = self
        return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._from_op(out_data, (self,), lambda g: (g * out_data,), "exp")


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tuple(tensors), bw, "concat")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax")


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Backpropagate from a scalar ``loss`` into every leaf requiring grad.

    Leaf gradients are accumulated into ``leaf.grad``. The graph is freed
    afterwards, so a second call raises :class:`GraphConsumedError`.

    Returns
    -------
    dict
        ``id(leaf) -> Tensor`` holding each leaf's accumulated gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward")
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[id(node)] = node
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg

    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._consumed = True
    return {k: Tensor(v.grad) for k, v in leaves.items()}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def finite_diff_jvp(f: Callable[[Tensor], Tensor], x: Tensor, v: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference Jacobian-vector product ``(f(x+eps v) - f(x-eps v)) / 2eps``."""
    x, v = as_tensor(x), as_tensor(v)
    if x.shape != v.shape:
        raise ValueError(f"direction shape {v.shape} does not match point shape {x.shape}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    with no_grad():
        fp = as_tensor(f(Tensor(x.data + eps * v.data))).data
        fm = as_tensor(f(Tensor(x.data - eps * v.data))).data
    return Tensor((fp - fm) / (2.0 * eps))


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps the tensor(s) in ``x`` to a scalar. All of ``x`` are perturbed
    coordinate by coordinate, so keep them small. Inputs must be float64.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check input contains non-finite values")
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if len(xs) > 1 else f(xs[0])
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            ga = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = (f(*xs) if len(xs) > 1 else f(xs[0])).item()
                flat[i] = orig - eps
                fm = (f(*xs) if len(xs) > 1 else f(xs[0])).item()
                flat[i] = orig
                gn = (fp - fm) / (2.0 * eps)
                denom = max(abs(ga[i]), abs(gn), 1e-8)
                worst = max(worst, abs(ga[i] - gn) / denom)
    for t, s in zip(xs, saved):
        t.requires_grad = s
        t.grad = None
    return worst
