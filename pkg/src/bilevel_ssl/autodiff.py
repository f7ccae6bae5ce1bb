"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape`. Nodes are appended
in creation order, so the tape is topologically sorted by construction and the
backward sweep is a single reverse pass over it.

    tape = Tape()
    with tape:
        p = tape.watch(params)
        loss = mean(relu(x @ p["w"] + p["b"]))
    grads = tape.gradient(loss, params)
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping

import numpy as np

from .params import ParamSet

LOG_FLOOR = 1e-12
STANDARDIZE_EPS = 1e-5

_local = threading.local()


class ShapeError(ValueError):
    """Raised when an operation receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NonFiniteError(ValueError):
    pass


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    if getattr(_local, "paused", 0):
        return None
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording, even inside an active tape."""
    _local.paused = getattr(_local, "paused", 0) + 1
    try:
        yield
    finally:
        _local.paused -= 1


class Tensor:
    """A float64 array plus, when recorded, its parents and backward rule."""

    __slots__ = ("data", "parents", "backward_fn", "tape", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def external(cls, data, name: str | None = None) -> "Tensor":
        """Build a tensor from outside data, rejecting NaN/Inf."""
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in input {name or ''}".strip())
        return cls(arr, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return mul(self, 1.0 / float(o))


class Tape:
    """Ordered record of primitive operations.

    A tape is a context manager; nesting is allowed and each thread keeps its
    own stack, so independent tapes may run concurrently.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tapes must be exited in LIFO order"
        stack.pop()

    def watch(self, params: Mapping[str, np.ndarray] | ParamSet) -> dict[str, Tensor]:
        out = {}
        for name, value in params.items():
            t = Tensor(value, name=name)
            t.tape = self
            self.nodes.append(t)
            self.leaves[name] = t
            out[name] = t
        return out

    def record(self, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
        out = Tensor(data)
        out.parents = parents
        out.backward_fn = backward_fn
        out.tape = self
        self.nodes.append(out)
        return out

    def gradient(self, loss: Tensor, params: Iterable[str] | Mapping | None = None) -> ParamSet:
        """Gradients of a scalar ``loss`` for every watched leaf.

        Leaves not reachable from ``loss`` get explicit zeros.
        """
        if loss.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        names = list(self.leaves) if params is None else list(params)
        grads: dict[int, np.ndarray] = {}
        if loss.tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
            for node in reversed(self.nodes):
                g = grads.pop(id(node), None)
                if g is None or node.backward_fn is None:
                    if g is not None:
                        grads[id(node)] = g  # leaf: keep
                    continue
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or parent.tape is not self:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        out = {}
        for name in names:
            leaf = self.leaves[name]
            g = grads.get(id(leaf))
            out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        return ParamSet(out)


def backward(tape: Tape, loss: Tensor) -> ParamSet:
    return tape.gradient(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.tape is tape for t in inputs):
        return Tensor(data)
    return tape.record(data, inputs, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- primitives --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)``; the right operand must be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(a.data @ b.data, (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a) -> Tensor:
    """Natural log evaluated as ``log(max(x, 1e-12))``."""
    a = as_tensor(a)
    x = np.maximum(a.data, LOG_FLOOR)
    live = a.data > LOG_FLOOR
    return _emit(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        return _emit(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    out = np.sum(a.data, axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(out, (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean (empty)", a.shape)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def max(a, axis: int) -> Tensor:  # noqa: A001
    """Max-reduction; the gradient is routed to the first maximal entry."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("max (empty axis)", a.shape)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _emit(out, (a,), bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def log_softmax(logits) -> Tensor:
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (z,), bw)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row cross-entropy of ``(B, C)`` logits against integer labels."""
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.data.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError("softmax_cross_entropy", z.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = lse - shifted[rows, labels]
    p = np.exp(shifted - lse[:, None])

    def bw(g):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        return (gz * g[:, None],)

    return _emit(out, (z,), bw)


def standardize(a, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit variance.

    This is the single normalization primitive used by the weight predictor;
    swapping in batch statistics only needs a change here.
    """
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit(y, (a,), bw)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# -- checking ----------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: ParamSet,
    step: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error of each named parameter is ``|a - c| / max(|a|, |c|, 1e-12)``
    with ``|.|`` the l2 norm over that parameter's entries; the maximum over
    names is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tape = Tape()
    with tape:
        loss = loss_fn(tape.watch(params))
    analytic = tape.gradient(loss)

    worst = 0.0
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = numeric.reshape(-1)
        for i in range(value.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = params.copy()
                probe[name].reshape(-1)[i] += sign * step
                with no_grad():
                    f = float(loss_fn({k: Tensor(v) for k, v in probe.items()}).data)
                if not np.isfinite(f):
                    raise NonFiniteError(f"non-finite loss probing {name}[{i}]")
                vals.append(f)
            flat[i] = (vals[0] - vals[1]) / (2.0 * step)
        a = analytic[name]
        err = np.linalg.norm(a - numeric)
        scale = np.max([np.linalg.norm(a), np.linalg.norm(numeric), 1e-12])
        worst = np.maximum(worst, err / scale)
    return float(worst)
