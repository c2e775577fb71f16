"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor. Node ids come from a global counter, so sorting the reachable
nodes by id yields a valid topological order (parents are always created
before their children). That sorted record is the tape replayed by
:func:`backward`.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    BatchTooSmallError,
    DimensionError,
    EmptyInputError,
    NumericError,
    RankError,
    TapeError,
)

_node_ids = itertools.count()
_id_lock = threading.Lock()
_grad_state = threading.local()

STANDARDIZE_EPS = 1e-5
NORM_EPS = 1e-8


def _next_id() -> int:
    with _id_lock:
        return next(_node_ids)


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = _next_id() if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False
        self._is_leaf = True

    # ------------------------------------------------------------------ basics
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
        return self._is_leaf

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.node_id = _next_id()
            out._parents = tuple(parents)
            out._backward = backward
            out._is_leaf = False
        return out

    @staticmethod
    def _accumulate(t: "Tensor", g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
        else:
            t.grad = t.grad + g

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            Tensor._accumulate(a, _unbroadcast(g, a.shape))
            Tensor._accumulate(b, _unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: Tensor._accumulate(a, -g))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            Tensor._accumulate(a, _unbroadcast(g, a.shape))
            Tensor._accumulate(b, _unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            Tensor._accumulate(a, _unbroadcast(g * b.data, a.shape))
            Tensor._accumulate(b, _unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            Tensor._accumulate(a, _unbroadcast(g / b.data, a.shape))
            Tensor._accumulate(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self
        return Tensor._make(
            a.data**p, (a,), lambda g: Tensor._accumulate(a, g * p * a.data ** (p - 1))
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # ------------------------------------------------------------- reductions
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            Tensor._accumulate(a, np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ----------------------------------------------------------- elementwise
    def tanh(self) -> "Tensor":
        a = self
        y = np.tanh(a.data)
        return Tensor._make(y, (a,), lambda g: Tensor._accumulate(a, g * (1.0 - y * y)))

    def exp(self) -> "Tensor":
        a = self
        y = np.exp(a.data)
        return Tensor._make(y, (a,), lambda g: Tensor._accumulate(a, g * y))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: Tensor._accumulate(a, g / a.data))

    # ------------------------------------------------------------ reshaping
    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: Tensor._accumulate(a, g.T))

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(
            a.data.reshape(*shape), (a,), lambda g: Tensor._accumulate(a, g.reshape(a.shape))
        )

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            Tensor._accumulate(a, full)

        return Tensor._make(a.data[idx], (a,), bw)

    # ---------------------------------------------------------------- autodiff
    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


@dataclass
class Tape:
    """Reachable recorded nodes of one graph, in topological (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t.node_id)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a map from each reachable leaf to its gradient. The recorded graph
    is released afterwards; asking for a second backward over it raises
    :class:`TapeError`.
    """
    if loss.data.size != 1:
        raise RankError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward() already ran on this graph; run a new forward pass")
    if not loss.requires_grad:
        return {}
    tape = Tape.collect(loss)
    if any(t._consumed for t in tape.nodes):
        raise TapeError("graph contains nodes released by an earlier backward()")

    leaves = tape.leaves()
    if loss.is_leaf:
        Tensor._accumulate(loss, np.ones_like(loss.data))
    else:
        loss.grad = np.ones_like(loss.data)
    for t in reversed(tape.nodes):
        if t.is_leaf:
            continue
        if t.grad is not None:
            t._backward(t.grad)
        # intermediates keep no state once their upstream gradient is spent
        t.grad = None
        t._backward = None
        t._parents = ()
        t._consumed = True
    return {t: t.grad for t in leaves if t.grad is not None}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------- ops
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        Tensor._accumulate(a, g @ b.data.T)
        Tensor._accumulate(b, a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise EmptyInputError("stack() of an empty sequence")
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(ts):
            Tensor._accumulate(t, np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in ts], axis=axis), ts, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise EmptyInputError("concat() of an empty sequence")
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, bounds, axis=axis)):
            Tensor._accumulate(t, part)

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        Tensor._accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        Tensor._accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._make(y, (x,), bw)


def column_standardize(z: Tensor, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Center each column and scale it to unit population standard deviation.

    Columns with sd <= ``eps`` carry no signal (constant up to roundoff) and
    map to exact zeros with zero gradient, which keeps the op idempotent.
    """
    z = as_tensor(z)
    if z.ndim != 2:
        raise DimensionError(f"column_standardize expects a B x d matrix, got {z.shape}")
    n = z.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"column_standardize needs B >= 2, got B={n}")
    centered = z.data - z.data.mean(axis=0, keepdims=True)
    sd = np.sqrt((centered**2).mean(axis=0, keepdims=True))
    live = sd > eps
    denom = np.where(live, sd, 1.0)
    y = np.where(live, centered / denom, 0.0)

    def bw(g):
        gc = g - g.mean(axis=0, keepdims=True)
        proj = (g * y).mean(axis=0, keepdims=True)
        Tensor._accumulate(z, np.where(live, (gc - y * proj) / denom, 0.0))

    return Tensor._make(y, (z,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale slices along ``axis`` to unit norm; norms below ``eps`` are floored."""
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    floored = norm <= eps
    if np.any(floored & (norm == 0.0)):
        warnings.warn("zero vector in l2_normalize; its similarities will be 0", RuntimeWarning)
    denom = np.where(floored, eps, norm)
    y = x.data / denom

    def bw(g):
        proj = np.where(floored, 0.0, (g * y).sum(axis=axis, keepdims=True))
        Tensor._accumulate(x, (g - y * proj) / denom)

    return Tensor._make(y, (x,), bw)


def cosine_sim(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Cosine similarity of two vectors; 0 (with a warning) if either is zero."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine_sim expects two equal-length vectors, got {a.shape}, {b.shape}")
    return (l2_normalize(a, eps=eps) * l2_normalize(b, eps=eps)).sum()


def cosine_matrix(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix row dimension mismatch: {a.shape} vs {b.shape}")
    return l2_normalize(a, eps=eps) @ l2_normalize(b, eps=eps).T


# ------------------------------------------------------------ gradient oracle
def finite_difference_grad(f: Callable[[], object], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``param`` (in place)."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value near coordinate {i}")
            out[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_difference_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is re-evaluated from scratch for each perturbation and must read the
    current values of ``params``. Error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(_scalar(loss)):
        raise NumericError("function value is not finite at the check point")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference_grad(f, p, h)
        err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
