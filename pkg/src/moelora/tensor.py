"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Float64 end to end, row-major storage, strict shapes (the only broadcast is
tensor-times-scalar). Values live in numpy arrays; every differentiable
operation records a backward closure, and ``backward()`` on a scalar result
fills ``grad`` on each leaf with ``requires_grad`` set. Leaf gradients
accumulate across repeated backward calls until ``zero_grad``.

A tape belongs to the thread that built it; parallelism, if any, must be
across independent forward/backward evaluations.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "matmul",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "softplus",
    "scale_rows",
    "take_rows",
    "select_col",
    "concat",
    "reshape",
    "finite_diff_grad",
    "tensor_to_text",
    "tensor_from_text",
    "dump_tensor",
    "load_tensor",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Tensors are immutable after construction except for explicit in-place
    parameter updates (optimizer steps) applied to ``data`` between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], list] | None = None

    # -- bookkeeping ----------------------------------------------------

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
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- reverse-mode pass ------------------------------------------------

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must hold exactly one element. Repeated calls accumulate
        into leaf ``grad`` buffers; intermediate nodes never retain grads.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        topo = self._toposort()
        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                have = flows.get(pid)
                flows[pid] = pg if have is None else have + pg

    def _toposort(self) -> list["Tensor"]:
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return topo

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _result(self.data + float(other), (self,), lambda g: [g])
        _need_tensor(other)
        if self.shape != other.shape:
            raise ShapeError(f"add shapes differ: {self.shape} vs {other.shape}")
        return _result(self.data + other.data, (self, other), lambda g: [g, g])

    __radd__ = __add__

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: [-g])

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _result(self.data - float(other), (self,), lambda g: [g])
        _need_tensor(other)
        if self.shape != other.shape:
            raise ShapeError(f"sub shapes differ: {self.shape} vs {other.shape}")
        return _result(self.data - other.data, (self, other), lambda g: [g, -g])

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = float(other)
            return _result(self.data * c, (self,), lambda g: [g * c])
        _need_tensor(other)
        a, b = self, other
        if a.shape == b.shape:
            return _result(a.data * b.data, (a, b), lambda g: [g * b.data, g * a.data])
        if b.data.size == 1:
            return _result(
                a.data * b.data,
                (a, b),
                lambda g: [g * b.data, np.asarray(np.sum(g * a.data)).reshape(b.shape)],
            )
        if a.data.size == 1:
            return _result(
                a.data * b.data,
                (a, b),
                lambda g: [np.asarray(np.sum(g * b.data)).reshape(a.shape), g * a.data],
            )
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose requires a matrix, got shape {self.shape}")
        return _result(
            np.ascontiguousarray(self.data.T),
            (self,),
            lambda g: [np.ascontiguousarray(g.T)],
        )

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            return _result(
                np.asarray(np.sum(self.data)),
                (self,),
                lambda g: [np.broadcast_to(g, self.shape).copy()],
            )
        if self.ndim != 2 or axis not in (0, 1):
            raise ShapeError(f"axis sum supports matrices with axis 0/1, got shape {self.shape}")
        if axis == 0:
            return _result(
                np.sum(self.data, axis=0),
                (self,),
                lambda g: [np.broadcast_to(g, self.shape).copy()],
            )
        return _result(
            np.sum(self.data, axis=1),
            (self,),
            lambda g: [np.broadcast_to(g[:, None], self.shape).copy()],
        )

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _result(np.where(mask, self.data, 0.0), (self,), lambda g: [g * mask])

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return _result(e, (self,), lambda g: [g * e])

    def log(self) -> "Tensor":
        x = self.data
        return _result(np.log(x), (self,), lambda g: [g / x])

    def pow_const(self, p: float) -> "Tensor":
        x = self.data
        return _result(x ** p, (self,), lambda g: [g * (p * x ** (p - 1.0))])

    def reciprocal(self) -> "Tensor":
        return self.pow_const(-1.0)


def _need_tensor(x) -> None:
    if not isinstance(x, Tensor):
        raise TypeError(f"expected Tensor, got {type(x).__name__}")


def _result(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product covering (m,n)x(n,p), (n,)x(n,p), (m,n)x(n,) and dot."""
    _need_tensor(a)
    _need_tensor(b)
    ad, bd = a.data, b.data
    ok = (
        ad.ndim in (1, 2)
        and bd.ndim in (1, 2)
        and ad.shape[-1] == (bd.shape[0] if bd.ndim >= 1 else None)
    )
    if not ok:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} vs {b.shape}")
    out = ad @ bd

    def grad_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return [g @ bd.T, ad.T @ g]
        if ad.ndim == 1 and bd.ndim == 2:
            return [bd @ g, np.outer(ad, g)]
        if ad.ndim == 2 and bd.ndim == 1:
            return [np.outer(g, bd), ad.T @ g]
        return [g * bd, g * ad]  # dot product, g is 0-d

    return _result(np.asarray(out), (a, b), grad_fn)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax over the last axis, max-subtracted for stability.

    Output rows are nonnegative and sum to 1 within 1e-12. ``temperature``
    must be strictly positive; it is a plain constant here — callers that
    need gradient through a learnable temperature scale the logits
    themselves before calling.
    """
    _need_tensor(x)
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax supports vectors and matrices, got shape {x.shape}")
    z = x.data / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def grad_fn(g):
        s = np.sum(g * y, axis=-1, keepdims=True)
        return [y * (g - s) / temperature]

    return _result(y, (x,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax (last axis), max-subtracted."""
    _need_tensor(x)
    if x.ndim not in (1, 2):
        raise ShapeError(f"log_softmax supports vectors and matrices, got shape {x.shape}")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def grad_fn(g):
        return [g - y * np.sum(g, axis=-1, keepdims=True)]

    return _result(out, (x,), grad_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under row logits.

    ``logits`` is [batch x classes]; each target must lie in [0, classes).
    """
    _need_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch x classes] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"targets length {t.shape} does not match batch size {logits.shape[0]}"
        )
    n_classes = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise IndexError(f"target out of range [0, {n_classes}): {t[(t < 0) | (t >= n_classes)][0]}")
    batch = logits.shape[0]
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - lse
    nll = -float(np.mean(logp[np.arange(batch), t]))

    def grad_fn(g):
        p = np.exp(logp).copy()
        p[np.arange(batch), t] -= 1.0
        return [p * (float(g) / batch)]

    return _result(np.asarray(nll), (logits,), grad_fn)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    _need_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = _sigmoid(x.data)
    return _result(out, (x,), lambda g: [g * sig])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- structural ops --------------------------------------------------------


def scale_rows(m: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of matrix ``m`` by scalar ``s[i]``."""
    _need_tensor(m)
    _need_tensor(s)
    if m.ndim != 2 or s.ndim != 1 or m.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows needs [n x d] and [n], got {m.shape} and {s.shape}")
    md, sd = m.data, s.data

    def grad_fn(g):
        return [g * sd[:, None], np.sum(g * md, axis=1)]

    return _result(md * sd[:, None], (m, s), grad_fn)


def take_rows(table: Tensor, idx: Sequence[int]) -> Tensor:
    """Gather rows ``idx`` of ``table``; gradients scatter-add back."""
    _need_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got shape {table.shape}")
    ii = np.asarray(idx, dtype=np.intp)
    if ii.ndim != 1:
        raise ShapeError("take_rows indices must be one-dimensional")
    n = table.shape[0]
    if ii.size and (ii.min() < 0 or ii.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ii, g)
        return [gt]

    return _result(table.data[ii], (table,), grad_fn)


def select_col(m: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix, as a vector."""
    _need_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"select_col needs a matrix, got shape {m.shape}")
    if not 0 <= j < m.shape[1]:
        raise IndexError(f"column index {j} out of range [0, {m.shape[1]})")

    def grad_fn(g):
        gm = np.zeros_like(m.data)
        gm[:, j] = g
        return [gm]

    return _result(m.data[:, j].copy(), (m,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack matrices along rows (axis 0) or columns (axis 1)."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    for t in ts:
        _need_tensor(t)
        if t.ndim != 2:
            raise ShapeError(f"concat needs matrices, got shape {t.shape}")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        if axis == 0:
            return [g[offsets[i]:offsets[i + 1], :] for i in range(len(ts))]
        return [g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts))]

    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), grad_fn)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    _need_tensor(t)
    if int(np.prod(shape, dtype=np.int64)) != t.data.size:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}")
    old = t.shape
    return _result(t.data.reshape(shape), (t,), lambda g: [g.reshape(old)])


# -- gradient oracle -------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    Perturbs ``x.data`` in place one element at a time and restores it, so
    ``f`` may either use its argument or close over a model that owns ``x``.
    ``f`` must be pure and deterministic.
    """
    if not h > 0:
        raise DomainError(f"finite difference step must be > 0, got {h}")
    base = x.data.copy()
    g = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            x.data[idx] = base[idx] + h
            fp = _scalar(f(x))
            x.data[idx] = base[idx] - h
            fm = _scalar(f(x))
            x.data[idx] = base[idx]
            g[idx] = (fp - fm) / (2.0 * h)
    return Tensor(g)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


# -- flat text dumps --------------------------------------------------------


def tensor_to_text(t: Tensor) -> str:
    """Serialize as a ``shape:`` header plus row-major full-precision values."""
    header = "shape:" + "".join(f" {d}" for d in t.shape)
    if t.ndim >= 2:
        rows = t.data.reshape(t.shape[0], -1)
    else:
        rows = t.data.reshape(1, -1)
    lines = [" ".join(repr(float(v)) for v in row) for row in rows]
    return header + "\n" + "\n".join(lines) + "\n"


def tensor_from_text(text: str) -> Tensor:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError("tensor dump must start with a 'shape:' header line")
    dims = tuple(int(tok) for tok in lines[0][len("shape:"):].split())
    values = [float(tok) for line in lines[1:] for tok in line.split()]
    expected = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if len(values) != expected:
        raise ValueError(f"tensor dump has {len(values)} values, expected {expected}")
    return Tensor(np.asarray(values, dtype=np.float64).reshape(dims))


def dump_tensor(t: Tensor, path) -> None:
    with open(path, "w") as fh:
        fh.write(tensor_to_text(t))


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        return tensor_from_text(fh.read())
