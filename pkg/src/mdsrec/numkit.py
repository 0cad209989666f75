"""Small reverse-mode autodiff kernel over numpy arrays.

Every op builds an output :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks that record in reverse topological order. Only leaf tensors with
``requires_grad`` (parameters) accumulate into ``.grad``; intermediates
receive gradients only transiently unless ``retain`` is set.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy import sparse as sp
from scipy.special import erf

from .errors import GraphError, MaskError, NonDeterministicError, ShapeError

DEBUG = bool(os.environ.get("MDSREC_DEBUG"))

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retain", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.retain = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; scale by a constant instead")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    """A trainable leaf owning a private copy of ``data``."""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and not isinstance(x, np.ndarray):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {what}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if DEBUG:
        _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    c = a.dtype.type(c) if a.dtype.kind == "f" else c
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equally shaped tensors."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return tsum(mul(a, b))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"gelu": gelu, "relu": relu}


# -- shape ops ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {orig} into {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def index(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, back, "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # divide rather than scale by 1/n so the result matches np.mean bit for bit
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    s = tsum(x, axis=axis, keepdims=keepdims)
    return _make(s.data / n, (s,), lambda g: (g / n,), "mean")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids outside [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def back(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), back, "embedding_lookup")


# -- normalisation ------------------------------------------------------------

def _as_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(f"softmax mask {mask.shape} does not broadcast to {shape}") from None
    if not mask.any(axis=-1).all():
        raise MaskError("softmax row with every entry forbidden")
    return mask


def row_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; forbidden (mask False) entries get weight 0."""
    m = _as_mask(mask, x.shape)
    z = x.data if m is None else np.where(m, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), back, "row_softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} vs width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx_hat = g * gd
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


# -- sparse -------------------------------------------------------------------

class SparseMatrix:
    """Compressed-row matrix; columns strictly increasing within each row."""

    def __init__(self, n_rows: int, n_cols: int, indptr, indices, values):
        self.n_rows, self.n_cols = int(n_rows), int(n_cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self._csr: dict = {}
        self._validate()

    def _validate(self) -> None:
        if self.indptr.shape != (self.n_rows + 1,) or self.indptr[0] != 0:
            raise ShapeError("indptr must have n_rows+1 entries starting at 0")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != self.indices.size:
            raise ShapeError("indptr must be non-decreasing and end at nnz")
        if self.indices.size != self.values.size:
            raise ShapeError("indices and values differ in length")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.n_cols:
                raise ShapeError("column index out of range")
            step = np.diff(self.indices)
            row_start = np.zeros(self.indices.size, dtype=bool)
            row_start[self.indptr[:-1][np.diff(self.indptr) > 0]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ShapeError("columns must be strictly increasing within a row")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("sparse values must be finite")

    @classmethod
    def from_coo(cls, n_rows: int, n_cols: int, rows, cols, values) -> SparseMatrix:
        rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size > 1 and np.any((np.diff(rows) == 0) & (np.diff(cols) == 0)):
            raise ShapeError("duplicate (row, col) entries")
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
        return cls(n_rows, n_cols, indptr, cols, values)

    @classmethod
    def from_dense(cls, a: np.ndarray) -> SparseMatrix:
        a = np.asarray(a)
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> SparseMatrix:
        return cls(n_rows, n_cols, np.zeros(n_rows + 1), [], [])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), np.diff(self.indptr))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.values
        return out

    def transpose(self) -> SparseMatrix:
        return SparseMatrix.from_coo(self.n_cols, self.n_rows, self.indices, self.row_ids(), self.values)

    def scipy(self, dtype=np.float64) -> sp.csr_matrix:
        key = np.dtype(dtype).str
        if key not in self._csr:
            self._csr[key] = sp.csr_matrix(
                (self.values.astype(dtype), self.indices, self.indptr), shape=self.shape)
        return self._csr[key]

    def dot(self, dense: np.ndarray) -> np.ndarray:
        dense = np.asarray(dense)
        if dense.shape[0] != self.n_cols:
            raise ShapeError(f"sparse {self.shape} @ dense {dense.shape}: inner dims differ")
        dtype = dense.dtype if dense.dtype.kind == "f" else np.float64
        return np.asarray(self.scipy(dtype) @ dense.astype(dtype, copy=False))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def sparse_dense_matmul(s: SparseMatrix, d) -> Tensor:
    d = _lift(d)
    if d.ndim != 2 or d.shape[0] != s.n_cols:
        raise ShapeError(f"sparse {s.shape} @ dense {d.shape}: inner dims differ")
    csr = s.scipy(d.dtype)
    csr_t = csr.T

    def back(g):
        return (np.asarray(csr_t @ g),)

    return _make(np.asarray(csr @ d.data), (d,), back, "sparse_dense_matmul")


# -- reverse pass -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every trainable leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a 1-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any trainable tensor through a recorded graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retain:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            if DEBUG:
                _check_finite(node.grad, f"backward into {node.name or 'tensor'}")
            if node.is_leaf:
                continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- finite-difference checking -----------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    step: float = 1e-5
    tol: float | None = None

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.tol is None or all(e < self.tol for e in self.errors.values())

    def lines(self) -> list[str]:
        return [f"{name}\t{err:.3e}" for name, err in sorted(self.errors.items())]


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return np.abs(g_ad - g_fd) / denom


def grad_check(closure: Callable[[], Tensor], params: Mapping[str, Tensor],
               step: float = 1e-5, tol: float | None = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients with central differences, entry by entry.

    ``closure`` must rebuild the loss from the current parameter values and
    be deterministic; two disagreeing forward passes raise
    :class:`NonDeterministicError`.
    """
    with no_grad():
        a, b = closure().item(), closure().item()
    if a != b:
        raise NonDeterministicError(f"closure returned {a!r} then {b!r} for identical inputs")

    for p in params.values():
        p.zero_grad()
    backward(closure())
    report = GradCheckReport(step=step, tol=tol)
    for name, p in params.items():
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        g_fd = np.zeros_like(p.data)
        flat, fd_flat = p.data.reshape(-1), g_fd.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = closure().item()
                flat[i] = orig - step
                down = closure().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2.0 * step)
        report.errors[name] = float(relative_error(g_ad, g_fd).max()) if p.size else 0.0
    return report
