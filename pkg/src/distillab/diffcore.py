"""Reverse-mode differentiation over dense float64 arrays.

The engine is a Wengert tape: every primitive produces a :class:`Var`
node which is appended to the active :class:`Tape` in creation order.
A reverse pass walks the tape backwards, which is a valid topological
order because parents are always created before their consumers.

Backward rules are themselves written in terms of the primitives, so a
reverse pass executed with ``create_graph=True`` records the gradient
computation on the same tape and a second pass over it yields exact
Hessian-vector products (Pearlmutter's double-backward construction).

Everything is float64. Non-finite values are rejected at entry points
and detected in outputs; they never propagate silently.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError

__all__ = [
    "Var",
    "Tape",
    "ParameterVector",
    "constant",
    "leaf",
    "as_array64",
    "grad",
    "value_and_grad",
    "hvp",
]


# --------------------------------------------------------------------------
# tape machinery

_STATE = threading.local()


def _stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def _active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class _Suspend:
    """Context manager that disables recording while active."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def no_tape():
    """Run ops without recording; outputs are plain value carriers."""
    return _Suspend()


class Tape:
    """Ordered record of primitive operations for reverse passes.

    A tape is single-threaded. Re-running :meth:`gradient` over the same
    recorded operations is deterministic and bit-identical.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, node):
        node._index = len(self._nodes)
        self._nodes.append(node)

    def gradient(self, output, sources, create_graph=False):
        """Reverse pass from a scalar ``output`` to each source leaf.

        Returns one :class:`Var` per source; sources the output does not
        depend on get zero gradients. With ``create_graph=True`` the
        pass itself is recorded so it can be differentiated again.
        """
        if not isinstance(output, Var):
            raise ContractError("gradient output must be a Var")
        if output.data.size != 1:
            raise ContractError("gradient is defined for scalar outputs only")
        sources = list(sources)
        ctx = self if create_graph else None
        partials = {id(output): constant(np.ones_like(output.data))}
        stop = len(self._nodes)
        _stack().append(ctx)
        try:
            for i in range(stop - 1, -1, -1):
                node = self._nodes[i]
                g = partials.pop(id(node), None)
                if g is None:
                    continue
                for parent, vjp in node._vjps:
                    pg = vjp(g)
                    acc = partials.get(id(parent))
                    partials[id(parent)] = pg if acc is None else acc + pg
        finally:
            _stack().pop()
        out = []
        for src in sources:
            g = partials.get(id(src))
            if g is None:
                g = constant(np.zeros_like(src.data))
            out.append(g)
        return out


class Var:
    """A node holding a float64 array and, when recorded, its history."""

    __slots__ = ("data", "requires_grad", "_vjps", "_index")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._vjps = ()
        self._index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # arithmetic sugar; scalars and arrays are lifted to constants
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def constant(data):
    """A value carrier that gradients never flow into."""
    return Var(data, requires_grad=False)


def leaf(data):
    """A differentiation source (model parameter segment)."""
    return Var(data, requires_grad=True)


def as_var(x):
    return x if isinstance(x, Var) else constant(np.asarray(x, dtype=np.float64))


def as_array64(x, name="value"):
    """Validate and convert input data to a finite float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains NaN or Inf")
    return arr


def _finish(out, vjps):
    tape = _active_tape()
    if tape is not None and vjps:
        out.requires_grad = True
        out._vjps = tuple(vjps)
        tape._record(out)
    return out


def _tracked(*vars_):
    return _active_tape() is not None and any(v.requires_grad for v in vars_)


# --------------------------------------------------------------------------
# primitives

def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data + b.data)
    vjps = []
    if _tracked(a, b):
        if a.requires_grad:
            vjps.append((a, lambda g, s=a.data.shape: _unbroadcast(g, s)))
        if b.requires_grad:
            vjps.append((b, lambda g, s=b.data.shape: _unbroadcast(g, s)))
    return _finish(out, vjps)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data - b.data)
    vjps = []
    if _tracked(a, b):
        if a.requires_grad:
            vjps.append((a, lambda g, s=a.data.shape: _unbroadcast(g, s)))
        if b.requires_grad:
            vjps.append((b, lambda g, s=b.data.shape: _unbroadcast(neg(g), s)))
    return _finish(out, vjps)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data * b.data)
    vjps = []
    if _tracked(a, b):
        if a.requires_grad:
            vjps.append((a, lambda g, o=b, s=a.data.shape: _unbroadcast(mul(g, o), s)))
        if b.requires_grad:
            vjps.append((b, lambda g, o=a, s=b.data.shape: _unbroadcast(mul(g, o), s)))
    return _finish(out, vjps)


def div(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data / b.data)
    vjps = []
    if _tracked(a, b):
        if a.requires_grad:
            vjps.append((a, lambda g, d=b, s=a.data.shape: _unbroadcast(div(g, d), s)))
        if b.requires_grad:
            vjps.append(
                (b, lambda g, d=b, o=out, s=b.data.shape: _unbroadcast(neg(div(mul(g, o), d)), s))
            )
    return _finish(out, vjps)


def neg(a):
    a = as_var(a)
    out = Var(-a.data)
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g: neg(g)))
    return _finish(out, vjps)


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = Var(a.data @ b.data)
    vjps = []
    if _tracked(a, b):
        if a.requires_grad:
            vjps.append((a, lambda g, o=b: matmul(g, transpose(o))))
        if b.requires_grad:
            vjps.append((b, lambda g, o=a: matmul(transpose(o), g)))
    return _finish(out, vjps)


def relu(a):
    a = as_var(a)
    out = Var(np.maximum(a.data, 0.0))
    vjps = []
    if _tracked(a):
        mask = (a.data > 0.0).astype(np.float64)
        vjps.append((a, lambda g, m=mask: mul(g, m)))
    return _finish(out, vjps)


def exp(a):
    a = as_var(a)
    out = Var(np.exp(a.data))
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, o=out: mul(g, o)))
    return _finish(out, vjps)


def log(a):
    a = as_var(a)
    out = Var(np.log(a.data))
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, o=a: div(g, o)))
    return _finish(out, vjps)


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = Var(np.sum(a.data, axis=axis, keepdims=keepdims))
    vjps = []
    if _tracked(a):
        shape = a.data.shape
        if axis is None:
            kept = (1,) * len(shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

        def _back(g, kept=kept, shape=shape):
            return broadcast_to(reshape(g, kept), shape)

        vjps.append((a, _back))
    return _finish(out, vjps)


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def broadcast_to(a, shape):
    a = as_var(a)
    out = Var(np.broadcast_to(a.data, shape).copy())
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, s=a.data.shape: _unbroadcast(g, s)))
    return _finish(out, vjps)


def reshape(a, shape):
    a = as_var(a)
    out = Var(a.data.reshape(shape))
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, s=a.data.shape: reshape(g, s)))
    return _finish(out, vjps)


def transpose(a, axes=None):
    a = as_var(a)
    out = Var(np.transpose(a.data, axes))
    vjps = []
    if _tracked(a):
        inv = None if axes is None else tuple(np.argsort(axes))
        vjps.append((a, lambda g, ax=inv: transpose(g, ax)))
    return _finish(out, vjps)


def take_cols(a, idx):
    """Gather columns of a 2-D array: out[n, j] = a[n, idx[j]]."""
    a = as_var(a)
    if a.ndim != 2:
        raise ContractError("take_cols expects a 2-D operand")
    idx = np.asarray(idx, dtype=np.intp)
    out = Var(a.data[:, idx])
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, i=idx, w=a.data.shape[1]: put_cols(g, i, w)))
    return _finish(out, vjps)


def put_cols(a, idx, width):
    """Scatter-add columns: out[n, idx[j]] += a[n, j], out has ``width`` columns."""
    a = as_var(a)
    if a.ndim != 2:
        raise ContractError("put_cols expects a 2-D operand")
    idx = np.asarray(idx, dtype=np.intp)
    dest = np.zeros((a.data.shape[0], width))
    np.add.at(dest, (slice(None), idx), a.data)
    out = Var(dest)
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, i=idx: take_cols(g, i)))
    return _finish(out, vjps)


def pad2d(a, padding):
    """Zero-pad the trailing two axes of an NCHW array."""
    a = as_var(a)
    p = int(padding)
    if p == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    out = Var(np.pad(a.data, width))
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, q=p: crop2d(g, q)))
    return _finish(out, vjps)


def crop2d(a, padding):
    """Inverse of :func:`pad2d`: drop a border from the trailing two axes."""
    a = as_var(a)
    p = int(padding)
    if p == 0:
        return a
    out = Var(a.data[..., p:-p, p:-p].copy())
    vjps = []
    if _tracked(a):
        vjps.append((a, lambda g, q=p: pad2d(g, q)))
    return _finish(out, vjps)


def detach(a):
    """Cut a value out of the differentiation graph."""
    return constant(as_var(a).data)


def dot(a, b):
    """Inner product of two same-shape arrays as a scalar Var."""
    return vsum(mul(a, b))


# --------------------------------------------------------------------------
# parameter vectors

class ParameterVector:
    """Ordered named float64 segments viewed through one flat vector.

    The flat array owns the storage; segments are reshaped views of it.
    Treat instances as immutable once shared: optimizers return fresh
    vectors instead of writing in place.
    """

    __slots__ = ("names", "shapes", "flat", "_offsets")

    def __init__(self, names, shapes, flat):
        self.names = tuple(names)
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        if len(self.names) != len(self.shapes):
            raise ContractError("names and shapes must align")
        if len(set(self.names)) != len(self.names):
            raise ContractError("segment names must be unique")
        sizes = [int(np.prod(s)) if s else 1 for s in self.shapes]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.flat = np.ascontiguousarray(flat, dtype=np.float64).reshape(-1)
        if self.flat.size != offsets[-1]:
            raise ContractError(
                f"flat size {self.flat.size} does not match segment total {offsets[-1]}"
            )
        self._offsets = offsets

    @classmethod
    def from_arrays(cls, items: Iterable[tuple[str, np.ndarray]]):
        names, shapes, chunks = [], [], []
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            names.append(name)
            shapes.append(arr.shape)
            chunks.append(arr.reshape(-1))
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(names, shapes, flat)

    @property
    def total_dim(self):
        return int(self.flat.size)

    def segment(self, name):
        i = self.names.index(name)
        lo, hi = self._offsets[i], self._offsets[i + 1]
        return self.flat[lo:hi].reshape(self.shapes[i])

    def to_dict(self):
        return {name: self.segment(name) for name in self.names}

    def leaves(self) -> dict[str, Var]:
        """Per-segment differentiation sources for a loss closure."""
        return {name: leaf(self.segment(name)) for name in self.names}

    def same_structure(self, other):
        return self.names == other.names and self.shapes == other.shapes

    def with_flat(self, flat):
        return ParameterVector(self.names, self.shapes, flat)

    def copy(self):
        return self.with_flat(self.flat.copy())

    def zeros_like(self):
        return self.with_flat(np.zeros_like(self.flat))

    def __add__(self, other):
        self._check(other)
        return self.with_flat(self.flat + other.flat)

    def __sub__(self, other):
        self._check(other)
        return self.with_flat(self.flat - other.flat)

    def __mul__(self, scalar):
        return self.with_flat(self.flat * float(scalar))

    __rmul__ = __mul__

    def dot(self, other):
        self._check(other)
        return float(self.flat @ other.flat)

    def norm(self):
        return float(np.linalg.norm(self.flat))

    def _check(self, other):
        if not isinstance(other, ParameterVector) or not self.same_structure(other):
            raise ContractError("parameter vectors have mismatched structure")

    def __len__(self):
        return len(self.names)

    def __repr__(self):
        return f"ParameterVector({len(self.names)} segments, total_dim={self.total_dim})"

    def check_finite(self, what="parameters"):
        """Raise :class:`NumericError` naming the first non-finite segment."""
        if np.all(np.isfinite(self.flat)):
            return self
        for name in self.names:
            seg = self.segment(name)
            if not np.all(np.isfinite(seg)):
                raise NumericError(f"non-finite {what} in segment '{name}'")
        raise NumericError(f"non-finite {what}")  # pragma: no cover


LossFn = Callable[[Mapping[str, Var]], Var]


def _run_loss(loss_fn: LossFn, leaves: Mapping[str, Var]) -> Var:
    out = loss_fn(leaves)
    if not isinstance(out, Var):
        out = as_var(out)
    if out.data.size != 1:
        raise ContractError("loss function must return a scalar")
    if not np.isfinite(out.data):
        raise NumericError(f"loss is non-finite ({float(out.data)!r})")
    return out


def _collect(grads: Sequence[Var], theta: ParameterVector, what: str) -> ParameterVector:
    flat = np.concatenate([g.data.reshape(-1) for g in grads]) if grads else np.zeros(0)
    out = theta.with_flat(flat)
    out.check_finite(what)
    return out


def value_and_grad(loss_fn: LossFn, theta: ParameterVector):
    """Loss value and exact gradient at ``theta``; deterministic per input."""
    theta.check_finite()
    with Tape() as tape:
        leaves = theta.leaves()
        loss = _run_loss(loss_fn, leaves)
    grads = tape.gradient(loss, [leaves[n] for n in theta.names])
    return float(loss.data), _collect(grads, theta, "gradient")


def grad(loss_fn: LossFn, theta: ParameterVector) -> ParameterVector:
    """Gradient of a scalar loss with respect to every parameter segment."""
    return value_and_grad(loss_fn, theta)[1]


def hvp(loss_fn: LossFn, theta: ParameterVector, v: ParameterVector) -> ParameterVector:
    """Hessian-vector product H(theta) @ v via double-backward.

    The first reverse pass is recorded, the inner product <grad, v> is
    formed on the tape, and a second reverse pass differentiates it.
    """
    if v.total_dim != theta.total_dim:
        raise ContractError(
            f"direction dim {v.total_dim} does not match parameter dim {theta.total_dim}"
        )
    theta.check_finite()
    v.check_finite("direction")
    with Tape() as tape:
        leaves = theta.leaves()
        loss = _run_loss(loss_fn, leaves)
        ordered = [leaves[n] for n in theta.names]
        grads = tape.gradient(loss, ordered, create_graph=True)
        inner = None
        for name, g in zip(theta.names, grads):
            term = dot(g, constant(v.segment(name)))
            inner = term if inner is None else add(inner, term)
    hv = tape.gradient(inner, ordered)
    return _collect(hv, theta, "hessian-vector product")
