"""Dense float64 tensors with a reverse-mode gradient tape.

Values are numpy arrays. Each differentiable operation records its parent
tensors and a closure mapping the output adjoint to parent adjoints; the
tape itself is materialised at backward() time by a topological sort of the
parent graph, so every node is visited exactly once and parents always
precede children.

Conventions
  * tensor data is never mutated in place; parameter updates rebind
    ``.data`` (detached views therefore stay valid)
  * matmul and solve operate on rank-2 arrays only
  * elementwise ops broadcast like numpy and gradients are summed back
    over the broadcast axes
  * repeated backward() calls without zeroing accumulate into ``.grad``
"""

from __future__ import annotations

import contextlib

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A numerical computation left the domain where it is trustworthy."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / targets)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph management --------------------------------------------------
    def detach(self):
        """Same values, no tape connection."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor.

        Only defined for scalars (size-1 tensors). Each call adds one full
        chain contribution, so calling twice doubles the gradients.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        adjoint = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in adjoint:
                    adjoint[pid] = adjoint[pid] + pg
                else:
                    adjoint[pid] = pg

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _toposort(root):
    """Post-order DFS (iterative: the DARE graph is deep at large M)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum adjoint g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a):
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = _lift(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a):
    a = _lift(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: ((1.0 - y * y) * g,))


def exp(a):
    a = _lift(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (y * g,))


def log(a):
    a = _lift(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a):
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    a = _lift(a)
    y = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, (a,), lambda g: (sig * g,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes wherever lo <= x <= hi."""
    a = _lift(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b):
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, b = _lift(a), _lift(b)
    take_a = a.data <= b.data
    return _node(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


def maximum(a, b):
    a, b = _lift(a), _lift(b)
    take_a = a.data >= b.data
    return _node(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _lift(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis):
    """Row/column log-sum-exp with max subtraction; gradient is the softmax."""
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    y = (np.log(s) + m).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * ex / s,)

    return _node(y, (a,), backward)


# -- structural ops -----------------------------------------------------------

def transpose(a):
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.data.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _lift(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis):
    tensors = tuple(_lift(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def diag_embed(v):
    """Vector (d,) -> diagonal matrix (d, d)."""
    v = _lift(v)
    if v.data.ndim != 1:
        raise DimensionError(f"diag_embed expects a vector, got {v.data.shape}")
    return _node(np.diag(v.data), (v,), lambda g: (np.diagonal(g).copy(),))


def diag_part(m):
    """Main diagonal of a matrix as a vector."""
    m = _lift(m)
    if m.data.ndim != 2:
        raise DimensionError(f"diag_part expects a matrix, got {m.data.shape}")

    def backward(g):
        out = np.zeros_like(m.data)
        np.fill_diagonal(out, g)
        return (out,)

    return _node(np.diagonal(m.data).copy(), (m,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes do not agree: {a.data.shape} x {b.data.shape}"
        )
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def affine(x, w, b):
    """x @ w + b in a single tape node (the dense-layer hot path)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"affine shapes do not agree: {x.data.shape} x {w.data.shape}"
        )
    return _node(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


_COND_LIMIT = 1e12


def solve(a, b):
    """X with a @ X = b, differentiable in both arguments.

    The adjoint rule is used instead of differentiating a factorisation:
    db = a^-T g, da = -db X^T. Refuses matrices with 2-norm condition
    estimate above 1e12.
    """
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"solve needs a square matrix, got {a.data.shape}")
    if b.data.ndim != 2 or b.data.shape[0] != a.data.shape[0]:
        raise DimensionError(
            f"solve shapes do not agree: {a.data.shape} x {b.data.shape}"
        )
    n = a.data.shape[0]
    if n == 1:
        if a.data[0, 0] == 0.0:
            raise NumericError("solve: singular 1x1 system")
    else:
        cond = np.linalg.cond(a.data)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NumericError(f"solve: ill-conditioned system, cond ~ {cond:.3e}")
    try:
        x = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"solve: {err}") from err

    def backward(g):
        gb = np.linalg.solve(a.data.T, g)
        return (-gb @ x.T, gb)

    return _node(x, (a, b), backward)


def svd_rank(m, tol=1e-8):
    """Numerical rank: count of singular values above tol * sigma_max."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if data.size == 0:
        return 0
    if not np.all(np.isfinite(data)):
        raise NumericError("svd_rank: non-finite entries")
    s = np.linalg.svd(data, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def eigvals(m):
    """Eigenvalues (with multiplicity) of a square matrix, as complex values."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise DimensionError(f"eigvals needs a square matrix, got {data.shape}")
    return [complex(v) for v in np.linalg.eigvals(data)]


def backward(t):
    """Module-level alias for Tensor.backward()."""
    t.backward()


def grad_of(t):
    """Gradient as an array, treating an untouched .grad as zeros."""
    return np.zeros_like(t.data) if t.grad is None else t.grad


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
