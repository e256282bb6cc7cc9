"""Dense float64 arrays with reverse-mode automatic differentiation.

The engine is deliberately small: eager forward evaluation on numpy arrays,
one backward closure per produced tensor, and a deterministic topological
walk at ``backward`` time.  Everything is float64 and single-threaded per
graph; reduction order is whatever numpy does for a fixed shape, which is
bit-reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractViolationError,
    DimensionError,
    NumericDegeneracyError,
    ParameterError,
)


class Tensor:
    """A dense float64 array participating in a gradient graph.

    ``grad`` stays ``None`` until a backward pass populates it; repeated
    backward calls accumulate.  Tensors with ``requires_grad=False`` never
    receive a gradient.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _vjp=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the graph."""
        return Tensor(self.values, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(values, parents, vjp) -> Tensor:
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(values)
    return Tensor(values, requires_grad=True, _parents=tuple(parents), _vjp=vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values - b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values

    def vjp(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values

    def vjp(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * a.values / (b.values * b.values), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise functions
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log; 0 maps to -inf with zero gradient, negatives are errors."""
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise NumericDegeneracyError("log of a negative value")
    with np.errstate(divide="ignore"):
        out = np.log(a.values)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(a.values > 0, g / a.values, 0.0),)

    return _make(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise NumericDegeneracyError("sqrt of a negative value")
    out = np.sqrt(a.values)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was untouched."""
    a = as_tensor(a)
    out = np.clip(a.values, lo, hi)
    mask = (a.values > lo) & (a.values < hi)
    return _make(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.values.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes (plain transpose for 2-D tensors)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose expects >= 2-D, got shape {a.shape}")
    out = np.swapaxes(a.values, -1, -2).copy()
    return _make(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.values, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def permute(a, axes) -> Tensor:
    """Reorder axes; the gradient applies the inverse permutation."""
    a = as_tensor(a)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort(axes)
    out = np.transpose(a.values, axes).copy()
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = as_tensor(a)
    if not (0 <= axis < a.ndim):
        raise DimensionError(f"narrow: axis {axis} invalid for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range for extent "
            f"{a.shape[axis]} on axis {axis}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.values[sl].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return (full,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# matmul and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy's 1-D conveniences and stacked batching.

    (m,k)@(k,n) -> (m,n); (k,)@(k,n) -> (n,); (m,k)@(k,) -> (m,);
    (k,)@(k,) -> scalar; leading batch axes follow numpy matmul broadcasting
    (a shared 2-D operand is applied to every batch slice).  Gradients:
    dA = g Bᵀ, dB = Aᵀ g, summed over broadcast batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(
            f"matmul needs at least 1-D operands, got shapes {a.shape} and {b.shape}"
        )
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    out = np.matmul(a.values, b.values)

    a2 = a.values.reshape(1, -1) if a.ndim == 1 else a.values
    b2 = b.values.reshape(-1, 1) if b.ndim == 1 else b.values
    out2_shape = np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (
        a2.shape[-2],
        b2.shape[-1],
    )

    def vjp(g):
        g2 = g.reshape(out2_shape)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _make(out, (a, b), vjp)


def reduce(a, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or arithmetic mean along ``axis`` (None reduces everything)."""
    a = as_tensor(a)
    if kind not in ("sum", "mean"):
        raise ParameterError(f"reduce kind must be 'sum' or 'mean', got {kind!r}")
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise DimensionError(f"reduce: axis {axis} invalid for shape {a.shape}")
    if kind == "sum":
        out = a.values.sum(axis=axis, keepdims=keepdims)
        scale = 1.0
    else:
        out = a.values.mean(axis=axis, keepdims=keepdims)
        scale = 1.0 / (a.size if axis is None else a.shape[axis])

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) * scale,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# composite numerics
# ---------------------------------------------------------------------------

def softmax_stable(z, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax with max-subtraction; safe for |z| up to ~1e300·τ.

    The subtracted maximum is treated as a constant, which leaves the value
    and the gradient unchanged.
    """
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = as_tensor(z)
    scaled = mul(z, 1.0 / temperature)
    shift = np.max(scaled.values, axis=axis, keepdims=True)
    e = exp(sub(scaled, shift))
    return div(e, reduce(e, "sum", axis=axis, keepdims=True))


def cosine_sim(u, v) -> Tensor:
    """Cosine similarity of two d-vectors, in [-1, 1]; rejects zero norms."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(
            f"cosine_sim expects two equal-length vectors, got {u.shape} and {v.shape}"
        )
    nu = float(np.linalg.norm(u.values))
    nv = float(np.linalg.norm(v.values))
    if nu == 0.0 or nv == 0.0:
        raise NumericDegeneracyError("cosine_sim of a zero-norm vector")
    num = reduce(mul(u, v), "sum")
    den = mul(sqrt(reduce(mul(u, u), "sum")), sqrt(reduce(mul(v, v), "sum")))
    return div(num, den)


def unit_normalize(v) -> Tensor:
    """v / ||v||2 for a 1-D tensor; rejects zero norms."""
    v = as_tensor(v)
    if float(np.linalg.norm(v.values)) == 0.0:
        raise NumericDegeneracyError("cannot normalize a zero-norm vector")
    return div(v, sqrt(reduce(mul(v, v), "sum")))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    """Post-order over the graph reaching ``root``; deterministic."""
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
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad ancestor of a scalar loss.

    Fan-out is accumulated before a node's own closure runs, so each ancestor
    is populated exactly once per call; calling again without clearing grads
    accumulates.
    """
    if not isinstance(loss, Tensor):
        raise ContractViolationError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractViolationError(
            f"backward expects a scalar loss, got shape {loss.shape}"
        )
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    flow = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flow.get(id(parent))
            flow[id(parent)] = pg if acc is None else acc + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
