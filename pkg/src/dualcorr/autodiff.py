"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything learnable in this package (descriptor nets, refinement layers,
losses) runs on the :class:`Tensor` type below.  The tape is rebuilt on every
forward pass: each operation records its parents and a backward closure, and
``Tensor.backward`` walks the DAG once in reverse topological order,
accumulating gradients into every ancestor that has ``requires_grad``.

Only the operations this package needs are provided; there is no general
broadcasting.  All arithmetic is 64-bit.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import NumericError, ShapeError, StateError

_DEBUG = bool(os.environ.get("DUALCORR_DEBUG"))


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf screening after every operation (slow, for debugging)."""
    global _DEBUG
    _DEBUG = bool(enabled)


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Parameters
    ----------
    data : array_like
        Values; converted to a float64 ndarray. Must be finite.
    requires_grad : bool
        When True, ``backward`` accumulates into ``self.grad``.

    Notes
    -----
    Tensors are immutable after construction except for the gradient
    accumulator (and in-place parameter updates applied by the optimizer
    between tapes). ``grad`` is ``None`` until a backward pass first reaches
    the tensor; it always matches ``data``'s shape once populated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- internal node construction -------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward_fn):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward_fn = backward_fn
        else:
            t._parents = ()
            t._backward_fn = None
        if _DEBUG and not np.all(np.isfinite(data)):
            raise NumericError("non-finite value produced by an operation")
        return t

    def _accum(self, g: np.ndarray) -> None:
        # Gradients are accumulated without copying: stored arrays are never
        # mutated in place (fan-in allocates a fresh sum), so holding a
        # reference that another node may also hold is safe.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- basic protocol ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Reverse-mode pass from this tensor.

        ``seed`` defaults to 1.0 and requires a single-element tensor;
        non-scalar roots need an explicit seed of matching shape.
        """
        if not self.requires_grad:
            raise StateError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = _as_f64(seed)
            if seed.shape != self.data.shape:
                raise ShapeError("seed shape does not match tensor shape")

        # Iterative topological order over the grad-requiring subgraph.
        order = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                order.append(node)

        self._accum(seed)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor._from_op(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return Tensor._from_op(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def backward(g):
        a._accum(g * c)

    return Tensor._from_op(out_data, (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    out_data = a.data + float(c)

    def backward(g):
        a._accum(g)

    return Tensor._from_op(out_data, (a,), backward)


def neg(a: Tensor) -> Tensor:
    out_data = -a.data

    def backward(g):
        a._accum(-g)

    return Tensor._from_op(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum(g * (a.data > 0.0))

    return Tensor._from_op(out_data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(g):
        a._accum(g * np.sign(a.data))

    return Tensor._from_op(out_data, (a,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; at ties the gradient routes to the first argument."""
    _same_shape(a, b, "maximum")
    out_data = np.maximum(a.data, b.data)

    def backward(g):
        mask = a.data >= b.data
        if a.requires_grad:
            a._accum(g * mask)
        if b.requires_grad:
            b._accum(g * ~mask)

    return Tensor._from_op(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul requires 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward)


def add_bias(mat: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias over the last axis of ``mat``."""
    if bias.data.ndim != 1 or mat.data.shape[-1] != bias.data.shape[0]:
        raise ShapeError(f"add_bias: {mat.shape} vs bias {bias.shape}")
    out_data = mat.data + bias.data

    def backward(g):
        if mat.requires_grad:
            mat._accum(g)
        if bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Tensor._from_op(out_data, (mat, bias), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose is defined for 2-D tensors; use permute")
    # materialized contiguous: downstream row gathers on a transposed view
    # would read strided columns
    out_data = np.ascontiguousarray(a.data.T)

    def backward(g):
        a._accum(np.ascontiguousarray(g.T))

    return Tensor._from_op(out_data, (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(np.transpose(g, inv))

    return Tensor._from_op(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)
    in_shape = a.data.shape

    def backward(g):
        a._accum(g.reshape(in_shape))

    return Tensor._from_op(out_data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    tensors = list(tensors)
    if axis not in (-1, tensors[0].data.ndim - 1):
        raise ShapeError("concat supports the last axis only")
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=-1)
    sizes = [d.shape[-1] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accum(g[..., lo:hi])

    return Tensor._from_op(out_data, tensors, backward)


def stack(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = list(tensors)
    base = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != base:
            raise ShapeError("stack requires equal shapes")
    out_data = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(g[i])

    return Tensor._from_op(out_data, tensors, backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter-add back."""
    if a.data.ndim != 2:
        raise ShapeError("gather_rows requires a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of bounds for {n} rows")
    out_data = a.data[idx]

    if a.requires_grad and idx.size:
        # precompute a reduceat scatter plan; far faster than np.add.at
        if idx.size == 1 or np.all(np.diff(idx) >= 0):
            order, sidx = None, idx
        else:
            order = np.argsort(idx, kind="stable")
            sidx = idx[order]
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sidx)) + 1])
        uniq = sidx[starts]
    else:
        order = starts = uniq = None

    def backward(g):
        ga = np.zeros_like(a.data)
        if idx.size:
            grouped = g if order is None else g[order]
            ga[uniq] = np.add.reduceat(grouped, starts, axis=0)
        a._accum(ga)

    return Tensor._from_op(out_data, (a,), backward)


def take_per_row(a: Tensor, cols) -> Tensor:
    """Pick one column per row of a 2-D tensor, returning a vector."""
    if a.data.ndim != 2:
        raise ShapeError("take_per_row requires a 2-D tensor")
    cols = np.asarray(cols, dtype=np.intp)
    k, m = a.data.shape
    if cols.shape != (k,):
        raise ShapeError("take_per_row: one column index per row required")
    if cols.size and (cols.min() < 0 or cols.max() >= m):
        raise IndexError(f"take_per_row: column out of bounds for {m} columns")
    rows = np.arange(k)
    out_data = a.data[rows, cols]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, cols] = g
        a._accum(ga)

    return Tensor._from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g):
        a._accum(np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g):
        a._accum(np.broadcast_to(g / n, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward)


def sum_squares(a: Tensor) -> Tensor:
    """Scalar sum of squared entries (squared L2 / Frobenius norm)."""
    out_data = np.asarray(np.square(a.data).sum())

    def backward(g):
        a._accum((2.0 * float(g)) * a.data)

    return Tensor._from_op(out_data, (a,), backward)


def l1(a: Tensor) -> Tensor:
    """Scalar sum of absolute values; subgradient 0 at zero entries."""
    out_data = np.asarray(np.abs(a.data).sum())

    def backward(g):
        a._accum(float(g) * np.sign(a.data))

    return Tensor._from_op(out_data, (a,), backward)


def logsumexp(a: Tensor) -> Tensor:
    """Log-sum-exp over the last axis, computed with a max shift."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out_data = (m + np.log(s)).reshape(x.shape[:-1])
    soft = e / s

    def backward(g):
        a._accum(np.expand_dims(np.asarray(g), -1) * soft)

    return Tensor._from_op(out_data, (a,), backward)


def segment_max(a: Tensor, starts, num_segments: int) -> Tensor:
    """Per-column max over contiguous row segments of a 2-D tensor.

    ``starts`` gives the first row of each segment; segments must tile the
    rows in order and be non-empty. Gradients route to the first row
    attaining the max within each segment.
    """
    if a.data.ndim != 2:
        raise ShapeError("segment_max requires a 2-D tensor")
    starts = np.asarray(starts, dtype=np.intp)
    if starts.shape != (num_segments,) or (num_segments and starts[0] != 0):
        raise ShapeError("segment_max: invalid segment starts")
    bounds = np.append(starts, a.data.shape[0])
    if np.any(np.diff(bounds) < 1):
        raise ShapeError("segment_max: empty segment")
    out_data = np.maximum.reduceat(a.data, starts, axis=0)

    def backward(g):
        ga = np.zeros_like(a.data)
        cols = np.arange(a.data.shape[1])
        for s in range(num_segments):
            lo, hi = bounds[s], bounds[s + 1]
            arg = np.argmax(a.data[lo:hi], axis=0)
            ga[lo + arg, cols] += g[s]
        a._accum(ga)

    return Tensor._from_op(out_data, (a,), backward)


def normalize_rows(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm.

    Rows whose norm falls below ``floor`` are divided by ``floor`` instead,
    so dead rows stay finite (and near zero).
    """
    if a.data.ndim != 2:
        raise ShapeError("normalize_rows requires a 2-D tensor")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    denom = np.maximum(norms, floor)
    out_data = a.data / denom
    floored = (norms < floor).ravel()

    def backward(g):
        dot = np.sum(g * out_data, axis=1, keepdims=True)
        ga = (g - out_data * dot) / denom
        if floored.any():
            ga[floored] = g[floored] / floor
        a._accum(ga)

    return Tensor._from_op(out_data, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    d = x.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = np.sum(g * xhat, axis=-1, keepdims=True) / d
        a._accum(inv * (g - gm - xhat * gx))

    return Tensor._from_op(xhat, (a,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list.

    Holds per-parameter first/second moment accumulators and the step
    count; ``step()`` applies the bias-corrected update, clears gradients,
    and increments the count.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise StateError("optimizer given a tensor without requires_grad")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError("optimizer step with an unpopulated gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def grad_check(fn, point: Tensor, step: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar function to central differences.

    Parameters
    ----------
    fn : callable
        Maps a Tensor to a scalar Tensor; differentiable at ``point``.
    point : Tensor
        Evaluation point; a fresh grad-requiring copy is used internally.
    step : float
        Central-difference step, in (0, 1e-3].

    Returns
    -------
    float
        ``max_i |analytic_i - fd_i| / max(1, |analytic_i|)``.
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError("step must lie in (0, 1e-3]")
    x = Tensor(point.data, requires_grad=True)
    y = fn(x)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("grad_check: non-finite function value")
    y.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        f_plus = fn(constant(bumped.reshape(x.data.shape))).item()
        bumped[i] -= 2.0 * step
        f_minus = fn(constant(bumped.reshape(x.data.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("grad_check: non-finite function value")
        fd = (f_plus - f_minus) / (2.0 * step)
        a = analytic.ravel()[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
