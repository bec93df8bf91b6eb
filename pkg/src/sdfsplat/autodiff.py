"""Reverse-mode automatic differentiation over numpy values.

A :class:`Tape` records operations as they execute; :meth:`Tape.backward`
replays them in reverse and accumulates adjoints.  Node values are numpy
arrays of any shape (plain Python floats become 0-d arrays), so the same
operation set serves both scalar unit tests and the vectorized rendering /
field-query code paths.

Every operation in this module accepts either :class:`Var` (tracked) or
raw numbers / ndarrays (constants).  When no argument is tracked, the
operation computes with plain numpy and returns an ndarray, so inference
code reuses the exact same arithmetic, in the same evaluation order, as
training code.

Numerical guards: ``log``/``sqrt``/``div`` have ``safe_*`` variants that
clamp their critical operand at ``EPS`` (1e-8).  The raw variants are also
exported for call sites that guarantee their own domains.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-8


class TapeError(Exception):
    """Misuse of a tape (foreign node handles, backward before forward)."""


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """A value tracked on a tape. `value` is always an ndarray."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    # arithmetic sugar; mirrors numpy semantics
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


class Adjoints:
    """Result of a backward pass: adjoint lookup per node of one tape."""

    def __init__(self, tape, table):
        self._tape = tape
        self._table = table

    def get(self, var):
        """Adjoint of `var`; zeros if the seed does not reach it."""
        if var.tape is not self._tape:
            raise TapeError("variable does not belong to the tape that was differentiated")
        g = self._table.get(var.index)
        if g is None:
            return np.zeros_like(var.value)
        return g


class Tape:
    """Append-only operation record; one tape per training iteration.

    Single-writer: construction is not thread safe.  Backward visits
    entries strictly in reverse insertion order, which is a reverse
    topological order because operands always precede their results.
    """

    def __init__(self):
        self._entries = []  # (out_index, parent_indices, backward_fn)
        self._n = 0

    def __len__(self):
        return self._n

    def _new_index(self):
        i = self._n
        self._n += 1
        return i

    def leaf(self, value, dtype=None):
        """Register an independent variable (no parents)."""
        arr = np.asarray(value, dtype=dtype)
        return Var(self, self._new_index(), arr)

    def _record(self, value, parents, backward_fn):
        out = Var(self, self._new_index(), value)
        self._entries.append((out.index, tuple(p.index for p in parents), backward_fn))
        return out

    def backward(self, seed, seed_grad=None):
        """Accumulate adjoints of every node reachable from `seed`.

        `seed_grad` defaults to ones, which for the usual scalar seed is
        d(seed)/d(seed) = 1.  Returns an :class:`Adjoints` map; leaves the
        seed does not reach report zeros.
        """
        if not isinstance(seed, Var) or seed.tape is not self:
            raise TapeError("backward seed was not produced on this tape")
        table = {}
        if seed_grad is None:
            seed_grad = np.ones_like(seed.value)
        table[seed.index] = np.asarray(seed_grad, dtype=seed.value.dtype)
        for out_idx, parent_idx, backward_fn in reversed(self._entries):
            g = table.get(out_idx)
            if g is None or backward_fn is None:
                continue
            partials = backward_fn(g)
            for pi, pg in zip(parent_idx, partials):
                if pg is None:
                    continue
                acc = table.get(pi)
                table[pi] = pg if acc is None else acc + pg
        return Adjoints(self, table)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("operands come from different tapes")
    return tape


def value_of(x):
    """Underlying ndarray of a Var, or the input as ndarray."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x)


def _binary(a, b, fwd, da, db):
    """Record a broadcasting binary op. `da`/`db` map output grad to operand grads."""
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a)
        slots.append(0)
    if isinstance(b, Var):
        parents.append(b)
        slots.append(1)

    def backward(g):
        grads = []
        for s in slots:
            if s == 0:
                grads.append(_unbroadcast(da(g, av, bv, out), av.shape))
            else:
                grads.append(_unbroadcast(db(g, av, bv, out), bv.shape))
        return grads

    return tape._record(out, parents, backward)


def _unary(a, fwd, da):
    av = value_of(a)
    out = fwd(av)
    if not isinstance(a, Var):
        return out
    return a.tape._record(out, (a,), lambda g: (da(g, av, out),))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y
    )


def safe_div(a, b):
    """a / b with |b| clamped at EPS (sign preserved)."""
    bv = value_of(b)
    guard = np.where(np.abs(bv) < EPS, np.where(bv < 0, -EPS, EPS), bv)
    if isinstance(b, Var):
        b = b.tape._record(guard, (b,), lambda g: (g * (np.abs(bv) >= EPS),))
    else:
        b = guard
    return div(a, b)


def neg(a):
    return _unary(a, lambda x: -x, lambda g, x, o: -g)


def powc(a, p):
    """a ** p for a constant exponent p."""
    return _unary(a, lambda x: x**p, lambda g, x, o: g * p * x ** (p - 1))


def square(a):
    return _unary(a, lambda x: x * x, lambda g, x, o: 2.0 * g * x)


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a):
    return _unary(a, np.log, lambda g, x, o: g / x)


def safe_log(a):
    return log(maximum(a, EPS))


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, o: 0.5 * g / o)


def safe_sqrt(a):
    return sqrt(maximum(a, EPS))


def sin(a):
    return _unary(a, np.sin, lambda g, x, o: g * np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda g, x, o: -g * np.sin(x))


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def softplus(a, beta=1.0):
    """log(1 + exp(beta*x)) / beta; exact identity for beta*x >> 1."""
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, beta * x) / beta,
        lambda g, x, o: g * _sigmoid(beta * x),
    )


def _smooth_relu_fwd(x, w):
    # exactly x above the band, exactly 0 below, quadratic blend between
    t = x + w
    np.maximum(t, 0.0, out=t)
    np.minimum(t, 2.0 * w, out=t)
    t *= t
    t *= 0.25 / w
    return np.where(x >= w, x, t)


def smooth_relu(a, half_width=0.1):
    """Smoothed ReLU (quadratic blend on |x| < half_width).

    Exactly 0 below the band and exactly the identity above it, with a
    continuous derivative; a cheap softplus-like activation that avoids
    transcendentals on the hot decoder path.
    """
    w = float(half_width)

    def backward(g, x, o):
        # np.clip is slow on some builds; min/max chain, in place
        t = (x + w) * (0.5 / w)
        np.maximum(t, 0.0, out=t)
        np.minimum(t, 1.0, out=t)
        t *= g
        return t

    return _unary(a, lambda x: _smooth_relu_fwd(x, w), backward)


def smooth_relu_slope(x, half_width=0.1):
    """Derivative of :func:`smooth_relu` as a plain array/tape expression."""
    w = float(half_width)
    return clip(mul(add(x, w), 0.5 / w), 0.0, 1.0)


def absolute(a):
    # subgradient 0 at x == 0
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x))


def maximum(a, b):
    # ties route the gradient to the first operand
    return _binary(
        a,
        b,
        np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
    )


def minimum(a, b):
    return _binary(
        a,
        b,
        np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
    )


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """Select by a constant boolean mask (the mask itself is not differentiated)."""
    cond = np.asarray(value_of(cond), dtype=bool)
    return _binary(
        a,
        b,
        lambda x, y: np.where(cond, x, y),
        lambda g, x, y, o: g * cond,
        lambda g, x, y, o: g * ~cond,
    )


def stop_gradient(a):
    """Identity in value; contributes zero partials to its parents."""
    if not isinstance(a, Var):
        return np.asarray(a)
    return a.tape._record(a.value, (), None)


# ---------------------------------------------------------------------------
# reductions and scans


def reduce_sum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not isinstance(a, Var):
        return out

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return a.tape._record(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return div(reduce_sum(a, axis=axis, keepdims=keepdims), float(n))


def cumsum(a, axis=0):
    av = value_of(a)
    out = np.cumsum(av, axis=axis)
    if not isinstance(a, Var):
        return out

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return a.tape._record(out, (a,), backward)


# ---------------------------------------------------------------------------
# indexing, shaping, concatenation


def getitem(a, key):
    """Basic slicing (constant key). Gradient scatters back into the slice."""
    av = value_of(a)
    out = av[key]
    if not isinstance(a, Var):
        return out

    def backward(g):
        buf = np.zeros_like(av)
        buf[key] = g
        return (buf,)

    return a.tape._record(out, (a,), backward)


def _scatter_rows(shape, idx, g, dtype):
    """Sum rows of g into a zero array of `shape` at positions idx (axis 0)."""
    buf = np.zeros(shape, dtype=dtype)
    n = shape[0]
    if g.ndim == 1:
        buf += np.bincount(idx, weights=g, minlength=n).astype(dtype, copy=False)
    else:
        flat = g.reshape(len(idx), -1)
        cols = [
            np.bincount(idx, weights=flat[:, c], minlength=n) for c in range(flat.shape[1])
        ]
        buf += np.stack(cols, axis=1).reshape(shape).astype(dtype, copy=False)
    return buf


def gather(a, idx):
    """Rows a[idx] along axis 0; idx is a constant integer array."""
    idx = np.asarray(value_of(idx), dtype=np.int64)
    av = value_of(a)
    out = av[idx]
    if not isinstance(a, Var):
        return out
    return a.tape._record(out, (a,), lambda g: (_scatter_rows(av.shape, idx, g, av.dtype),))


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of `a` into `num_segments` buckets along axis 0."""
    ids = np.asarray(value_of(segment_ids), dtype=np.int64)
    av = value_of(a)
    out_shape = (num_segments,) + av.shape[1:]
    if av.ndim == 1:
        out = np.bincount(ids, weights=av, minlength=num_segments).astype(av.dtype, copy=False)
    else:
        flat = av.reshape(len(ids), -1)
        cols = [
            np.bincount(ids, weights=flat[:, c], minlength=num_segments)
            for c in range(flat.shape[1])
        ]
        out = np.stack(cols, axis=1).reshape(out_shape).astype(av.dtype, copy=False)
    if not isinstance(a, Var):
        return out
    return a.tape._record(out, (a,), lambda g: (g[ids],))


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not isinstance(a, Var):
        return out
    return a.tape._record(out, (a,), lambda g: (g.reshape(av.shape),))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = [p for p in parts if isinstance(p, Var)]
    tracked = [i for i, p in enumerate(parts) if isinstance(p, Var)]

    def backward(g):
        pieces = []
        for i in tracked:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return pieces

    return tape._record(out, parents, backward)


def stack(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    parents = [p for p in parts if isinstance(p, Var)]
    tracked = [i for i, p in enumerate(parts) if isinstance(p, Var)]

    def backward(g):
        return [np.take(g, i, axis=axis) for i in tracked]

    return tape._record(out, parents, backward)


def matmul(a, b):
    """np.matmul for operands of ndim >= 2, including broadcast batch dims."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul requires ndim >= 2; reshape vectors explicitly")
    out = av @ bv

    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a)
        slots.append(0)
    if isinstance(b, Var):
        parents.append(b)
        slots.append(1)

    def backward(g):
        grads = []
        for s in slots:
            if s == 0:
                ga = g @ np.swapaxes(bv, -1, -2)
                grads.append(_unbroadcast(ga, av.shape))
            else:
                gb = np.swapaxes(av, -1, -2) @ g
                grads.append(_unbroadcast(gb, bv.shape))
        return grads

    return tape._record(out, parents, backward)


def dot_last(a, b, keepdims=False):
    """Sum of elementwise product over the last axis."""
    return reduce_sum(mul(a, b), axis=-1, keepdims=keepdims)


def norm_last(a, keepdims=False):
    return safe_sqrt(reduce_sum(square(a), axis=-1, keepdims=keepdims))


def normalize_last(a):
    """Unit vectors along the last axis, guarded at EPS length."""
    return div(a, norm_last(a, keepdims=True))


# ---------------------------------------------------------------------------
# finite differences (the gradient oracle)


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar f at parameter vector x.

    Non-finite function values propagate into the corresponding entry.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(xp.reshape(x.shape))
        fm = f(xm.reshape(x.shape))
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
