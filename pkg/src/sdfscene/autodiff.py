"""Reverse-mode automatic differentiation over numpy arrays.

A single Tape records operations in creation order (which is a valid
topological order); backward() replays it in exact reverse, so gradient
accumulation order is fixed and runs are bitwise reproducible. Only
first-order derivatives are supported. Training uses float32, gradient
checks float64; ops never change the dtype of their inputs.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Recording context. One training step = one tape = one backward."""

    def __init__(self):
        self.nodes: list[Value] = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Value:
    """Array node. Leaves (requires_grad=True) accumulate into .grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Value(self.data)

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

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Value(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"


def as_value(x, like=None):
    if isinstance(x, Value):
        return x
    dtype = like.dtype if isinstance(like, Value) else None
    return Value(np.asarray(x, dtype=dtype))


def _pair(a, b):
    """Coerce a binary-op operand pair; python scalars adopt the Value dtype."""
    if isinstance(a, Value):
        return a, (b if isinstance(b, Value) else Value(np.asarray(b, dtype=a.data.dtype)))
    if isinstance(b, Value):
        return Value(np.asarray(a, dtype=b.data.dtype)), b
    return Value(np.asarray(a)), Value(np.asarray(b))


def _record(out_data, parents, vjp):
    tape = _active_tape()
    out = Value(out_data)
    if tape is not None and any(
        p.requires_grad or p._tape is tape for p in parents
    ):
        out._parents = parents
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss, params=()):
    """Reverse pass from a scalar loss.

    Every reachable leaf accumulates d loss / d leaf into .grad; leaves in
    `params` that are unreachable end up with an explicit zero grad.
    """
    if not isinstance(loss, Value):
        raise TapeError("loss must be a Value")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    for p in params:
        if p.grad is None:
            p.zero_grad()
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to a tape (wrap the forward pass "
                        "in `with Tape():`)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        pgrads = node._vjp(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None:
                continue
            if p._tape is tape:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            elif p.requires_grad:
                if p.grad is None:
                    p.zero_grad()
                p.grad += _unbroadcast(pg, p.data.shape)
        # free the closure so large intermediates can be collected early
        node._parents = ()
        node._vjp = None
    # break the tape<->node cycles so the whole step graph is freed by
    # reference counting instead of waiting on a gen2 gc pass
    for node in tape.nodes:
        node._tape = None
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _record(out, (a, b), vjp)


def neg(x):
    x = as_value(x)
    return _record(-x.data, (x,), lambda g: (-g,))


def pow_const(x, p):
    x = as_value(x)
    out = x.data ** p
    xd = x.data

    def vjp(g):
        return (g * p * xd ** (p - 1),)

    return _record(out, (x,), vjp)


def exp(x):
    x = as_value(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_value(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x):
    x = as_value(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * (0.5 / out),))


def sigmoid(x):
    x = as_value(x)
    xd = x.data
    # single-exp stable form: z = e^{-|x|}, sigma = 1/(1+z) or z/(1+z)
    z = np.exp(-np.abs(xd))
    denom = 1.0 + z
    out = np.where(xd >= 0, 1.0 / denom, z / denom)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), vjp)


def tanh(x):
    x = as_value(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x):
    x = as_value(x)
    xd = x.data
    # log(1+e^x) = max(x,0) + log1p(e^{-|x|}); the exp is reused in backward
    z = np.exp(-np.abs(xd))
    out = np.maximum(xd, 0) + np.log1p(z)
    nonneg = xd >= 0

    def vjp(g):
        denom = 1.0 + z
        s = np.where(nonneg, 1.0 / denom, z / denom)
        return (g * s,)

    return _record(out, (x,), vjp)


def relu(x):
    x = as_value(x)
    xd = x.data
    return _record(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def absolute(x):
    x = as_value(x)
    xd = x.data
    return _record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def maximum(a, b):
    a, b = _pair(a, b)
    mask = a.data >= b.data  # ties route the gradient to the first input
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * mask, a.data.shape),
                _unbroadcast(g * ~mask, b.data.shape))

    return _record(out, (a, b), vjp)


def clip(x, lo, hi):
    x = as_value(x)
    xd = x.data
    out = np.clip(xd, lo, hi)
    mask = (xd >= lo) & (xd <= hi)
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra / reductions / shape

def matmul(a, b):
    a, b = as_value(a), as_value(b)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), vjp)


def vsum(x, axis=None, keepdims=False):
    x = as_value(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (x,), vjp)


def vmean(x, axis=None, keepdims=False):
    x = as_value(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return vsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def cumsum(x, axis=-1):
    x = as_value(x)
    out = np.cumsum(x.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record(out, (x,), vjp)


def reshape(x, shape):
    x = as_value(x)
    orig = x.data.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def concat(values, axis=-1):
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(values), vjp)


def stack(values, axis=-1):
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(values)))

    return _record(out, tuple(values), vjp)


def take(x, idx):
    """Basic and integer-array indexing; backward scatter-adds."""
    x = as_value(x)
    out = x.data[idx]
    shape, dtype = x.data.shape, x.data.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), vjp)


def take_unique(x, idx):
    """take() for indices known to be distinct: backward is a direct
    scatter-assign, which is much faster than np.add.at. Duplicate indices
    would silently drop gradient, so callers must guarantee uniqueness."""
    x = as_value(x)
    out = x.data[idx]
    shape, dtype = x.data.shape, x.data.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), vjp)


def slice1d(x, start, stop):
    """Contiguous slice of a flat Value; backward writes the slice back."""
    x = as_value(x)
    n = x.data.shape[0]
    dtype = x.data.dtype

    def vjp(g):
        gx = np.zeros(n, dtype=dtype)
        gx[start:stop] = g
        return (gx,)

    return _record(x.data[start:stop], (x,), vjp)


def gather_interp(table, idx, weights):
    """Weighted gather: out[p, f] = sum_c weights[p, c] * table[idx[p, c], f].

    The hot op of the hash-grid encoder. `idx` (P, C) int and `weights`
    (P, C) are plain arrays; only `table` (T, F) is differentiable.
    Backward uses bincount per feature channel, which is far faster than
    np.add.at for large P.
    """
    table = as_value(table)
    td = table.data
    out = np.einsum("pcf,pc->pf", td[idx], weights, optimize=True)
    T, F = td.shape
    flat_idx = idx.ravel()

    def vjp(g):
        gt = np.empty_like(td)
        for f in range(F):
            contrib = (g[:, f, None] * weights).ravel()
            gt[:, f] = np.bincount(flat_idx, weights=contrib, minlength=T)
        return (gt.astype(td.dtype, copy=False),)

    return _record(out, (table,), vjp)


def scatter_rows(base, idx, rows):
    """out = base.copy(); out[idx] = rows. `base` is a constant array."""
    rows = as_value(rows)
    out = np.array(base, dtype=rows.data.dtype, copy=True)
    out[idx] = rows.data

    def vjp(g):
        return (g[idx],)

    return _record(out, (rows,), vjp)


def softmax(x, axis=-1):
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# custom-gradient mechanisms

def straight_through(hard, soft):
    """Forward takes the `hard` array; gradients flow as if it were `soft`."""
    soft = as_value(soft)
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.data.shape:
        raise ValueError(
            f"shape mismatch: hard {hard.shape} vs soft {soft.data.shape}")
    return soft + Value(hard - soft.data)


def inject_gradient(output, residual):
    """Pseudo-loss whose backward adds residual^T * d(output)/d(params).

    The forward value is sum(residual * output) and carries no meaning;
    only the gradient matters.
    """
    output = as_value(output)
    residual = np.asarray(residual, dtype=output.data.dtype)
    if residual.shape != output.data.shape:
        raise ValueError(
            f"shape mismatch: residual {residual.shape} vs output {output.data.shape}")
    return (Value(residual) * output).sum()


# ---------------------------------------------------------------------------
# finite-difference verification

def _scalar(v):
    return float(v.data) if isinstance(v, Value) else float(v)


def fd_gradient(f, param, h=1e-5, indices=None):
    """Central finite differences of scalar f() w.r.t. entries of `param`.

    With indices=None returns an array shaped like param.data holding the
    full finite-difference gradient. With an explicit index list (flat
    indices) returns (indices, grads) for just those entries. Perturbed
    entries are restored exactly.
    """
    flat = param.data.reshape(-1)
    full = indices is None
    if full:
        indices = range(flat.size)
    idx_list, grads = [], []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f())
        flat[i] = orig - h
        fm = _scalar(f())
        flat[i] = orig
        idx_list.append(i)
        grads.append((fp - fm) / (2.0 * h))
    if full:
        return np.asarray(grads).reshape(param.data.shape)
    return np.asarray(idx_list), np.asarray(grads)


def fd_directional(f, params, directions, h=1e-5):
    """Central finite difference of scalar f() along a parameter direction."""
    for p, d in zip(params, directions):
        p.data += h * d
    fp = _scalar(f())
    for p, d in zip(params, directions):
        p.data -= 2.0 * h * d
    fm = _scalar(f())
    for p, d in zip(params, directions):
        p.data += h * d
    return (fp - fm) / (2.0 * h)
