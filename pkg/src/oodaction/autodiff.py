"""Dense float64 matrix engine with tape-based reverse-mode autodiff.

Tensors wrap numpy arrays (0-d scalars, vectors, matrices). While a Tape
is active, every operation whose inputs are tracked appends a replayable
entry; ``backward`` walks the tape in reverse and returns a gradient map.
Without an active tape, operations are plain numpy and tensors stay
untracked, which is what inference and finite-difference probes use.

Every forward result is checked for NaN/Inf; a non-finite value raises
immediately, naming the operation that produced it.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractError,
    DegenerateVectorError,
    DomainError,
    NonFiniteError,
    ShapeError,
)

COSINE_NORM_FLOOR = 1e-12

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations.

    Execution order is a topological order of the computation, so reverse
    replay yields gradients for every tracked tensor. Replaying twice over
    the same tape produces bit-identical gradients.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple, object, str]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array plus gradient-tracking metadata."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor-create", "tensor created from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, op_name: str, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result, check finiteness, and record it if tracking."""
    if not np.isfinite(data).all():
        raise NonFiniteError(op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._entries.append((out, inputs, backward_fn, op_name))
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-replay the tape of a scalar loss.

    Returns a map from ``id(tensor)`` to gradient array for every tracked
    tensor on the tape; gradients of tensors with ``requires_grad`` set at
    creation (parameters) are also stored on their ``.grad`` attribute.
    """
    if loss.data.size != 1:
        raise ContractError("backward() requires a scalar loss tensor")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn, _name in reversed(tape._entries):
        g_out = grads.get(id(out))
        if g_out is None:
            continue
        for inp, g in zip(inputs, backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            slot = grads.get(id(inp))
            if slot is None:
                grads[id(inp)] = g.astype(np.float64, copy=True)
            else:
                slot += g
    for out, inputs, _fn, _name in tape._entries:
        for t in inputs + (out,):
            if t.requires_grad and t._tape is None:
                t.grad = grads.get(id(t))
    return grads


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, "matmul", (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose needs a 2-D tensor")

    def bwd(g):
        return (g.T,)

    return _emit(a.data.T.copy(), "transpose", (a,), bwd)


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        def bwd(g):
            return (g,)
        return _emit(a.data + float(b), "add", (a,), bwd)
    b = as_tensor(b)
    if a.shape == b.shape:
        def bwd(g):
            return g, g
        return _emit(a.data + b.data, "add", (a, b), bwd)
    # row-wise affine: (m, n) + (n,)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bwd(g):
            return g, g.sum(axis=0)
        return _emit(a.data + b.data, "add", (a, b), bwd)
    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _emit(-a.data, "neg", (a,), bwd)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def bwd(g):
            return (g * c,)

        return _emit(a.data * c, "mul", (a,), bwd)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _emit(ad * bd, "mul", (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div shapes differ: {a.shape} / {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return _emit(out, "div", (a, b), bwd)


def total(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum()), "sum", (a,), bwd)


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit(np.asarray(a.data.mean()), "mean", (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return _extremum(a, b, smaller=True)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return _extremum(a, b, smaller=False)


def _extremum(a: Tensor, b: Tensor, smaller: bool) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"min/max shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.minimum(ad, bd) if smaller else np.maximum(ad, bd)
    take_a = (ad < bd) if smaller else (ad > bd)
    tie = ad == bd
    # ties split the gradient evenly between both operands
    wa = take_a.astype(np.float64) + 0.5 * tie
    wb = 1.0 - wa

    def bwd(g):
        return g * wa, g * wb

    return _emit(out, "min" if smaller else "max", (a, b), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_rows needs a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return _emit(a.data[idx].copy(), "gather_rows", (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("slice_cols needs a 2-D tensor")
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        buf[:, start:stop] = g
        return (buf,)

    return _emit(a.data[:, start:stop].copy(), "slice_cols", (a,), bwd)


def concat_rows(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if any(t.ndim != 2 for t in tensors):
        raise ShapeError("concat_rows needs 2-D tensors")
    sizes = [t.shape[0] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.vsplit(g, splits))

    return _emit(np.concatenate([t.data for t in tensors], axis=0),
                 "concat_rows", tuple(tensors), bwd)


def concat_cols(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if any(t.ndim != 2 for t in tensors):
        raise ShapeError("concat_cols needs 2-D tensors")
    sizes = [t.shape[1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.hsplit(g, splits))

    return _emit(np.concatenate([t.data for t in tensors], axis=1),
                 "concat_cols", tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return _emit(np.maximum(a.data, 0.0), "relu", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    y = out

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _emit(out, "sigmoid", (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * sig,)

    return _emit(out, "softplus", (a,), bwd)


def smooth_l1(a: Tensor) -> Tensor:
    """Huber-style smooth L1 with transition point 1."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < 1.0
    out = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    slope = np.where(small, x, np.sign(x))

    def bwd(g):
        return (g * slope,)

    return _emit(out, "smooth_l1", (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("softmax_rows needs a 2-D tensor")
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, "softmax_rows", (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row mean/variance normalization, eps inside the sqrt, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if a.ndim != 2:
        raise ShapeError("layer_norm needs a 2-D tensor")
    d = a.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias width must match the row width")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gd = gain.data

    def bwd(g):
        h = g * gd
        dx = (h - h.mean(axis=1, keepdims=True)
              - xhat * (h * xhat).mean(axis=1, keepdims=True)) * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(xhat * gd + bias.data, "layer_norm", (a, gain, bias), bwd)


def l2_normalize_rows(a: Tensor, floor: float = COSINE_NORM_FLOOR) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("l2_normalize_rows needs a 2-D tensor")
    x = a.data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if (norms < floor).any():
        raise DegenerateVectorError("cannot L2-normalize a (near-)zero row")
    y = x / norms

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _emit(y, "l2_normalize_rows", (a,), bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError("cosine_similarity needs two vectors of equal length")
    ud, vd = u.data, v.data
    nu = float(np.sqrt(ud @ ud))
    nv = float(np.sqrt(vd @ vd))
    if nu < COSINE_NORM_FLOOR or nv < COSINE_NORM_FLOOR:
        raise DegenerateVectorError("cosine similarity of a (near-)zero vector")
    c = float(ud @ vd) / (nu * nv)

    def bwd(g):
        return g * (vd / (nu * nv) - c * ud / (nu * nu)), \
               g * (ud / (nu * nv) - c * vd / (nv * nv))

    return _emit(np.asarray(c), "cosine_similarity", (u, v), bwd)


# ---------------------------------------------------------------------------
# digamma / trigamma
#
# Recurrence shift to x >= 6, then the 8-term asymptotic expansion in 1/x^2.
# Coefficients are B_{2n}/(2n) for digamma and B_{2n} for trigamma.

_DIGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)

_TRIGAMMA_COEFFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)


def digamma_value(x) -> np.ndarray:
    """Digamma of a positive array, accurate to ~1e-12 for x >= 1."""
    x = np.asarray(x, dtype=np.float64).copy()
    if (x <= 0).any():
        raise DomainError("digamma requires x > 0")
    acc = np.zeros_like(x)
    while True:
        small = x < 6.0
        if not small.any():
            break
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
    w = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_DIGAMMA_COEFFS):
        series = w * (c + series)
    return acc + np.log(x) - 0.5 / x - series


def trigamma_value(x) -> np.ndarray:
    """Trigamma (digamma derivative) of a positive array."""
    x = np.asarray(x, dtype=np.float64).copy()
    if (x <= 0).any():
        raise DomainError("trigamma requires x > 0")
    acc = np.zeros_like(x)
    while True:
        small = x < 6.0
        if not small.any():
            break
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
    w = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_TRIGAMMA_COEFFS):
        series = w * (c + series)
    return acc + 1.0 / x + 0.5 * w + series / x


def digamma(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = digamma_value(a.data)
    deriv = trigamma_value(a.data)

    def bwd(g):
        return (g * deriv,)

    return _emit(out, "digamma", (a,), bwd)
