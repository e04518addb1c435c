"""Dense float kernels with a pinned reduction order.

Every sum in this module accumulates strictly left to right, one element
at a time, in the dtype of its inputs. That makes each output element a
function of its own row only, so a row produces the same bits no matter
how many other rows share the call. The Jacobian chunking and the
schedule/worker equivalence checks rely on that property; BLAS does not
provide it.

Arrays are plain ``numpy.ndarray`` (row-major, float64 by default,
float32 when a model is built in 32-bit mode).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit


class DimensionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# numba kernels


@njit(nogil=True, cache=True)
def _bmm(a, b, out):
    # out[g] = a[g] @ b[g or 0]; four products per pass, same order as a
    # naive t-loop so results match the scalar triple loop bit for bit.
    G, m, k = a.shape
    Gb = b.shape[0]
    n = b.shape[2]
    k4 = k - k % 4
    for g in range(G):
        bb = b[g if Gb > 1 else 0]
        for i in range(m):
            orow = out[g, i]
            arow = a[g, i]
            for j in range(n):
                orow[j] = 0.0
            for t in range(0, k4, 4):
                a0 = arow[t]
                a1 = arow[t + 1]
                a2 = arow[t + 2]
                a3 = arow[t + 3]
                b0 = bb[t]
                b1 = bb[t + 1]
                b2 = bb[t + 2]
                b3 = bb[t + 3]
                for j in range(n):
                    s = orow[j]
                    s += a0 * b0[j]
                    s += a1 * b1[j]
                    s += a2 * b2[j]
                    s += a3 * b3[j]
                    orow[j] = s
            for t in range(k4, k):
                av = arow[t]
                bt = bb[t]
                for j in range(n):
                    orow[j] += av * bt[j]


@njit(nogil=True, cache=True)
def _sum_mid(x, out):
    # x: (outer, n, inner) -> out: (outer, inner), summed over n in order
    O, n, I = x.shape
    for o in range(O):
        orow = out[o]
        for i in range(I):
            orow[i] = 0.0
        for t in range(n):
            xr = x[o, t]
            for i in range(I):
                orow[i] += xr[i]


@njit(nogil=True, cache=True)
def _sum_last(x, out):
    # x: (outer, n) -> out: (outer,)
    O, n = x.shape
    for o in range(O):
        s = 0.0
        for t in range(n):
            s += x[o, t]
        out[o] = s


@njit(nogil=True, cache=True)
def _linrec_fwd(a, b, h):
    # h[:, t] = a[:, t] * h[:, t-1] + b[:, t]; arrays (outer, L, inner)
    O, L, I = a.shape
    for o in range(O):
        for i in range(I):
            h[o, 0, i] = b[o, 0, i]
        for t in range(1, L):
            for i in range(I):
                h[o, t, i] = a[o, t, i] * h[o, t - 1, i] + b[o, t, i]


@njit(nogil=True, cache=True)
def _linrec_bwd(a, g, gh):
    # reverse sweep: gh[:, t] = g[:, t] + a[:, t+1] * gh[:, t+1]
    O, L, I = g.shape
    Oa = a.shape[0]
    for o in range(O):
        oa = o % Oa
        for i in range(I):
            gh[o, L - 1, i] = g[o, L - 1, i]
        for t in range(L - 2, -1, -1):
            for i in range(I):
                gh[o, t, i] = g[o, t, i] + a[oa, t + 1, i] * gh[o, t + 1, i]


# ---------------------------------------------------------------------------
# reductions


def sum_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum over one axis, left to right."""
    x = np.asarray(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    outer = int(np.prod(x.shape[:axis], dtype=np.int64))
    inner = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
    out_shape = x.shape[:axis] + x.shape[axis + 1:]
    xc = np.ascontiguousarray(x)
    if inner == 1:
        out = np.empty(outer, dtype=x.dtype)
        _sum_last(xc.reshape(outer, n), out)
    else:
        out = np.empty((outer, inner), dtype=x.dtype)
        _sum_mid(xc.reshape(outer, n, inner), out)
    return out.reshape(out_shape)


def sum_leading(x: np.ndarray, nlead: int) -> np.ndarray:
    """Collapse the first ``nlead`` axes by an ordered sum."""
    if nlead == 0:
        return x
    flat = np.ascontiguousarray(x).reshape((-1,) + x.shape[nlead:])
    return sum_axis(flat, 0)


def sum_all(x: np.ndarray) -> np.ndarray:
    return sum_axis(np.ascontiguousarray(x).reshape(-1), 0)


# ---------------------------------------------------------------------------
# public kernels


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right inner sum.

    ``a`` may carry leading batch axes. ``b`` is either a single (k, n)
    matrix shared by the whole batch or has the same leading axes as ``a``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if b.ndim == 2:
        lead = a.shape[:-1]
        a3 = np.ascontiguousarray(a, dtype=dtype).reshape(1, -1, k)
        b3 = np.ascontiguousarray(b, dtype=dtype).reshape(1, k, n)
        out = np.empty((1, a3.shape[1], n), dtype=dtype)
        _bmm(a3, b3, out)
        return out.reshape(lead + (n,))
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch axes differ: {a.shape} @ {b.shape}")
    lead = a.shape[:-2]
    a3 = np.ascontiguousarray(a, dtype=dtype).reshape(-1, m, k)
    b3 = np.ascontiguousarray(b, dtype=dtype).reshape(-1, k, n)
    out = np.empty((a3.shape[0], m, n), dtype=dtype)
    _bmm(a3, b3, out)
    return out.reshape(lead + (m, n))


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean, unit variance. No affine."""
    return layer_norm_parts(x, eps)[0]


def layer_norm_parts(x: np.ndarray, eps: float):
    d = x.shape[-1]
    mean = sum_axis(x, -1) / d
    xc = x - mean[..., None]
    var = sum_axis(xc * xc, -1) / d
    inv = 1.0 / np.sqrt(var + eps)
    inv = inv.astype(x.dtype, copy=False)
    return xc * inv[..., None], inv


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Average over the second-to-last (sequence) axis."""
    if x.ndim < 2:
        raise DimensionError(f"mean_pool needs (..., L, D), got {x.shape}")
    if x.shape[-2] == 0:
        raise EmptyInputError("mean_pool over an empty sequence")
    return sum_axis(x, -2) / x.shape[-2]


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _same_or_scalar(a, b):
    a_s, b_s = np.ndim(a) == 0, np.ndim(b) == 0
    if not (a_s or b_s) and np.shape(a) != np.shape(b):
        raise DimensionError(f"only same-shape or scalar operands: {np.shape(a)} vs {np.shape(b)}")


def elementwise(op: str, *args):
    """Apply one of ``add``, ``mul``, ``silu``, ``gelu``, ``scale``.

    Binary ops accept same-shape operands or a scalar with a tensor.
    ``scale(x, c)`` multiplies by a python scalar.
    """
    if op == "add":
        a, b = args
        _same_or_scalar(a, b)
        return np.add(a, b)
    if op == "mul":
        a, b = args
        _same_or_scalar(a, b)
        return np.multiply(a, b)
    if op == "scale":
        x, c = args
        if np.ndim(c) != 0:
            raise DimensionError("scale factor must be a scalar")
        return x * np.asarray(c, dtype=x.dtype)
    if op == "silu":
        (x,) = args
        return silu(np.asarray(x, dtype=float) if np.ndim(x) == 0 else x)
    if op == "gelu":
        (x,) = args
        return gelu(np.asarray(x, dtype=float) if np.ndim(x) == 0 else x)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax_rows(x: np.ndarray, causal: bool = False) -> np.ndarray:
    """Row softmax over the last axis, max-subtracted.

    With ``causal=True`` the last two axes are treated as (query, key) and
    keys after the query position get zero weight.
    """
    if causal:
        L, M = x.shape[-2:]
        mask = np.triu(np.ones((L, M), dtype=bool), k=1)
        x = np.where(mask, -np.inf, x)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / sum_axis(e, -1)[..., None]


def linear_recurrence(a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    """h[t] = a[t] * h[t-1] + b[t] along ``axis``, with h[-1] = 0."""
    if a.shape != b.shape:
        raise DimensionError(f"recurrence operands differ: {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    O = int(np.prod(a.shape[:axis], dtype=np.int64))
    L = a.shape[axis]
    inner = int(np.prod(a.shape[axis + 1:], dtype=np.int64))
    h = np.empty((O, L, inner), dtype=np.result_type(a, b))
    _linrec_fwd(np.ascontiguousarray(a).reshape(O, L, inner),
                np.ascontiguousarray(b).reshape(O, L, inner), h)
    return h.reshape(a.shape)


def linear_recurrence_grad(a: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint sweep of :func:`linear_recurrence` with respect to ``b``.

    ``g`` may carry extra leading axes relative to ``a``.
    """
    extra = g.ndim - a.ndim
    ax = axis % a.ndim
    Oa = int(np.prod(a.shape[:ax], dtype=np.int64))
    L = a.shape[ax]
    inner = int(np.prod(a.shape[ax + 1:], dtype=np.int64))
    O = int(np.prod(g.shape[:extra + ax], dtype=np.int64))
    out = np.empty((O, L, inner), dtype=g.dtype)
    _linrec_bwd(np.ascontiguousarray(a).reshape(Oa, L, inner),
                np.ascontiguousarray(g).reshape(O, L, inner), out)
    return out.reshape(g.shape)


# ---------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RngState:
    """Counter-based random stream (Philox 4x64).

    The same (seed, counter) pair yields the same numbers on every
    platform numpy supports.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        # (seed, counter) fill the two key words, so neighbouring counters
        # give unrelated streams rather than shifted copies of one stream.
        mask = 0xFFFFFFFFFFFFFFFF
        key = ((self.counter & mask) << 64) | (self.seed & mask)
        return np.random.Generator(np.random.Philox(key=key))

    def advance(self, n: int = 1) -> "RngState":
        return RngState(self.seed, self.counter + n)
