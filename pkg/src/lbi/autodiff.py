"""Tape-based reverse-mode differentiation over the kernels in :mod:`lbi.tensor`.

A :class:`Tape` is an append-only list of nodes. Leaves hold input or
parameter values; every other node records an op name, the ids of its
inputs, static attributes, its output value and whatever the backward
rule needs. Node ids are list positions, so inputs always precede their
consumers.

Backward rules accept a cotangent that carries extra *leading* axes on
top of the node's shape. Seeding the output with a stack of ``c`` basis
cotangents therefore returns ``c`` vector-Jacobian products from one
reverse sweep; this is how interface Jacobians are materialized.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError


class RecordingError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class ArgumentError(ValueError):
    pass


class Node:
    __slots__ = ("op", "inputs", "attrs", "value", "saved", "name")

    def __init__(self, op, inputs, attrs, value, saved=None, name=None):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.saved = saved
        self.name = name


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise RecordingError(f"numpy ufunc {ufunc.__name__} applied to a recorded value")

    def __array__(self, *args, **kwargs):
        raise RecordingError("recorded value converted to a raw array inside a recorded program")

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={self.shape})"


class Tape:
    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.asarray(value)
        self.nodes.append(Node("leaf", (), {}, value, None, name))
        return Var(self, len(self.nodes) - 1)

    def apply(self, op: str, inputs: Sequence, **attrs) -> Var:
        if op not in _OPS:
            raise RecordingError(f"unsupported op {op!r}")
        ids = []
        for v in inputs:
            if isinstance(v, Var):
                if v.tape is not self:
                    raise RecordingError("operand recorded on a different tape")
                ids.append(v.id)
            else:
                ids.append(self.leaf(np.asarray(v)).id)
        vals = [self.nodes[i].value for i in ids]
        fwd = _OPS[op][0]
        out, saved = fwd(vals, attrs)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output from {op}")
        self.nodes.append(Node(op, tuple(ids), attrs, out, saved))
        return Var(self, len(self.nodes) - 1)

    def params(self) -> dict[str, int]:
        return {n.name: i for i, n in enumerate(self.nodes) if n.op == "leaf" and n.name is not None}

    def signature(self) -> list[tuple]:
        """Structural fingerprint: op, inputs, attributes and leaf names per node."""
        sig = []
        for n in self.nodes:
            attrs = tuple((k, v.tobytes() if isinstance(v, np.ndarray) else v)
                          for k, v in sorted(n.attrs.items()))
            sig.append((n.op, n.inputs, attrs, n.name))
        return sig

    def replay(self) -> list[np.ndarray]:
        """Recompute every op node from the stored leaves."""
        vals: list[np.ndarray] = []
        for n in self.nodes:
            if n.op == "leaf":
                vals.append(n.value)
            else:
                out, _ = _OPS[n.op][0]([vals[i] for i in n.inputs], n.attrs)
                vals.append(out)
        return vals


# ---------------------------------------------------------------------------
# op table: name -> (forward(vals, attrs) -> (out, saved),
#                    backward(g, vals, out, saved, attrs, needs) -> grads)

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _op(name):
    def deco(pair):
        _OPS[name] = pair()
        return pair
    return deco


def _extra(g, out):
    return g.ndim - out.ndim


def _bcast(x, shape):
    return np.ascontiguousarray(np.broadcast_to(x, shape))


def _swap(x):
    return np.swapaxes(x, -1, -2)


@_op("add")
def _add():
    def fwd(v, a):
        T._same_or_scalar(v[0], v[1])
        return v[0] + v[1], None

    def bwd(g, v, out, s, a, needs):
        return g, g
    return fwd, bwd


@_op("sub")
def _sub():
    def fwd(v, a):
        T._same_or_scalar(v[0], v[1])
        return v[0] - v[1], None

    def bwd(g, v, out, s, a, needs):
        return g, (-g if needs[1] else None)
    return fwd, bwd


@_op("mul")
def _mul():
    def fwd(v, a):
        T._same_or_scalar(v[0], v[1])
        return v[0] * v[1], None

    def bwd(g, v, out, s, a, needs):
        return (g * v[1] if needs[0] else None), (g * v[0] if needs[1] else None)
    return fwd, bwd


@_op("scale")
def _scale():
    def fwd(v, a):
        return v[0] * v[0].dtype.type(a["c"]), None

    def bwd(g, v, out, s, a, needs):
        return (g * g.dtype.type(a["c"]),)
    return fwd, bwd


@_op("smul")
def _smul():
    # scalar variable times tensor
    def fwd(v, a):
        if v[0].ndim != 0:
            raise DimensionError("smul expects a 0-d scalar first")
        return v[0] * v[1], None

    def bwd(g, v, out, s, a, needs):
        e = _extra(g, out)
        gs = gx = None
        if needs[0]:
            prod = g * v[1]
            gs = T.sum_axis(prod.reshape(g.shape[:e] + (-1,)), -1)
        if needs[1]:
            gx = g * v[0]
        return gs, gx
    return fwd, bwd


@_op("matmul")
def _matmul():
    # x (..., k) @ W (k, n)
    def fwd(v, a):
        if v[1].ndim != 2:
            raise DimensionError("matmul right operand must be 2-d; use bmm for batches")
        return T.matmul(v[0], v[1]), None

    def bwd(g, v, out, s, a, needs):
        x, w = v
        e = _extra(g, out)
        gx = gw = None
        if needs[0]:
            gx = T.matmul(g, np.ascontiguousarray(w.T))
        if needs[1]:
            k, n = w.shape
            xt = np.ascontiguousarray(x.reshape(-1, k).T)
            if e == 0:
                gw = T.matmul(xt, g.reshape(-1, n))
            else:
                E = g.shape[:e]
                g3 = g.reshape((-1, xt.shape[1], n))
                gw = T.matmul(_bcast(xt, (g3.shape[0],) + xt.shape), g3).reshape(E + (k, n))
        return gx, gw
    return fwd, bwd


@_op("bmm")
def _bmm():
    def fwd(v, a):
        return T.matmul(v[0], v[1]), None

    def bwd(g, v, out, s, a, needs):
        x, y = v
        lead = g.shape[:_extra(g, out)]
        gx = gy = None
        if needs[0]:
            gx = T.matmul(g, _bcast(_swap(y), lead + _swap(y).shape))
        if needs[1]:
            gy = T.matmul(_bcast(_swap(x), lead + _swap(x).shape), g)
        return gx, gy
    return fwd, bwd


@_op("transpose")
def _transpose():
    def fwd(v, a):
        return np.ascontiguousarray(np.transpose(v[0], a["axes"])), None

    def bwd(g, v, out, s, a, needs):
        e = _extra(g, out)
        inv = np.argsort(a["axes"])
        perm = tuple(range(e)) + tuple(e + int(i) for i in inv)
        return (np.ascontiguousarray(np.transpose(g, perm)),)
    return fwd, bwd


@_op("reshape")
def _reshape():
    def fwd(v, a):
        return np.ascontiguousarray(v[0]).reshape(a["shape"]), None

    def bwd(g, v, out, s, a, needs):
        e = _extra(g, out)
        return (g.reshape(g.shape[:e] + v[0].shape),)
    return fwd, bwd


@_op("silu")
def _silu():
    def fwd(v, a):
        x = v[0]
        sg = T.sigmoid(x)
        d = sg * (1.0 + x * (1.0 - sg))
        return x * sg, d

    def bwd(g, v, out, d, a, needs):
        return (g * d,)
    return fwd, bwd


@_op("sigmoid")
def _sigmoid():
    def fwd(v, a):
        sg = T.sigmoid(v[0])
        return sg, sg * (1.0 - sg)

    def bwd(g, v, out, d, a, needs):
        return (g * d,)
    return fwd, bwd


@_op("gelu")
def _gelu():
    def fwd(v, a):
        x = v[0]
        c = T._GELU_C
        u = c * (x + 0.044715 * x ** 3)
        th = np.tanh(u)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3 * 0.044715 * x * x)
        return 0.5 * x * (1.0 + th), d

    def bwd(g, v, out, d, a, needs):
        return (g * d,)
    return fwd, bwd


@_op("layer_norm")
def _layer_norm():
    def fwd(v, a):
        y, inv = T.layer_norm_parts(v[0], a["eps"])
        return y, inv

    def bwd(g, v, y, inv, a, needs):
        d = y.shape[-1]
        mg = T.sum_axis(g, -1) / d
        mgy = T.sum_axis(g * y, -1) / d
        return ((g - mg[..., None] - y * mgy[..., None]) * inv[..., None],)
    return fwd, bwd


@_op("mean_pool")
def _mean_pool():
    def fwd(v, a):
        return T.mean_pool(v[0]), None

    def bwd(g, v, out, s, a, needs):
        e = _extra(g, out)
        L = v[0].shape[-2]
        return (_bcast((g / L)[..., None, :], g.shape[:e] + v[0].shape),)
    return fwd, bwd


@_op("expand")
def _expand():
    # insert a new axis at negative position ``axis`` with length ``n``
    def fwd(v, a):
        x = np.expand_dims(v[0], a["axis"])
        shape = list(x.shape)
        shape[a["axis"]] = a["n"]
        return _bcast(x, tuple(shape)), None

    def bwd(g, v, out, s, a, needs):
        return (T.sum_axis(g, a["axis"]),)
    return fwd, bwd


@_op("softmax")
def _softmax():
    def fwd(v, a):
        return T.softmax_rows(v[0], causal=a.get("causal", False)), None

    def bwd(g, v, p, s, a, needs):
        return (p * (g - T.sum_axis(g * p, -1)[..., None]),)
    return fwd, bwd


@_op("linrec")
def _linrec():
    # h[t] = a[t] h[t-1] + b[t] along negative axis ``axis``
    def fwd(v, a):
        return T.linear_recurrence(v[0], v[1], a["axis"]), None

    def bwd(g, v, h, s, a, needs):
        ax = a["axis"]
        gb = T.linear_recurrence_grad(v[0], g, ax)
        ga = None
        if needs[0]:
            hprev = np.zeros_like(h)
            src = [slice(None)] * h.ndim
            dst = [slice(None)] * h.ndim
            src[ax] = slice(0, -1)
            dst[ax] = slice(1, None)
            hprev[tuple(dst)] = h[tuple(src)]
            ga = gb * hprev
        return ga, (gb if needs[1] else None)
    return fwd, bwd


@_op("outer")
def _outer():
    # u (..., D), w (..., N) -> (..., D, N)
    def fwd(v, a):
        return v[0][..., :, None] * v[1][..., None, :], None

    def bwd(g, v, out, s, a, needs):
        u, w = v
        gu = T.sum_axis(g * w[..., None, :], -1) if needs[0] else None
        gw = T.sum_axis(g * u[..., :, None], -2) if needs[1] else None
        return gu, gw
    return fwd, bwd


@_op("contract")
def _contract():
    # h (..., D, N), c (..., N) -> (..., D)
    def fwd(v, a):
        return T.sum_axis(v[0] * v[1][..., None, :], -1), None

    def bwd(g, v, out, s, a, needs):
        h, c = v
        gh = g[..., :, None] * c[..., None, :] if needs[0] else None
        gc = T.sum_axis(g[..., :, None] * h, -2) if needs[1] else None
        return gh, gc
    return fwd, bwd


@_op("mul_bcast")
def _mul_bcast():
    # x (..., *p.shape) * p
    def fwd(v, a):
        x, p = v
        if x.shape[x.ndim - p.ndim:] != p.shape:
            raise DimensionError(f"mul_bcast trailing shape mismatch {x.shape} vs {p.shape}")
        return x * p, None

    def bwd(g, v, out, s, a, needs):
        x, p = v
        e = _extra(g, out)
        gx = g * p if needs[0] else None
        gp = None
        if needs[1]:
            prod = g * x
            E = g.shape[:e]
            nlead = x.ndim - p.ndim
            flat = prod.reshape(E + (-1,) + p.shape)
            gp = T.sum_axis(flat, e) if nlead else flat.reshape(E + p.shape)
        return gx, gp
    return fwd, bwd


@_op("embedding")
def _embedding():
    def fwd(v, a):
        return v[0][a["tokens"]], None

    def bwd(g, v, out, s, a, needs):
        table = v[0]
        e = _extra(g, out)
        tok = np.asarray(a["tokens"]).reshape(-1)
        D = table.shape[1]
        E = g.shape[:e]
        g2 = g.reshape((-1, tok.size, D))
        gt = np.zeros((g2.shape[0],) + table.shape, dtype=g.dtype)
        for i in range(g2.shape[0]):
            np.add.at(gt[i], tok, g2[i])
        return (gt.reshape(E + table.shape),)
    return fwd, bwd


@_op("cross_entropy")
def _cross_entropy():
    # mean next-token NLL; logits (..., V), targets int array (...)
    def fwd(v, a):
        logits = v[0]
        tgt = np.asarray(a["targets"]).reshape(-1)
        z = logits.reshape(-1, logits.shape[-1])
        z = z - np.max(z, axis=-1, keepdims=True)
        ez = np.exp(z)
        se = T.sum_axis(ez, -1)
        logp_t = z[np.arange(tgt.size), tgt] - np.log(se)
        loss = -T.sum_all(logp_t) / tgt.size
        p = ez / se[:, None]
        return np.asarray(loss, dtype=logits.dtype), p

    def bwd(g, v, out, p, a, needs):
        logits = v[0]
        tgt = np.asarray(a["targets"]).reshape(-1)
        d = p.copy()
        d[np.arange(tgt.size), tgt] -= 1.0
        d = (d / tgt.size).reshape(logits.shape)
        return (g.reshape(g.shape + (1,) * logits.ndim) * d,)
    return fwd, bwd


@_op("sum")
def _sum():
    def fwd(v, a):
        return T.sum_all(v[0]), None

    def bwd(g, v, out, s, a, needs):
        e = _extra(g, out)
        return (_bcast(g.reshape(g.shape + (1,) * v[0].ndim), g.shape[:e] + v[0].shape),)
    return fwd, bwd


# ---------------------------------------------------------------------------
# op constructors


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise RecordingError("no recorded operand")


def add(x, y):
    return _tape_of(x, y).apply("add", (x, y))


def sub(x, y):
    return _tape_of(x, y).apply("sub", (x, y))


def mul(x, y):
    return _tape_of(x, y).apply("mul", (x, y))


def scale(x, c: float):
    return x.tape.apply("scale", (x,), c=float(c))


def smul(s, x):
    return _tape_of(s, x).apply("smul", (s, x))


def matmul(x, w):
    t = _tape_of(x, w)
    wv = w.value if isinstance(w, Var) else np.asarray(w)
    if wv.ndim == 2:
        return t.apply("matmul", (x, w))
    return t.apply("bmm", (x, w))


def transpose(x, axes):
    return x.tape.apply("transpose", (x,), axes=tuple(axes))


def reshape(x, shape):
    return x.tape.apply("reshape", (x,), shape=tuple(shape))


def silu(x):
    return x.tape.apply("silu", (x,))


def sigmoid(x):
    return x.tape.apply("sigmoid", (x,))


def gelu(x):
    return x.tape.apply("gelu", (x,))


def layer_norm(x, eps: float = 1e-5):
    return x.tape.apply("layer_norm", (x,), eps=float(eps))


def mean_pool(x):
    return x.tape.apply("mean_pool", (x,))


def expand(x, axis: int, n: int):
    if axis >= 0:
        raise ValueError("expand takes a negative axis")
    return x.tape.apply("expand", (x,), axis=axis, n=int(n))


def softmax(x, causal: bool = False):
    return x.tape.apply("softmax", (x,), causal=causal)


def linrec(a, b, axis: int):
    return _tape_of(a, b).apply("linrec", (a, b), axis=axis)


def outer(u, w):
    return _tape_of(u, w).apply("outer", (u, w))


def contract(h, c):
    return _tape_of(h, c).apply("contract", (h, c))


def mul_bcast(x, p):
    return _tape_of(x, p).apply("mul_bcast", (x, p))


def embedding(table, tokens):
    return table.tape.apply("embedding", (table,), tokens=np.asarray(tokens))


def cross_entropy(logits, targets):
    return logits.tape.apply("cross_entropy", (logits,), targets=np.asarray(targets))


def vsum(x):
    return x.tape.apply("sum", (x,))


# ---------------------------------------------------------------------------
# recording and reverse sweeps


def record(f: Callable, inputs: Sequence[np.ndarray], names: Sequence[str | None] | None = None,
           check_finite: bool = True):
    """Run ``f`` on fresh leaves and return ``(output values, tape)``.

    ``f`` receives one :class:`Var` per input and must return a Var or a
    tuple of Vars built from the ops in this module.
    """
    tape = Tape(check_finite=check_finite)
    names = list(names) if names is not None else [None] * len(inputs)
    leaves = [tape.leaf(x, n) for x, n in zip(inputs, names)]
    out = f(*leaves)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    for o in outs:
        if not isinstance(o, Var) or o.tape is not tape:
            raise RecordingError("recorded program must return values built on its tape")
    tape.outputs = [o.id for o in outs]
    vals = [tape.nodes[i].value for i in tape.outputs]
    return (vals if isinstance(out, (tuple, list)) else vals[0]), tape


def _sweep(tape: Tape, seeds: dict[int, np.ndarray], targets: set[int],
           blocked: Iterable[int] = ()) -> dict[int, np.ndarray]:
    nodes = tape.nodes
    blocked = set(blocked)
    dep = [False] * len(nodes)
    for i, n in enumerate(nodes):
        dep[i] = i in targets or any(dep[j] for j in n.inputs)
    grads: dict[int, np.ndarray] = {}
    result: dict[int, np.ndarray] = {}
    for i, g in seeds.items():
        grads[i] = g
    for i in range(max(seeds), -1, -1):
        g = grads.pop(i, None)
        if g is None or not dep[i] or i in blocked:
            continue
        if i in targets:
            result[i] = g
        n = nodes[i]
        if n.op == "leaf":
            continue
        needs = [dep[j] and j not in blocked for j in n.inputs]
        if not any(needs):
            continue
        bwd = _OPS[n.op][1]
        vals = [nodes[j].value for j in n.inputs]
        gin = bwd(g, vals, n.value, n.saved, n.attrs, needs)
        for j, gj, need in zip(n.inputs, gin, needs):
            if not need or gj is None:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return result


def _output_id(tape: Tape, output: int | Var | None) -> int:
    if output is None:
        if not tape.outputs:
            raise ArgumentError("tape has no declared output")
        return tape.outputs[0]
    return output.id if isinstance(output, Var) else int(output)


def backward(tape: Tape, seed, output: int | Var | None = None,
             blocked: Iterable[int] = ()) -> dict[str, np.ndarray]:
    """Gradients of ``<seed, output>`` for every named leaf on the tape.

    Leaves the output does not depend on get zero arrays. Ids in
    ``blocked`` drop whatever cotangent reaches them.
    """
    oid = _output_id(tape, output)
    out_val = tape.nodes[oid].value
    seed = np.asarray(seed, dtype=out_val.dtype)
    if seed.shape != out_val.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {out_val.shape}")
    pids = tape.params()
    res = _sweep(tape, {oid: seed}, set(pids.values()), blocked)
    return {name: res.get(i, np.zeros_like(tape.nodes[i].value)) for name, i in sorted(pids.items())}


def vjp(tape: Tape, cotangent, wrt: Sequence[int | Var], output: int | Var | None = None) -> list[np.ndarray]:
    """``cotangent^T d(output)/d(wrt)`` for the selected leaves only.

    The cotangent may carry extra leading axes (a stack of cotangents);
    results carry the same leading axes. Nodes that do not lie between
    ``wrt`` and the output are skipped, so parameter gradients are never
    formed.
    """
    oid = _output_id(tape, output)
    out_val = tape.nodes[oid].value
    cot = np.asarray(cotangent, dtype=out_val.dtype)
    if cot.shape[cot.ndim - out_val.ndim:] != out_val.shape:
        raise DimensionError(f"cotangent shape {cot.shape} does not end with {out_val.shape}")
    ids = [w.id if isinstance(w, Var) else int(w) for w in wrt]
    for i in ids:
        if not 0 <= i < len(tape.nodes):
            raise ArgumentError(f"invalid wrt id {i}")
    res = _sweep(tape, {oid: cot}, set(ids))
    extra = cot.shape[:cot.ndim - out_val.ndim]
    return [res.get(i, np.zeros(extra + tape.nodes[i].value.shape, dtype=cot.dtype)) for i in ids]


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                               h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector map, shape (out, in)."""
    if h <= 0:
        raise ArgumentError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for j in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(f(xp.reshape(x.shape)), dtype=np.float64).reshape(-1)
        fm = np.asarray(f(xm.reshape(x.shape)), dtype=np.float64).reshape(-1)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# gradient comparison


@dataclass
class GradientReport:
    max_abs_error: float
    rel_l2_error: float
    cosine_similarity: float
    per_parameter_breakdown: dict[str, tuple[float, float]] = field(default_factory=dict)
    trials: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "max_abs", "rel_l2"])
            for name, (ma, rl) in self.per_parameter_breakdown.items():
                w.writerow([name, repr(ma), repr(rl)])
            w.writerow(["__total__", repr(self.max_abs_error), repr(self.rel_l2_error)])


def _rel(diff_norm, ref_norm):
    if ref_norm == 0.0:
        return 0.0 if diff_norm == 0.0 else math.inf
    return diff_norm / ref_norm


def compare_gradients(g_test: dict[str, np.ndarray], g_ref: dict[str, np.ndarray]) -> GradientReport:
    if set(g_test) != set(g_ref):
        missing = sorted(set(g_test) ^ set(g_ref))
        raise ArgumentError(f"gradient key sets differ: {missing[:5]}")
    names = sorted(g_ref)
    breakdown = {}
    for n in names:
        a = np.asarray(g_test[n], dtype=np.float64).reshape(-1)
        b = np.asarray(g_ref[n], dtype=np.float64).reshape(-1)
        d = a - b
        breakdown[n] = (float(np.max(np.abs(d))) if d.size else 0.0,
                        _rel(float(np.linalg.norm(d)), float(np.linalg.norm(b))))
    ta = np.concatenate([np.asarray(g_test[n], dtype=np.float64).reshape(-1) for n in names])
    tb = np.concatenate([np.asarray(g_ref[n], dtype=np.float64).reshape(-1) for n in names])
    d = ta - tb
    na, nb = float(np.linalg.norm(ta)), float(np.linalg.norm(tb))
    if na == 0.0 and nb == 0.0:
        cos = 1.0
    elif na == 0.0 or nb == 0.0:
        cos = 0.0
    elif not np.any(d):
        cos = 1.0                       # exact match; avoid rounding below 1
    elif not np.any(ta + tb):
        cos = -1.0
    else:
        cos = float(np.clip(np.dot(ta, tb) / (na * nb), -1.0, 1.0))
    return GradientReport(
        max_abs_error=float(np.max(np.abs(d))) if d.size else 0.0,
        rel_l2_error=_rel(float(np.linalg.norm(d)), nb),
        cosine_similarity=cos,
        per_parameter_breakdown=breakdown,
    )
