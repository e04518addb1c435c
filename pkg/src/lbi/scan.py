"""Suffix products of transposed interface Jacobians.

Given J_0..J_{K-1} (each r x r, optionally with a leading batch axis),
compute P_k = J_k^T J_{k+1}^T ... J_{K-1}^T for k = 0..K, with P_K = I.
Interface adjoints then follow as m_bar_k = P_k m_bar_K.

The parallel scan uses one fixed combination tree (recursive doubling
over blocks, Sklansky shape). Combines on the same level touch disjoint
output slots and may run on any executor; the tree never depends on the
number of workers, so results are reproducible bit for bit.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import DimensionError, matmul


@dataclass
class ScanStats:
    combines: int = 0
    depth: int = 0


def _check(J: Sequence[np.ndarray], r: int | None):
    J = [np.asarray(j) for j in J]
    if not J:
        if r is None:
            raise DimensionError("empty Jacobian list needs an explicit r")
        return J, (), r, np.float64
    shape = J[0].shape
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise DimensionError(f"Jacobians must be square, got {shape}")
    for j in J:
        if j.shape != shape:
            raise DimensionError(f"ragged Jacobian shapes: {shape} vs {j.shape}")
    return J, shape[:-2], shape[-1], J[0].dtype


def _identity(batch, r, dtype):
    return np.ascontiguousarray(np.broadcast_to(np.eye(r, dtype=dtype), batch + (r, r)))


def _t(a):
    return np.ascontiguousarray(np.swapaxes(a, -1, -2))


def suffix_scan_sequential(J: Sequence[np.ndarray], r: int | None = None,
                           stats: ScanStats | None = None) -> list[np.ndarray]:
    """Right fold P_k = J_k^T P_{k+1}; the reference for the parallel scan."""
    J, batch, r, dtype = _check(J, r)
    K = len(J)
    P = [None] * (K + 1)
    P[K] = _identity(batch, r, dtype)
    if K:
        P[K - 1] = _t(J[K - 1])
    for k in range(K - 2, -1, -1):
        P[k] = matmul(_t(J[k]), P[k + 1])
    if stats is not None:
        stats.combines += max(K - 1, 0)
        stats.depth = max(K - 1, 0)
    return P


def scan_levels(K: int) -> list[list[tuple[int, int]]]:
    """Combine schedule in reversed index space.

    With Q_j covering elements K-1-j .. K-1, each level lists pairs
    (j, mid) meaning Q_j <- Q_j @ Q_mid. There are ceil(log2 K) levels.
    """
    levels = []
    s = 1
    while s < K:
        lvl = []
        for b0 in range(0, K, 2 * s):
            mid = b0 + s - 1
            for j in range(b0 + s, min(b0 + 2 * s, K)):
                lvl.append((j, mid))
        levels.append(lvl)
        s *= 2
    return levels


def suffix_scan_parallel(J: Sequence[np.ndarray], r: int | None = None,
                         executor=None, stats: ScanStats | None = None) -> list[np.ndarray]:
    """Tree scan with a fixed combination order.

    ``executor`` is anything with a ``map(fn, iterable)`` method (for
    example a ``ThreadPoolExecutor``); ``None`` runs serially.
    """
    J, batch, r, dtype = _check(J, r)
    K = len(J)
    mapper: Callable = map if executor is None else executor.map
    # Q[j] holds the running product for suffix index K-1-j
    Q = [_t(J[K - 1 - j]) for j in range(K)]
    levels = scan_levels(K)
    for lvl in levels:
        results = list(mapper(lambda pair: matmul(Q[pair[0]], Q[pair[1]]), lvl))
        for (j, _), val in zip(lvl, results):
            Q[j] = val
    if stats is not None:
        stats.combines += sum(len(l) for l in levels)
        stats.depth = len(levels)
    P = [Q[K - 1 - k] for k in range(K)]
    P.append(_identity(batch, r, dtype))
    return P


def suffix_scan(J: Sequence[np.ndarray], r: int | None = None, threshold: int = 4,
                executor=None, stats: ScanStats | None = None) -> list[np.ndarray]:
    """Sequential fold below ``threshold`` regions, tree scan otherwise."""
    if len(J) < threshold:
        return suffix_scan_sequential(J, r, stats)
    return suffix_scan_parallel(J, r, executor, stats)


def apply_adjoints(P: Sequence[np.ndarray], m_bar_K: np.ndarray) -> list[np.ndarray]:
    """m_bar_k = P_k m_bar_K for every k."""
    m = np.asarray(m_bar_K)
    out = []
    for p in P:
        if p.shape[:-2] != m.shape[:-1] or p.shape[-1] != m.shape[-1]:
            raise DimensionError(f"suffix product {p.shape} does not match adjoint {m.shape}")
        out.append(matmul(p, np.ascontiguousarray(m[..., None]))[..., 0])
    return out


# ---------------------------------------------------------------------------
# trace files

_TRACE_MAGIC = b"LBITRACE"
_TRACE_VERSION = 1


def write_trace(path, J: Sequence[np.ndarray], P: Sequence[np.ndarray]) -> None:
    """Binary dump: magic, version, K, batch-rank, batch dims, r, then f64 J and P."""
    J, batch, r, _ = _check(J, None if J else np.asarray(P[0]).shape[-1])
    K = len(J)
    with open(path, "wb") as fh:
        fh.write(_TRACE_MAGIC)
        fh.write(struct.pack("<IIII", _TRACE_VERSION, K, r, len(batch)))
        fh.write(struct.pack("<" + "I" * len(batch), *batch))
        for a in list(J) + list(P):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_trace(path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _TRACE_MAGIC:
        raise ValueError("not a scan trace file")
    version, K, r, nb = struct.unpack("<IIII", blob[8:24])
    if version != _TRACE_VERSION:
        raise ValueError(f"unsupported trace version {version}")
    batch = struct.unpack("<" + "I" * nb, blob[24:24 + 4 * nb])
    off = 24 + 4 * nb
    shape = tuple(batch) + (r, r)
    size = int(np.prod(shape)) * 8
    mats = []
    for _ in range(2 * K + 1):
        mats.append(np.frombuffer(blob[off:off + size], dtype="<f8").reshape(shape).copy())
        off += size
    return mats[:K], mats[K:]
