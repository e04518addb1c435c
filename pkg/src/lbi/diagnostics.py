"""Norms of interface Jacobians and of their suffix products."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .scan import suffix_scan_sequential
from .tensor import DimensionError, RngState, matmul

SPECTRA_HEADER = ["step", "seed", "region", "local_spec", "suffix_spec", "frob_rms"]


@dataclass
class NormEstimate:
    value: float
    converged: bool
    iterations: int


def _square(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def spectral_norm_estimate(M, max_iters: int = 1000, tol: float = 1e-10, seed: int = 0,
                           squarings: int = 5) -> NormEstimate:
    """Power iteration on M^T M from a fixed-seed start vector."""
    M = _square(M)
    n = M.shape[0]
    if n == 0:
        return NormEstimate(0.0, True, 0)
    MtM = matmul(np.ascontiguousarray(M.T), M)
    # iterate with a normalized power of M^T M; same dominant eigenvector,
    # but near-degenerate top singular values separate 2**squarings times faster
    step = MtM
    for _ in range(squarings):
        scale = np.max(np.abs(step))
        if scale == 0.0:
            return NormEstimate(0.0, True, 0)
        step = step / scale
        step = matmul(step, step)
    v = RngState(seed, 0).generator().standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = MtM @ v
        new = float(v @ w)           # Rayleigh quotient on M^T M, v has unit norm
        if new == 0.0 and not np.any(w):
            return NormEstimate(0.0, True, it)
        res = np.linalg.norm(w - new * v) / abs(new)
        u = step @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return NormEstimate(math.sqrt(max(new, 0.0)), True, it)
        v = u / nu
        if abs(new - lam) <= tol * abs(new) and res <= math.sqrt(tol):
            return NormEstimate(math.sqrt(max(new, 0.0)), True, it)
        lam = new
    return NormEstimate(math.sqrt(max(lam, 0.0)), False, max_iters)


def spectral_norm(M, max_iters: int = 1000, tol: float = 1e-10) -> float:
    return spectral_norm_estimate(M, max_iters, tol).value


def frobenius_rms(M) -> float:
    """RMS singular value, sqrt(sum M^2 / r)."""
    M = _square(M)
    if M.shape[0] == 0:
        return 0.0
    return math.sqrt(float(np.sum(M * M)) / M.shape[0])


def suffix_norms(J: Sequence[np.ndarray]) -> tuple[list[float], list[float]]:
    """Local norms ||J_k|| and suffix norms ||P_k|| for k = 0..K-1."""
    J = [_square(j) for j in J]
    P = suffix_scan_sequential(J, J[0].shape[0] if J else None)
    return [spectral_norm(j) for j in J], [spectral_norm(p) for p in P[:-1]]


@dataclass
class SpectraRecord:
    step: int
    seed: int
    local: list[float] = field(default_factory=list)
    suffix: list[float] = field(default_factory=list)
    frob: list[float] = field(default_factory=list)

    @classmethod
    def from_jacobians(cls, step: int, seed: int, J: Sequence[np.ndarray]) -> "SpectraRecord":
        """Uses the first batch element when the Jacobians carry a batch axis."""
        J = [np.asarray(j)[0] if np.ndim(j) == 3 else np.asarray(j) for j in J]
        local, suffix = suffix_norms(J)
        return cls(step, seed, local, suffix, [frobenius_rms(j) for j in J])

    def rows(self):
        for k in range(len(self.local)):
            yield self.step, self.seed, k, self.local[k], self.suffix[k], self.frob[k]


def emit_spectra(records: Iterable[SpectraRecord], path) -> int:
    """Write one CSV row per (step, region); returns the number of rows."""
    rows = sorted((row for rec in records for row in rec.rows()), key=lambda t: (t[0], t[2], t[1]))
    if not rows:
        raise ValueError("no spectra to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPECTRA_HEADER)
        for step, seed, k, a, b, c in rows:
            w.writerow([step, seed, k, f"{a:.17g}", f"{b:.17g}", f"{c:.17g}"])
    return len(rows)


def read_spectra(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({"step": int(row["step"]), "seed": int(row["seed"]), "region": int(row["region"]),
                        "local_spec": float(row["local_spec"]), "suffix_spec": float(row["suffix_spec"]),
                        "frob_rms": float(row["frob_rms"])})
        return out
