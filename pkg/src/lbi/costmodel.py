"""Leading-order work, span and arithmetic-intensity model.

All Theta constants are 1. Memory counts are in elements; they become
bytes only where compared against a roofline (intensity) or when sizing
a payload.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

ROOFLINE_OPS_PER_BYTE = 295.0
DTYPE_BYTES = {"bf16": 2, "fp16": 2, "f16": 2, "f32": 4, "fp32": 4, "f64": 8, "fp64": 8}


def dtype_bytes(name: str) -> int:
    try:
        return DTYPE_BYTES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown dtype {name!r}") from None


@dataclass(frozen=True)
class RegionCostSpec:
    B: int
    L: int
    D: int
    N: int = 16
    H: int = 12
    X: int = 3072
    kind: str = "ssm"   # ssm | transformer

    def __post_init__(self):
        if self.kind not in ("ssm", "transformer"):
            raise ValueError(f"kind must be ssm or transformer, got {self.kind!r}")
        for f in ("B", "L", "D", "H", "X"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.N < 0:
            raise ValueError("N must be non-negative")


# reference shapes used in the worked examples and tests
SSM_REF = RegionCostSpec(B=8, L=2048, D=768, N=16, kind="ssm")
TRANSFORMER_REF = RegionCostSpec(B=8, L=2048, D=768, H=12, X=3072, kind="transformer")
TOY_SPEC = RegionCostSpec(B=2, L=128, D=64, N=4, H=4, X=128, kind="transformer")


@dataclass
class TransportRow:
    regime: str
    flops: float
    span: float
    operator: str
    intensity: float
    materializes_jacobian: bool


def forward_cost(spec: RegionCostSpec) -> tuple[float, float]:
    """(F_k flops, Q_k elements) for one region's forward pass."""
    B, L, D = spec.B, spec.L, spec.D
    if spec.kind == "ssm":
        return float(B * L * D * spec.N), float(B * L * (D + spec.N))
    F = B * L * D * D + B * L * L * D + B * L * D * spec.X
    Q = B * L * D + B * spec.H * L * L + B * L * spec.X
    return float(F), float(Q)


def forward_intensity(spec: RegionCostSpec, bytes_per_elem: int = 2) -> float:
    F, Q = forward_cost(spec)
    return F / (Q * bytes_per_elem)


def jacobian_cost(spec: RegionCostSpec, r: int, bytes_per_elem: int = 2) -> tuple[float, float]:
    """(W_J, intensity) with all r basis directions sharing one activation load."""
    if r < 1:
        raise ValueError("r must be at least 1")
    F, _ = forward_cost(spec)
    return r * F, r * forward_intensity(spec, bytes_per_elem)


def effective_intensity(spec: RegionCostSpec, r: int, c: int, bytes_per_elem: int = 2) -> float:
    """Intensity when the basis is processed c directions per activation load."""
    if not 1 <= c <= r:
        raise ValueError(f"chunk must lie in [1, {r}], got {c}")
    return c * forward_intensity(spec, bytes_per_elem)


def min_compute_bound_chunk(spec: RegionCostSpec, roofline: float = ROOFLINE_OPS_PER_BYTE,
                            bytes_per_elem: int = 2) -> int:
    """Smallest c whose effective intensity reaches the roofline ridge point."""
    return max(1, math.ceil(roofline / forward_intensity(spec, bytes_per_elem)))


def log2_ceil(K: int) -> int:
    return (K - 1).bit_length() if K > 1 else 0


def scan_cost(K: int, r: int) -> tuple[float, float]:
    """(work, span) of the suffix scan over K r x r Jacobians."""
    if K < 1:
        raise ValueError("K must be at least 1")
    c = float(r) ** 3
    return K * c, c * log2_ceil(K)


def transport_table(d: int, r: int, K: int) -> list[TransportRow]:
    """Per-combine cost of the three ways to move adjoints between regions."""
    if d < r:
        raise ValueError("d must be at least r")
    lg = log2_ceil(K)
    d2, d3, r3 = float(d) ** 2, float(d) ** 3, float(r) ** 3
    return [
        TransportRow("sequential_bp", d2, K * d2, "vector-Jacobian product", 1.0, False),
        TransportRow("full_rank_scan", d3, d3 * lg, "d x d matrix product", float(d), True),
        TransportRow("lbi_scan", r3, r3 * lg, "r x r matrix product", float(r), True),
    ]


@dataclass
class PhaseCost:
    jacobian: float
    scan: float
    local: float

    @property
    def total(self) -> float:
        return self.jacobian + self.scan + self.local


def span_decomposition(specs: list[RegionCostSpec], r: int, K: int | None = None
                       ) -> tuple[PhaseCost, PhaseCost]:
    """(work, span) split into Jacobian construction, scan and local backward."""
    K = len(specs) if K is None else K
    if len(specs) != K:
        raise ValueError(f"expected {K} region specs, got {len(specs)}")
    wj = [jacobian_cost(s, r)[0] for s in specs]
    fl = [forward_cost(s)[0] for s in specs]
    sw, ss = scan_cost(K, r)
    return PhaseCost(sum(wj), sw, sum(fl)), PhaseCost(max(wj), ss, max(fl))


def work_overhead(specs: list[RegionCostSpec], r: int) -> float:
    """Total LBI backward work relative to a standard backward of Theta(F) per region."""
    work, _ = span_decomposition(specs, r)
    return work.total / sum(forward_cost(s)[0] for s in specs)


def phase2_share(specs: list[RegionCostSpec], r: int) -> float:
    work, _ = span_decomposition(specs, r)
    return work.scan / work.total


def payload_bytes(K: int, r: int, bytes_per_elem: int) -> int:
    """Size of all K interface Jacobians."""
    return K * r * r * bytes_per_elem


def intensity_table(specs: dict[str, RegionCostSpec], chunks=(1, 16, 64),
                    bytes_per_elem: int = 2) -> list[dict]:
    rows = []
    for name, s in specs.items():
        row = {"arch": name, "F": forward_cost(s)[0], "Q": forward_cost(s)[1]}
        base = forward_intensity(s, bytes_per_elem)
        row["I_fwd"] = base
        for c in chunks:
            row[f"c={c}"] = c * base
        rows.append(row)
    return rows
