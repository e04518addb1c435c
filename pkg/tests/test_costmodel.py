import math

import pytest
from hypothesis import given, strategies as st

from lbi import costmodel as cm
from lbi.costmodel import SSM_REF, TOY_SPEC, TRANSFORMER_REF, RegionCostSpec

# The reference intensities round I_fwd before scaling by c, so the
# unit-constant formulas land within 1% of every listed value.
REL = 0.01


def close(a, b, rel=REL):
    return abs(a - b) <= rel * abs(b)


def test_forward_intensity_reference_shapes():
    assert close(cm.forward_intensity(SSM_REF), 7.8)
    assert close(cm.forward_intensity(TRANSFORMER_REF), 80)
    F, Q = cm.forward_cost(SSM_REF)
    assert F == 8 * 2048 * 768 * 16 and Q == 8 * 2048 * (768 + 16)


def test_ssm_state_limit():
    assert cm.forward_cost(RegionCostSpec(8, 2048, 768, N=0))[0] == 0


def test_effective_intensity_table():
    for spec, vals in ((SSM_REF, (7.8, 125, 500)), (TRANSFORMER_REF, (80, 1275, 5100))):
        for c, want in zip((1, 16, 64), vals):
            assert close(cm.effective_intensity(spec, 64, c), want)
    with pytest.raises(ValueError):
        cm.effective_intensity(SSM_REF, 64, 65)


def test_jacobian_cost():
    F, _ = cm.forward_cost(SSM_REF)
    assert cm.jacobian_cost(SSM_REF, 1)[0] == F
    W, _ = cm.jacobian_cost(SSM_REF, 64)
    assert close(W, 1.29e10) and close(16 * W, 2.06e11)
    assert close(cm.jacobian_cost(TRANSFORMER_REF, 64)[1], 5100)


def test_min_compute_bound_chunk():
    assert cm.min_compute_bound_chunk(SSM_REF) == 38
    assert cm.min_compute_bound_chunk(SSM_REF, roofline=1.0) == 1


def test_scan_cost():
    work, span = cm.scan_cost(16, 64)
    assert work == 16 * 64 ** 3 == 4_194_304
    assert span == 64 ** 3 * 4
    assert cm.scan_cost(1, 64)[1] == 0
    ratio = work / (16 * cm.jacobian_cost(SSM_REF, 64)[0])
    assert ratio < 1e-4


def test_transport_table():
    d = 8 * 2048 * 768
    seq, full, lbi = cm.transport_table(d, 64, 16)
    assert close(full.flops, 2.0e21) and lbi.flops == 64 ** 3
    assert round(math.log10(full.flops / lbi.flops)) == 16
    assert not seq.materializes_jacobian and full.materializes_jacobian
    a, b, c = cm.transport_table(32, 32, 5)
    assert (b.flops, b.span, b.intensity) == (c.flops, c.span, c.intensity)
    assert cm.transport_table(100, 4, 1)[0].span == 100 ** 2
    with pytest.raises(ValueError):
        cm.transport_table(3, 4, 2)


def test_span_decomposition():
    work, span = cm.span_decomposition([SSM_REF] * 4, 16)
    assert span.jacobian == cm.jacobian_cost(SSM_REF, 16)[0]
    assert work.jacobian == 4 * span.jacobian
    assert span.scan == 16 ** 3 * 2
    assert close(cm.work_overhead([SSM_REF] * 16, 64), 65, rel=1e-3)
    assert cm.phase2_share([TOY_SPEC] * 7, 64) < 1e-3


def test_payload_bytes():
    assert cm.payload_bytes(7, 64, 2) == 57_344
    assert cm.payload_bytes(7, 16, 2) == 3_584
    assert cm.payload_bytes(7, 0, 2) == 0
    assert cm.dtype_bytes("bf16") == 2 and cm.dtype_bytes("f32") == 4


@given(st.integers(1, 64), st.integers(1, 256), st.integers(1, 128), st.integers(0, 32),
       st.integers(1, 8), st.integers(1, 256))
def test_costs_monotone(B, L, D, N, H, X):
    for kind in ("ssm", "transformer"):
        s = RegionCostSpec(B, L, D, N=N, H=H, X=X, kind=kind)
        F, Q = cm.forward_cost(s)
        for bigger in (RegionCostSpec(B + 1, L, D, N, H, X, kind), RegionCostSpec(B, L + 1, D, N, H, X, kind),
                       RegionCostSpec(B, L, D + 1, N, H, X, kind), RegionCostSpec(B, L, D, N + 1, H, X, kind)):
            F2, Q2 = cm.forward_cost(bigger)
            assert F2 >= F and Q2 >= Q
    assert cm.scan_cost(5, 4) <= cm.scan_cost(6, 4) <= cm.scan_cost(6, 5)
