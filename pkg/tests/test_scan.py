import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbi.scan import (ScanStats, apply_adjoints, read_trace, scan_levels, suffix_scan,
                      suffix_scan_parallel, suffix_scan_sequential, write_trace)
from lbi.tensor import DimensionError


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_sequential_examples():
    P = suffix_scan_sequential([], r=3)
    assert len(P) == 1 and np.array_equal(P[0], np.eye(3))
    P = suffix_scan_sequential([np.eye(2)] * 4)
    assert all(np.array_equal(p, np.eye(2)) for p in P)
    P = suffix_scan_sequential([np.diag([2.0, 3.0]), np.diag([5.0, 7.0])])
    assert np.array_equal(P[0], np.diag([10.0, 21.0]))
    assert np.array_equal(P[1], np.diag([5.0, 7.0]))
    assert np.array_equal(P[2], np.eye(2))


def test_ragged_and_nonsquare_rejected():
    with pytest.raises(DimensionError):
        suffix_scan_sequential([np.eye(2), np.eye(3)])
    with pytest.raises(DimensionError):
        suffix_scan_parallel([np.ones((2, 3))])
    with pytest.raises(DimensionError):
        suffix_scan_sequential([])


def test_suffix_recurrence_exact_for_sequential(rng):
    J = [rng.standard_normal((5, 5)) for _ in range(6)]
    P = suffix_scan_sequential(J)
    from lbi.tensor import matmul
    for k in range(6):
        assert np.array_equal(P[k], matmul(np.ascontiguousarray(J[k].T), P[k + 1]))


def test_parallel_single_region(rng):
    J = rng.standard_normal((3, 3))
    P = suffix_scan_parallel([J])
    assert np.array_equal(P[0], J.T) and np.array_equal(P[1], np.eye(3))


@pytest.mark.parametrize("K", [2, 4, 7, 16])
def test_depth_counter(K, rng):
    st_ = ScanStats()
    suffix_scan_parallel([rng.standard_normal((4, 4)) for _ in range(K)], stats=st_)
    assert st_.depth == math.ceil(math.log2(K))
    assert st_.combines <= 2 * K


def test_levels_touch_disjoint_slots():
    for K in range(1, 40):
        for lvl in scan_levels(K):
            outs = [j for j, _ in lvl]
            assert len(outs) == len(set(outs))
            assert not set(outs) & {m for _, m in lvl}


@pytest.mark.parametrize("K", [1, 3, 5, 8])
def test_parallel_matches_sequential(K, rng):
    J = [rng.standard_normal((6, 6)) / np.sqrt(6) for _ in range(K)]
    for a, b in zip(suffix_scan_parallel(J), suffix_scan_sequential(J)):
        assert rel(a, b) < 1e-12


def test_batched_instances_are_independent(rng):
    J = [rng.standard_normal((3, 4, 4)) for _ in range(5)]
    P = suffix_scan_parallel(J)
    for b in range(3):
        Pb = suffix_scan_parallel([j[b] for j in J])
        for x, y in zip(P, Pb):
            assert np.array_equal(x[b], y)


def test_worker_count_does_not_change_result(rng):
    J = [rng.standard_normal((8, 8)) for _ in range(13)]
    ref = suffix_scan_parallel(J)
    for n in (1, 2, 4):
        with ThreadPoolExecutor(n) as ex:
            got = suffix_scan_parallel(J, executor=ex)
        assert all(np.array_equal(a, b) for a, b in zip(got, ref))


def test_threshold_routes_to_sequential(rng):
    J = [rng.standard_normal((3, 3)) for _ in range(3)]
    s = ScanStats()
    suffix_scan(J, threshold=4, stats=s)
    assert s.depth == 2 and s.combines == 2
    s = ScanStats()
    suffix_scan(J, threshold=2, stats=s)
    assert s.depth == 2


def test_apply_adjoints(rng):
    J = [rng.standard_normal((4, 4)) for _ in range(5)]
    P = suffix_scan_sequential(J)
    zero = apply_adjoints(P, np.zeros(4))
    assert all(not np.any(z) for z in zero)
    ident = apply_adjoints(suffix_scan_sequential([np.eye(4)] * 3), np.arange(4.0))
    assert all(np.array_equal(m, np.arange(4.0)) for m in ident)
    mK = rng.standard_normal(4)
    v = mK.copy()
    for j in reversed(J):
        v = j.T @ v
    assert rel(apply_adjoints(P, mK)[0], v) < 1e-12
    with pytest.raises(DimensionError):
        apply_adjoints(P, np.zeros(3))


def test_trace_roundtrip(tmp_path, rng):
    J = [rng.standard_normal((2, 3, 3)) for _ in range(4)]
    P = suffix_scan_sequential(J)
    write_trace(tmp_path / "t.bin", J, P)
    J2, P2 = read_trace(tmp_path / "t.bin")
    assert all(np.array_equal(a, b) for a, b in zip(J, J2))
    assert all(np.array_equal(a, b) for a, b in zip(P, P2))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.sampled_from([1, 2, 5]), st.integers(0, 2**31))
def test_property_parallel_equals_sequential(K, r, seed):
    g = np.random.default_rng(seed)
    J = [g.standard_normal((r, r)) / np.sqrt(r) for _ in range(K)]
    for a, b in zip(suffix_scan_parallel(J), suffix_scan_sequential(J)):
        assert rel(a, b) < 1e-12
