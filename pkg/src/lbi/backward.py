"""Scan-based backward pass for bounded-interface models.

Phase 1 rebuilds each region from its cache and materializes the r x r
interface Jacobian with stacked basis cotangents. Phase 2 turns the
Jacobians into suffix products and interface adjoints. Phase 3 rebuilds
each region again and seeds it with its outgoing adjoint to get that
region's parameter gradients and its share of the canvas gradient.

Phase 1 and Phase 3 tasks only see their own cache and parameters. An
:class:`AccessLog` can be attached to prove it.
"""
from __future__ import annotations

import csv
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientReport, NumericError, Tape, compare_gradients
from .model import (Binder, ForwardCache, IntegrityError, LBIModel, ModelConfig,
                    head_graph, init_graph, region_graph)
from .scan import ScanStats, apply_adjoints, suffix_scan
from .tensor import RngState


@dataclass
class BackwardPlan:
    chunk: int | None = None          # basis directions per replay; None means r
    executor: str = "serial"          # serial | pooled
    workers: int = 1
    schedule: str = "three_phase"     # three_phase | streaming
    scan_threshold: int = 4

    def chunk_for(self, r: int) -> int:
        c = r if self.chunk is None else self.chunk
        if not 1 <= c <= r:
            raise ValueError(f"chunk size must lie in [1, {r}], got {c}")
        return c


@dataclass
class HeadPieces:
    loss: float
    m_bar_K: np.ndarray
    grads: dict[str, np.ndarray]
    canvas: np.ndarray


@dataclass
class RegionBackward:
    grads: dict[str, np.ndarray]
    canvas: np.ndarray
    m_bar_in: np.ndarray


@dataclass
class OverlapReport:
    events: list[tuple[str, int, float, float]] = field(default_factory=list)

    def add(self, kind: str, k: int, start: float, end: float):
        self.events.append((kind, k, start, end))

    def spans(self, kind: str) -> dict[int, tuple[float, float]]:
        return {k: (s, e) for kd, k, s, e in self.events if kd == kind}

    def forward_end(self) -> float:
        return max(e for _, (s, e) in self.spans("forward").items())

    def overlapped_jacobians(self) -> list[int]:
        """Regions whose Jacobian task started before the last forward finished."""
        fend = self.forward_end()
        return sorted(k for k, (s, _) in self.spans("jacobian").items() if s < fend)


@dataclass
class LbiGradients:
    loss: float
    interface_adjoints: list[np.ndarray]
    parameter_gradients: dict[str, np.ndarray]
    jacobians: list[np.ndarray]
    suffix_products: list[np.ndarray]
    scan_stats: ScanStats
    overlap: OverlapReport | None = None


# ---------------------------------------------------------------------------
# executors


class _Deferred:
    def __init__(self, fn, args):
        self._fn, self._args = fn, args
        self._done = False
        self._value = None

    def result(self):
        if not self._done:
            self._value = self._fn(*self._args)
            self._done = True
        return self._value


class SerialExecutor:
    """Single worker. Submitted tasks run when their result is first requested."""

    def submit(self, fn, *args):
        return _Deferred(fn, args)

    def map(self, fn, iterable):
        return list(map(fn, iterable))

    def shutdown(self, wait=True):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def make_executor(plan: BackwardPlan):
    if plan.executor == "serial" or plan.workers <= 1 and plan.executor != "pooled":
        return SerialExecutor()
    if plan.executor == "pooled":
        return ThreadPoolExecutor(max_workers=max(1, plan.workers))
    raise ValueError(f"unknown executor {plan.executor!r}")


# ---------------------------------------------------------------------------
# access tracking


def _owner(name: str) -> str:
    if name.startswith("region"):
        return "region" + name[len("region"):].split(".", 1)[0]
    return name.split(".", 1)[0]


class AccessLog:
    """Thread-safe record of which task touched which per-region resource."""

    def __init__(self):
        self.events: list[tuple[str, str, str, str]] = []
        self._lock = threading.Lock()

    def log(self, task: str, mode: str, kind: str, owner: str):
        with self._lock:
            self.events.append((task, mode, kind, owner))

    def cross_region(self) -> list[tuple[str, str, str, str]]:
        return [e for e in self.events if e[0] != e[3]]


class TrackedParams(Mapping):
    def __init__(self, params: Mapping[str, np.ndarray], log: AccessLog, task: str):
        self._p, self._log, self._task = params, log, task

    def __getitem__(self, name):
        self._log.log(self._task, "read", "param", _owner(name))
        return self._p[name]

    def __iter__(self):
        return iter(self._p)

    def __len__(self):
        return len(self._p)


class TrackedCaches(Sequence):
    def __init__(self, caches: Sequence[ForwardCache], log: AccessLog, task: str):
        self._c, self._log, self._task = caches, log, task

    def __getitem__(self, k):
        self._log.log(self._task, "read", "cache", f"region{k}")
        return self._c[k]

    def __len__(self):
        return len(self._c)


class GradientSlots:
    """One write-once slot per region; tracked writes when a log is attached."""

    def __init__(self, K: int, log: AccessLog | None = None):
        self._slots: list = [None] * K
        self._log = log

    def write(self, task: str, k: int, value):
        if self._log is not None:
            self._log.log(task, "write", "grad", f"region{k}")
        if self._slots[k] is not None:
            raise RuntimeError(f"gradient slot {k} written twice")
        self._slots[k] = value

    def __getitem__(self, k):
        return self._slots[k]


def _views(task: str, params, caches, log: AccessLog | None):
    if log is None:
        return params, caches
    return TrackedParams(params, log, task), TrackedCaches(caches, log, task)


# ---------------------------------------------------------------------------
# Phase 1


def _rebuild(model: LBIModel, k: int, cache: ForwardCache, params):
    tape = Tape()
    P = Binder(tape, params)
    mv = tape.leaf(cache.m_in)
    xv = tape.leaf(cache.x_embed)
    out, _ = region_graph(P, k, mv, xv, model.cfg)
    if not np.array_equal(out.value, cache.m_out):
        raise IntegrityError(f"region {k}: replayed interface state differs from the cached one")
    return tape, P, mv, xv, out


def materialize_jacobian(model: LBIModel, k: int, cache: ForwardCache,
                         plan: BackwardPlan | None = None, params=None) -> np.ndarray:
    """J_k = d m_{k+1} / d m_k for every batch element, shape (B, r, r).

    Each chunk of ``c`` basis directions replays the region from the cache
    and runs one reverse sweep with a (c, B, r) stack of unit cotangents;
    row j of J comes from cotangent e_j.
    """
    plan = plan or BackwardPlan()
    params = model.params if params is None else params
    r = model.cfg.r
    c = plan.chunk_for(r)
    B = cache.m_in.shape[0]
    J = np.empty((B, r, r), dtype=cache.m_in.dtype)
    for j0 in range(0, r, c):
        cj = min(c, r - j0)
        tape, _, mv, _, out = _rebuild(model, k, cache, params)
        cot = np.zeros((cj, B, r), dtype=cache.m_in.dtype)
        for i in range(cj):
            cot[i, :, j0 + i] = 1.0
        (rows,) = ad.vjp(tape, cot, [mv], output=out)
        J[:, j0:j0 + cj, :] = np.transpose(rows, (1, 0, 2))
    return J


def _jacobian_task(model, k, caches, plan, log):
    task = f"region{k}"
    params, cviews = _views(task, model.params, caches, log)
    return materialize_jacobian(model, k, cviews[k], plan, params)


def phase1_all(model: LBIModel, caches: Sequence[ForwardCache], plan: BackwardPlan | None = None,
               executor=None, log: AccessLog | None = None) -> list[np.ndarray]:
    plan = plan or BackwardPlan()
    own = executor is None
    ex = make_executor(plan) if own else executor
    try:
        futures = [ex.submit(_jacobian_task, model, k, caches, plan, log) for k in range(len(caches))]
        return [f.result() for f in futures]
    finally:
        if own:
            ex.shutdown()


# ---------------------------------------------------------------------------
# head, Phase 3, init projection


def head_backward(model: LBIModel, m_K: np.ndarray, x_embed: np.ndarray, targets) -> HeadPieces:
    tape = Tape()
    P = Binder(tape, model.params)
    mv = tape.leaf(m_K)
    xv = tape.leaf(x_embed)
    loss = ad.cross_entropy(head_graph(P, mv, xv, model.cfg), targets)
    names = list(P.vars)
    ids = [P.vars[n] for n in names] + [mv, xv]
    g = ad.vjp(tape, np.ones((), dtype=loss.value.dtype), ids, output=loss)
    return HeadPieces(float(loss.value), g[-2], dict(zip(names, g[:-2])), g[-1])


def phase3_region_backward(model: LBIModel, k: int, cache: ForwardCache, m_bar_next: np.ndarray,
                           params=None) -> RegionBackward:
    """Gradients of <m_bar_{k+1}, m_{k+1}> with respect to region k's inputs."""
    params = model.params if params is None else params
    tape, P, mv, xv, out = _rebuild(model, k, cache, params)
    names = list(P.vars)
    ids = [P.vars[n] for n in names] + [mv, xv]
    g = ad.vjp(tape, m_bar_next, ids, output=out)
    grads = dict(zip(names, g[:-2]))
    for n, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for {n} in region {k}")
    return RegionBackward(grads, g[-1], g[-2])


def _phase3_task(model, k, caches, m_bar_next, slots, log):
    task = f"region{k}"
    params, cviews = _views(task, model.params, caches, log)
    res = phase3_region_backward(model, k, cviews[k], m_bar_next, params)
    slots.write(task, k, res)


def init_backward(model: LBIModel, x_embed: np.ndarray, m_bar_0: np.ndarray):
    tape = Tape()
    P = Binder(tape, model.params)
    xv = tape.leaf(x_embed)
    out = init_graph(P, xv)
    gw, gx = ad.vjp(tape, m_bar_0, [P["init.proj"], xv], output=out)
    return {"init.proj": gw}, gx


def embedding_backward(model: LBIModel, tokens, canvas_grad: np.ndarray) -> np.ndarray:
    tape = Tape()
    table = tape.leaf(model.params["embed"], "embed")
    out = ad.embedding(table, tokens)
    (g,) = ad.vjp(tape, canvas_grad, [table], output=out)
    return g


# ---------------------------------------------------------------------------
# full backward


def _finish(model: LBIModel, tokens, x_embed, caches, head: HeadPieces, J, plan, ex, log,
            overlap=None) -> LbiGradients:
    cfg = model.cfg
    K = cfg.K
    # Phase 2
    stats = ScanStats()
    P = suffix_scan(J, cfg.r, threshold=plan.scan_threshold,
                    executor=None if isinstance(ex, SerialExecutor) else ex, stats=stats)
    m_bar = apply_adjoints(P, head.m_bar_K)

    # Phase 3
    slots = GradientSlots(K, log)
    futures = [ex.submit(_phase3_task, model, k, caches, m_bar[k + 1], slots, log) for k in range(K)]
    for f in futures:
        f.result()

    grads: dict[str, np.ndarray] = {}
    init_grads, canvas = init_backward(model, x_embed, m_bar[0])
    grads.update(init_grads)
    # canvas adjoint: fixed ascending order init, region 0..K-1, head
    canvas = canvas.copy()
    for k in range(K):
        res = slots[k]
        grads.update(res.grads)
        canvas = canvas + res.canvas
    canvas = canvas + head.canvas
    grads.update(head.grads)
    grads["embed"] = embedding_backward(model, tokens, canvas)

    missing = set(model.params) - set(grads)
    for n in missing:
        grads[n] = np.zeros_like(model.params[n])
    grads = {n: grads[n] for n in sorted(grads)}
    return LbiGradients(head.loss, m_bar, grads, J, P, stats, overlap)


def lbi_backward(model: LBIModel, caches: Sequence[ForwardCache], head: HeadPieces, tokens,
                 plan: BackwardPlan | None = None, log: AccessLog | None = None) -> LbiGradients:
    """Three-phase backward given forward caches and the head's adjoints."""
    plan = plan or BackwardPlan()
    x_embed = caches[0].x_embed
    with make_executor(plan) as ex:
        J = phase1_all(model, caches, plan, ex, log)
        return _finish(model, tokens, x_embed, caches, head, J, plan, ex, log)


def streaming_backward(model: LBIModel, tokens, targets, plan: BackwardPlan | None = None,
                       log: AccessLog | None = None) -> LbiGradients:
    """Forward pass that launches each region's Jacobian as soon as its cache exists."""
    plan = plan or BackwardPlan(schedule="streaming")
    cfg = model.cfg
    tokens = model.check_tokens(tokens)
    report = OverlapReport()
    clock = time.perf_counter

    def timed_jacobian(k, caches):
        t0 = clock()
        J = _jacobian_task(model, k, caches, plan, log)
        report.add("jacobian", k, t0, clock())
        return J

    with make_executor(plan) as ex:
        xe = model.embed_tokens(tokens)
        m = model.init_interface(xe)
        caches: list[ForwardCache] = []
        futures = []
        for k in range(cfg.K):
            t0 = clock()
            m, cache = model.region_forward(k, m, xe)
            report.add("forward", k, t0, clock())
            caches.append(cache)
            futures.append(ex.submit(timed_jacobian, k, caches))
        head = head_backward(model, m, xe, targets)
        J = [f.result() for f in futures]
        return _finish(model, tokens, xe, caches, head, J, plan, ex, log, report)


def lbi_gradients(model: LBIModel, tokens, targets, plan: BackwardPlan | None = None,
                  log: AccessLog | None = None) -> LbiGradients:
    """Forward plus scan-based backward under the plan's schedule."""
    plan = plan or BackwardPlan()
    if plan.schedule == "streaming":
        return streaming_backward(model, tokens, targets, plan, log)
    if plan.schedule != "three_phase":
        raise ValueError(f"unknown schedule {plan.schedule!r}")
    fwd = model.forward(tokens)
    head = head_backward(model, fwd.chain[-1], fwd.x_embed, targets)
    return lbi_backward(model, fwd.caches, head, tokens, plan, log)


# ---------------------------------------------------------------------------
# parity


def random_batch(cfg: ModelConfig, batch_size: int, seed: int, counter: int):
    rng = RngState(seed, counter).generator()
    toks = rng.integers(0, cfg.vocab_size, size=(batch_size, cfg.L + 1))
    return toks[:, :-1], toks[:, 1:]


def parity_suite(cfg: ModelConfig, n_inits: int = 20, n_batches: int = 5, batch_size: int = 2,
                 plan: BackwardPlan | None = None, seed: int = 0) -> GradientReport:
    """Worst case of LBI-vs-reference gradient agreement over inits x batches.

    The returned report's ``trials`` lists one row per trial.
    """
    plan = plan or BackwardPlan()
    worst = None
    rows = []
    t = 0
    for i in range(n_inits):
        icfg = replace(cfg, seed=seed * 100003 + i)
        model = LBIModel(icfg)
        for b in range(n_batches):
            inp, tgt = random_batch(icfg, batch_size, icfg.seed, 1000 + b)
            _, ref = model.oracle_gradients(inp, tgt)
            got = lbi_gradients(model, inp, tgt, plan).parameter_gradients
            rep = compare_gradients(got, ref)
            rows.append({"trial": t, "backend": cfg.backend, "max_abs": rep.max_abs_error,
                         "rel_l2": rep.rel_l2_error, "cosine": rep.cosine_similarity})
            if worst is None or rep.rel_l2_error > worst.rel_l2_error:
                worst_breakdown = rep.per_parameter_breakdown
            worst = rep if worst is None else worst
            worst = GradientReport(max(worst.max_abs_error, rep.max_abs_error),
                                   max(worst.rel_l2_error, rep.rel_l2_error),
                                   min(worst.cosine_similarity, rep.cosine_similarity))
            t += 1
    worst.per_parameter_breakdown = worst_breakdown
    worst.trials = rows
    return worst


def write_parity_csv(report: GradientReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "backend", "max_abs", "rel_l2", "cosine"])
        for row in report.trials:
            w.writerow([row["trial"], row["backend"], repr(row["max_abs"]), repr(row["rel_l2"]),
                        repr(row["cosine"])])
