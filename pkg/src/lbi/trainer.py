"""Byte-level training loop, sweeps and the dense comparison."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .backward import BackwardPlan, lbi_gradients, phase1_all
from .diagnostics import SpectraRecord, emit_spectra
from .model import (LBIModel, ModelConfig, dense_record, init_dense_params, param_counts,
                    save_checkpoint)
from .tensor import RngState

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 200
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    warmup: int = 100
    batch_size: int = 4
    eval_every: int = 50
    eval_tokens: int = 4096
    seeds: list[int] = field(default_factory=lambda: [0])
    backward: str = "lbi"           # lbi | oracle
    out_dir: str | None = None
    spectra_every: int = 100
    chunk: int | None = None
    schedule: str = "three_phase"
    workers: int = 1
    data: str | None = None
    val_fraction: float = 0.05

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        self.seeds = list(self.seeds)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.backward not in ("lbi", "oracle"):
            raise ValueError(f"backward must be lbi or oracle, got {self.backward!r}")

    def plan(self) -> BackwardPlan:
        return BackwardPlan(chunk=self.chunk, schedule=self.schedule, workers=self.workers,
                            executor="pooled" if self.workers > 1 else "serial")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


@dataclass
class RunMetrics:
    seed: int
    train_ce: list[tuple[int, float]] = field(default_factory=list)
    val_ce: list[tuple[int, float]] = field(default_factory=list)
    final_val_ce: float = float("nan")
    wall_time: float = 0.0
    param_counts: dict[str, int] = field(default_factory=dict)
    diverged: bool = False
    diverged_step: int | None = None
    lr: float = 0.0
    retried: bool = False
    spectra: list[SpectraRecord] = field(default_factory=list)

    @property
    def initial_ce(self) -> float:
        return self.train_ce[0][1]

    @property
    def final_ce(self) -> float:
        return self.train_ce[-1][1]


# ---------------------------------------------------------------------------
# data


def ingest_bytes(data: bytes, val_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    if not data:
        raise DataError("empty corpus")
    toks = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    n_val = int(len(toks) * val_fraction)
    cut = len(toks) - n_val
    return toks[:cut], toks[cut:]


def ingest_text(path, val_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Byte tokens of a file, split into leading train and trailing val parts."""
    with open(path, "rb") as fh:
        return ingest_bytes(fh.read(), val_fraction)


def sample_batch(tokens: np.ndarray, batch_size: int, L: int, seed: int, step: int):
    if len(tokens) < L + 1:
        raise DataError(f"need at least {L + 1} tokens, have {len(tokens)}")
    rng = RngState(seed, step + 1).generator()
    starts = rng.integers(0, len(tokens) - L, size=batch_size)
    win = np.stack([tokens[s:s + L + 1] for s in starts])
    return win[:, :-1], win[:, 1:]


def eval_windows(tokens: np.ndarray, L: int, max_tokens: int):
    n = min(max_tokens, len(tokens) - 1) // L
    if n < 1:
        return None
    win = np.stack([tokens[i * L:i * L + L + 1] for i in range(n)])
    return win[:, :-1], win[:, 1:]


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and global-norm clipping."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = 1.0, warmup: int = 0):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.grad_clip, self.warmup = weight_decay, grad_clip, warmup
        self.m = {n: np.zeros_like(v) for n, v in params.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.items()}
        self.t = 0

    def lr_at(self, t: int) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, t / self.warmup)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Updates ``params`` in place and returns the pre-clip gradient norm."""
        names = sorted(params)
        norm = math.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr_at(self.t)
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in names:
            g = grads[n] * scale
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            if self.weight_decay and params[n].ndim >= 2:
                params[n] -= lr * self.weight_decay * params[n]
            params[n] -= lr * update
        return norm


# ---------------------------------------------------------------------------
# training


GradFn = Callable[[dict, np.ndarray, np.ndarray], tuple[float, dict, list | None]]


def _lbi_fns(cfg: ModelConfig, params: dict, tc: TrainConfig):
    model = LBIModel(cfg, params)
    plan = tc.plan()

    def grad(inp, tgt):
        if tc.backward == "oracle":
            loss, g = model.oracle_gradients(inp, tgt)
            return loss, g, None
        res = lbi_gradients(model, inp, tgt, plan)
        return res.loss, res.parameter_gradients, res.jacobians

    def jacobians(inp):
        return phase1_all(model, model.forward(inp).caches, plan)

    def loss(inp, tgt):
        return model.forward(inp, tgt).loss

    return grad, loss, jacobians


def _dense_fns(cfg: ModelConfig, params: dict):
    def grad(inp, tgt):
        tape, loss, _ = dense_record(cfg, params, inp, tgt)
        g = ad.backward(tape, np.ones((), dtype=cfg.np_dtype), loss)
        return float(loss.value), g, None

    def loss(inp, tgt):
        return float(dense_record(cfg, params, inp, tgt)[1].value)

    return grad, loss, None


def _evaluate(loss_fn, windows, batch_size: int) -> float:
    if windows is None:
        return float("nan")
    inp, tgt = windows
    total, n = 0.0, 0
    for i in range(0, len(inp), batch_size):
        b = len(inp[i:i + batch_size])
        total += loss_fn(inp[i:i + batch_size], tgt[i:i + batch_size]) * b
        n += b
    return total / n


def _run(tc: TrainConfig, train_tokens, val_tokens, seed: int, lr: float, dense: bool) -> tuple[RunMetrics, dict]:
    cfg = replace(tc.model, seed=seed)
    if dense:
        params = init_dense_params(cfg)
        grad_fn, loss_fn, jac_fn = _dense_fns(cfg, params)
    else:
        params = LBIModel(cfg).params
        grad_fn, loss_fn, jac_fn = _lbi_fns(cfg, params, tc)
    opt = AdamW(params, lr, tc.betas, tc.eps, tc.weight_decay, tc.grad_clip, tc.warmup)
    metrics = RunMetrics(seed=seed, lr=lr, param_counts=param_counts(params))
    windows = eval_windows(val_tokens, cfg.L, tc.eval_tokens)
    t0 = time.perf_counter()
    for step in range(tc.steps):
        inp, tgt = sample_batch(train_tokens, tc.batch_size, cfg.L, seed, step)
        try:
            loss, grads, J = grad_fn(inp, tgt)
        except NumericError:
            loss, grads = float("nan"), None
        if grads is None or not math.isfinite(loss):
            metrics.diverged, metrics.diverged_step = True, step
            log.warning("seed %d diverged at step %d", seed, step)
            break
        metrics.train_ce.append((step, loss))
        if jac_fn is not None and tc.spectra_every and step and step % tc.spectra_every == 0:
            J = J if J is not None else jac_fn(inp)
            metrics.spectra.append(SpectraRecord.from_jacobians(step, seed, J))
        if tc.eval_every and step and step % tc.eval_every == 0:
            metrics.val_ce.append((step, _evaluate(loss_fn, windows, tc.batch_size)))
        opt.step(params, grads)
    if not metrics.diverged:
        metrics.final_val_ce = _evaluate(loss_fn, windows, tc.batch_size)
        metrics.val_ce.append((tc.steps, metrics.final_val_ce))
    metrics.wall_time = time.perf_counter() - t0
    return metrics, params


def write_metrics(runs: list[RunMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "split", "ce", "seed"])
        for m in runs:
            for step, ce in m.train_ce:
                w.writerow([step, "train", repr(ce), m.seed])
            for step, ce in m.val_ce:
                w.writerow([step, "val", repr(ce), m.seed])


def train_seed(tc: TrainConfig, train_tokens, val_tokens, seed: int, dense: bool = False) -> RunMetrics:
    """One seed; a diverged LBI run is retried once at half the learning rate."""
    metrics, params = _run(tc, train_tokens, val_tokens, seed, tc.lr, dense)
    if metrics.diverged and not dense:
        metrics, params = _run(tc, train_tokens, val_tokens, seed, tc.lr / 2, dense)
        metrics.retried = True
    if tc.out_dir:
        d = os.path.join(tc.out_dir, ("dense-" if dense else "") + f"seed{seed}")
        os.makedirs(d, exist_ok=True)
        write_metrics([metrics], os.path.join(d, "metrics.csv"))
        if metrics.spectra:
            emit_spectra(metrics.spectra, os.path.join(d, "spectra.csv"))
        if not dense:
            save_checkpoint(os.path.join(d, "model.ckpt"), replace(tc.model, seed=seed), params,
                            {"steps": tc.steps, "diverged": metrics.diverged})
    return metrics


def _load_data(tc: TrainConfig, data=None):
    if data is not None:
        return data
    if tc.data is None:
        raise DataError("no corpus given")
    return ingest_text(tc.data, tc.val_fraction)


def train(tc: TrainConfig, data=None) -> list[RunMetrics]:
    train_tokens, val_tokens = _load_data(tc, data)
    runs = [train_seed(tc, train_tokens, val_tokens, s) for s in tc.seeds]
    if tc.out_dir:
        write_metrics(runs, os.path.join(tc.out_dir, "metrics.csv"))
    return runs


# ---------------------------------------------------------------------------
# sweeps and the dense comparison

SWEEP_HEADER = ["axis", "value", "seed", "backend", "K", "r", "region_size", "backend_N",
                "interface_N", "embedding_head_N", "total_N", "initial_ce", "final_train_ce",
                "post_hoc_val_ce", "diverged", "retried"]


def sweep_configs(axis: str, values, base: ModelConfig) -> list[ModelConfig]:
    out = []
    for v in values:
        if axis == "rank":
            out.append(replace(base, r=int(v)))
        elif axis == "region_size":
            kw = {f.name: getattr(base, f.name) for f in fields(base)
                  if f.name not in ("K", "layers_per_region", "n_layers", "schedule")}
            out.append(ModelConfig.from_depth(base.total_layers, int(v), **kw))
        elif axis == "backend":
            out.append(replace(base, backend=str(v), schedule=None))
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
    return out


def sweep(axis: str, values, tc: TrainConfig, data=None, path=None) -> list[dict]:
    """Train every value of one axis with shared seeds; one row per (value, seed)."""
    train_tokens, val_tokens = _load_data(tc, data)
    rows = []
    for v, mcfg in zip(values, sweep_configs(axis, values, tc.model)):
        sub = replace(tc, model=mcfg,
                      out_dir=os.path.join(tc.out_dir, f"{axis}-{v}") if tc.out_dir else None)
        for s in tc.seeds:
            m = train_seed(sub, train_tokens, val_tokens, s)
            pc = m.param_counts
            rows.append({"axis": axis, "value": v, "seed": s, "backend": mcfg.backend, "K": mcfg.K,
                         "r": mcfg.r, "region_size": mcfg.layers_per_region,
                         "backend_N": pc["backend"], "interface_N": pc["interface"],
                         "embedding_head_N": pc["embedding_head"], "total_N": pc["total"],
                         "initial_ce": m.initial_ce if m.train_ce else float("nan"),
                         "final_train_ce": m.final_ce if m.train_ce else float("nan"),
                         "post_hoc_val_ce": m.final_val_ce, "diverged": m.diverged, "retried": m.retried})
    if path is not None:
        write_table(rows, path, SWEEP_HEADER)
    return rows


def write_table(rows: list[dict], path, header) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for row in rows:
            w.writerow(row)


@dataclass
class DenseComparison:
    lbi: list[RunMetrics]
    dense: list[RunMetrics]

    def gaps(self) -> list[float]:
        """LBI minus dense post-hoc validation CE, per seed."""
        return [a.final_val_ce - b.final_val_ce for a, b in zip(self.lbi, self.dense)]

    def summary(self) -> dict:
        g = np.array(self.gaps())
        return {"mean_gap": float(g.mean()), "min_gap": float(g.min()), "max_gap": float(g.max()),
                "spread": float(g.max() - g.min()), "lbi_interface_N": self.lbi[0].param_counts["interface"],
                "dense_interface_N": self.dense[0].param_counts["interface"]}


def compare_dense(tc: TrainConfig, data=None) -> DenseComparison:
    train_tokens, val_tokens = _load_data(tc, data)
    lbi = [train_seed(tc, train_tokens, val_tokens, s) for s in tc.seeds]
    dense = [train_seed(tc, train_tokens, val_tokens, s, dense=True) for s in tc.seeds]
    return DenseComparison(lbi, dense)
