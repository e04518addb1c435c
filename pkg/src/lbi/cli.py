"""Command line entry point: ``lbi <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace

import numpy as np

from . import costmodel as cm
from .backward import BackwardPlan, parity_suite, phase1_all, write_parity_csv
from .diagnostics import SpectraRecord, emit_spectra
from .model import BACKENDS, LBIModel, ModelConfig, load_checkpoint
from .scan import ScanStats, suffix_scan_parallel, suffix_scan_sequential
from .tensor import RngState
from .trainer import TrainConfig, compare_dense, ingest_text, sample_batch, sweep, train


def _schedule(s: str) -> str:
    return s.replace("-", "_")


def _add_model_flags(p):
    p.add_argument("--backend", choices=BACKENDS, default=None)
    p.add_argument("--D", type=int, default=None)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--dtype", choices=("float64", "float32"), default=None)


def _add_backward_flags(p):
    p.add_argument("--chunk", type=int, default=None, help="basis directions per replay")
    p.add_argument("--schedule", choices=("three-phase", "streaming"), default=None)
    p.add_argument("--workers", type=int, default=None)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--data", help="text corpus (byte tokens)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--backward", choices=("lbi", "oracle"), default=None)
    p.add_argument("--out", dest="out_dir", default=None)
    _add_model_flags(p)
    _add_backward_flags(p)


def _model_overrides(args) -> dict:
    keys = ("backend", "D", "L", "r", "K", "dtype")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _train_config(args) -> TrainConfig:
    tc = TrainConfig.load(args.config) if args.config else TrainConfig()
    mo = _model_overrides(args)
    if mo:
        if "backend" in mo or "K" in mo:
            mo.setdefault("schedule", None)
        tc = replace(tc, model=replace(tc.model, **mo))
    kw = {}
    for k in ("data", "steps", "lr", "batch_size", "seeds", "backward", "out_dir", "chunk", "workers"):
        v = getattr(args, k, None)
        if v is not None:
            kw[k] = v
    if args.schedule:
        kw["schedule"] = _schedule(args.schedule)
    return replace(tc, **kw)


def cmd_train(args):
    tc = _train_config(args)
    for m in train(tc):
        print(f"seed {m.seed}: ce {m.initial_ce:.4f} -> {m.final_ce:.4f}, val {m.final_val_ce:.4f}, "
              f"{m.wall_time:.1f}s" + (" (diverged)" if m.diverged else ""))


def cmd_sweep(args):
    tc = _train_config(args)
    rows = sweep(args.axis, args.values, tc, path=args.csv)
    for row in rows:
        print(f"{args.axis}={row['value']} seed={row['seed']} K={row['K']} "
              f"backend_N={row['backend_N']} interface_N={row['interface_N']} val={row['post_hoc_val_ce']:.4f}")


def cmd_compare_dense(args):
    cmp = compare_dense(_train_config(args))
    for a, b, g in zip(cmp.lbi, cmp.dense, cmp.gaps()):
        print(f"seed {a.seed}: lbi {a.final_val_ce:.4f} dense {b.final_val_ce:.4f} gap {g:+.4f}")
    print(json.dumps(cmp.summary(), indent=2))


def cmd_parity(args):
    cfg = ModelConfig(**_model_overrides(args))
    plan = BackwardPlan(chunk=args.chunk, schedule=_schedule(args.schedule or "three-phase"),
                        workers=args.workers or 1, executor="pooled" if (args.workers or 1) > 1 else "serial")
    t0 = time.perf_counter()
    rep = parity_suite(cfg, args.inits, args.batches, args.batch_size, plan, args.seed)
    print(f"backend={cfg.backend} trials={len(rep.trials)} max_abs={rep.max_abs_error:.3e} "
          f"rel_l2={rep.rel_l2_error:.3e} cosine={rep.cosine_similarity:.17g} ({time.perf_counter() - t0:.1f}s)")
    if args.csv:
        write_parity_csv(rep, args.csv)


def cmd_spectra(args):
    cfg, params, extra = load_checkpoint(args.checkpoint)
    model = LBIModel(cfg, params)
    train_tokens, _ = ingest_text(args.data)
    inp, _ = sample_batch(train_tokens, args.batch_size, cfg.L, cfg.seed, args.step)
    J = phase1_all(model, model.forward(inp).caches, BackwardPlan(chunk=args.chunk))
    rec = SpectraRecord.from_jacobians(int(extra.get("steps", args.step)), cfg.seed, J)
    if args.csv:
        emit_spectra([rec], args.csv)
    for row in rec.rows():
        print("step={} seed={} region={} local={:.6f} suffix={:.6f} frob_rms={:.6f}".format(*row))


def cmd_costmodel(args):
    nb = cm.dtype_bytes(args.dtype)
    specs = {
        "ssm": cm.RegionCostSpec(args.B, args.L, args.D, N=args.N, kind="ssm"),
        "transformer": cm.RegionCostSpec(args.B, args.L, args.D, H=args.H, X=args.X, kind="transformer"),
    }
    chunks = sorted({1, args.c, args.r})
    print("arithmetic intensity (ops/byte)")
    head = f"{'arch':<12}" + "".join(f"{'c=' + str(c):>12}" for c in chunks) + f"{'min c':>8}"
    print(head)
    rows = []
    for name, s in specs.items():
        vals = [cm.effective_intensity(s, max(chunks), c, nb) for c in chunks]
        cmin = cm.min_compute_bound_chunk(s, args.roofline, nb)
        print(f"{name:<12}" + "".join(f"{v:>12.1f}" for v in vals) + f"{cmin:>8d}")
        rows.append([name] + vals + [cmin])
    d = args.B * args.L * args.D
    print(f"\ntransport per combine (d={d}, r={args.r}, K={args.K})")
    print(f"{'regime':<16}{'flops':>12}{'span':>12}{'intensity':>12}  operator")
    table = cm.transport_table(d, args.r, args.K)
    for t in table:
        print(f"{t.regime:<16}{t.flops:>12.3g}{t.span:>12.3g}{t.intensity:>12.3g}  {t.operator}")
    sw, ss = cm.scan_cost(args.K, args.r)
    print(f"\nscan work {sw:.4g}, span {ss:.4g}; payload {cm.payload_bytes(args.K, args.r, nb)} bytes")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arch"] + [f"c={c}" for c in chunks] + ["min_c"])
            w.writerows(rows)
            w.writerow([])
            w.writerow(["regime", "flops", "span", "operator", "intensity", "materializes_jacobian"])
            for t in table:
                w.writerow([t.regime, t.flops, t.span, t.operator, t.intensity, t.materializes_jacobian])


def cmd_scan_bench(args):
    rng = RngState(args.seed).generator()
    print(f"{'K':>4}{'r':>6}{'seq ms':>10}{'tree ms':>10}{'depth':>7}{'rel err':>12}")
    for K in args.K:
        for r in args.r:
            J = [rng.standard_normal((r, r)) / np.sqrt(r) for _ in range(K)]
            t0 = time.perf_counter()
            ref = suffix_scan_sequential(J)
            t1 = time.perf_counter()
            st = ScanStats()
            got = suffix_scan_parallel(J, stats=st)
            t2 = time.perf_counter()
            err = max(np.linalg.norm(a - b) / np.linalg.norm(b) for a, b in zip(got, ref))
            print(f"{K:>4}{r:>6}{(t1 - t0) * 1e3:>10.3f}{(t2 - t1) * 1e3:>10.3f}{st.depth:>7}{err:>12.2e}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lbi", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train on a byte-level corpus")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="train across one axis")
    _add_train_flags(p)
    p.add_argument("--axis", choices=("rank", "region_size", "backend"), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--csv", default="sweep.csv")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("compare-dense", help="LBI vs dense residual stack on the same data")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_compare_dense)

    p = sub.add_parser("parity", help="LBI vs reference gradients")
    _add_model_flags(p)
    _add_backward_flags(p)
    p.add_argument("--inits", type=int, default=20)
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_parity)

    p = sub.add_parser("spectra", help="interface Jacobian norms for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--step", type=int, default=0, help="batch index to draw")
    p.add_argument("--chunk", type=int, default=None)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_spectra)

    p = sub.add_parser("costmodel", help="work, span and intensity tables")
    p.add_argument("--B", type=int, default=8)
    p.add_argument("--L", type=int, default=2048)
    p.add_argument("--D", type=int, default=768)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--H", type=int, default=12)
    p.add_argument("--X", type=int, default=3072)
    p.add_argument("--r", type=int, default=64)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--c", type=int, default=16)
    p.add_argument("--dtype", default="bf16")
    p.add_argument("--roofline", type=float, default=cm.ROOFLINE_OPS_PER_BYTE)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_costmodel)

    p = sub.add_parser("scan-bench", help="time sequential vs tree suffix scans")
    p.add_argument("--K", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--r", type=int, nargs="+", default=[4, 16, 64])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_scan_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
