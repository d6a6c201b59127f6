"""Command-line front end: ``adapterlab {train,sweep,theory,params,report}``.

Exit codes: 0 success, 1 runtime or assertion failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .adapter import adapter_param_count, total_trainable_count
from .backbone import attach_downstream, init_encoder
from .bench.checkpoint import save_checkpoint
from .bench.config import ExperimentConfig, apply_overrides, load_config
from .bench.sweep import (
    INIT_KEY,
    aggregate,
    grid_points,
    prepare_task,
    rank_increments,
    run_sweep,
    summary_to_csv,
)
from .exceptions import AdapterLabError, ConfigError, SchemaError
from .metrics import read_csv, write_csv
from .numkernel import make_rng
from .theory import (
    BoundViolation,
    constructive_adapter,
    elbow_check,
    make_shift,
    tail_decay,
    tail_energy,
    verify_bound_monte_carlo,
)
from .training import train

log = logging.getLogger("adapterlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(AdapterLabError):
    """Bad arguments detected after argparse (exit 2)."""


def _load(args) -> ExperimentConfig:
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    cfg = apply_overrides(cfg, args.override or [])
    if args.seed is not None:
        cfg = replace(
            cfg,
            train=replace(cfg.train, seed=args.seed),
            theory=replace(cfg.theory, seed=args.seed),
            sweep=replace(cfg.sweep, seeds=(args.seed,)),
        )
    return cfg


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_train(cfg: ExperimentConfig, out_dir: str) -> int:
    prepared = prepare_task(cfg)
    state = attach_downstream(prepared.backbone, cfg.model, make_rng(cfg.train.seed, INIT_KEY))
    final, rows = train(state, prepared.data, cfg.train, run_id="train")
    write_csv(rows, os.path.join(out_dir, "metrics.csv"))
    save_checkpoint(final, os.path.join(out_dir, "final.ckpt"))
    last = [r for r in rows if r.epoch == cfg.train.epochs - 1]
    for r in last:
        print(f"epoch {r.epoch} {r.split}: loss {r.loss:.4f} top1 {r.top1:.2f}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out_dir: str) -> int:
    spec = cfg.sweep
    print(f"sweep: {sum(1 for _ in grid_points(spec, cfg.model.regime))} runs")
    prepared = prepare_task(cfg)
    rows = run_sweep(spec, prepared, cfg)
    write_csv(rows, os.path.join(out_dir, "metrics.csv"))
    summary = aggregate(rows, _report_split(rows))
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(summary_to_csv(summary))
    print(_summary_text(summary))
    failed = sum(r.split == "error" for r in rows)
    if failed:
        print(f"{failed} run(s) failed; see error rows in metrics.csv", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


THEORY_COLUMNS = (
    "rank", "bound", "empirical", "expected", "constructive_error", "tail_energy",
    "tail_decay", "bound_pass", "construct_pass", "elbow",
)


def cmd_theory(cfg: ExperimentConfig, out_dir: str) -> int:
    t = cfg.theory
    if not t.p_decay > 0.5:
        raise ConfigError(f"theory.p_decay must exceed 1/2 for a finite tail, got {t.p_decay}")
    bad = [r for r in t.ranks if not 1 <= r <= t.d]
    if bad:
        raise ConfigError(f"theory.ranks must lie in [1, {t.d}], got {bad}")
    rng = make_rng(t.seed, 0x7E0)
    shift = make_shift(t.d, t.c_decay, t.p_decay, rng)
    records, violated = [], []
    for r in t.ranks:
        mc = verify_bound_monte_carlo(shift, r, t.b_norm, t.draws, make_rng(t.seed, 0x3C, r), check=False)
        ad = constructive_adapter(shift, r, 1.0)
        approx = ad.alpha * (ad.w_up @ ad.w_down)
        cons_err = float(np.sum((shift.delta - approx) ** 2))
        tail = tail_energy(shift, r)
        cons_ok = abs(cons_err - tail) <= 1e-9 * max(1.0, tail)
        if not (mc.passed and cons_ok):
            violated.append(r)
        records.append([
            r, mc.bound, mc.empirical_mse, t.b_norm**2 * tail / t.d, cons_err, tail,
            tail_decay(r, t.c_decay, t.p_decay, t.d), mc.passed, cons_ok,
        ])
    # gain curve: reduction of the normalised tail as rank grows
    total = tail_energy(shift, 0)
    curve = [(rec[0], 1.0 - math.sqrt(rec[5] / total)) for rec in records]
    verdict = "n/a"
    if len(curve) >= 3:
        verdict = "pass" if elbow_check(curve).passed else "fail"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(THEORY_COLUMNS)
    for rec in records:
        w.writerow([
            rec[0], *(format(v, ".17g") for v in rec[1:7]),
            str(rec[7]).lower(), str(rec[8]).lower(), verdict,
        ])
    with open(os.path.join(out_dir, "theory.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    print(buf.getvalue(), end="")
    if violated:
        print(f"bound violated at rank(s): {', '.join(map(str, violated))}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def params_table(model) -> list[tuple[str, str]]:
    """Parameter budget lines for one geometry (used by ``params``)."""
    n_ad = model.L // model.every_k
    per = adapter_param_count(model.rank, model.d)
    full = replace(model, regime="full_ft")
    full_total = total_trainable_count(full, include_head_bias=True)
    rows = [
        ("adapter params (per adapter)", f"{per:,}"),
        ("adapters", f"{n_ad}"),
        ("adapter params (total)", f"{n_ad * per:,}"),
        ("head params", f"{model.C * model.d + model.C:,} ({model.C * model.d:,} weights + {model.C} bias)"),
    ]
    for regime in ("head_only", "adaptertune", "full_ft"):
        m = replace(model, regime=regime)
        formula = total_trainable_count(m)
        state = attach_downstream(init_encoder(full, make_rng(0)), m, make_rng(1))
        actual = sum(int(state.params[k].size) for k in state.trainable_names())
        rows.append((f"{regime}: formula total", f"{formula:,}"))
        rows.append((f"{regime}: actual total", f"{actual:,}"))
        rows.append((f"{regime}: % of full fine-tune", f"{100.0 * actual / full_total:.3f}%"))
    return rows


def cmd_params(cfg: ExperimentConfig) -> int:
    m = cfg.model
    print(f"geometry: d={m.d} L={m.L} heads={m.heads} rank={m.rank} every_k={m.every_k} C={m.C}")
    rows = params_table(m)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def _report_split(rows) -> str:
    return "val" if any(r.split == "val" for r in rows) else "train"


def _summary_text(summary) -> str:
    head = f"{'regime':<12}{'rank':>5}{'k':>3} {'init':<18}{'alpha':>6}{'lr':>9}{'wd':>7}{'n':>3}  {'top1 (mean +- std)':<20}{'d_head':>8}"
    lines = [head]
    for s in summary:
        delta = "" if s.delta_head is None else f"{s.delta_head:+.2f}"
        lines.append(
            f"{s.regime:<12}{s.rank:>5}{s.every_k:>3} {s.init:<18}{s.alpha:>6g}{s.lr:>9g}{s.wd:>7g}"
            f"{s.n_seeds:>3}  {s.top1_mean:6.2f} +- {s.top1_std:<9.3f}{delta:>8}"
        )
    return "\n".join(lines)


def cmd_report(paths, out_dir: str | None) -> int:
    rows = []
    for p in paths:
        rows.extend(read_csv(p))
    rows = [r for r in rows if r.split != "error"]
    if not rows:
        raise SchemaError("no metric rows to report")
    summary = aggregate(rows, _report_split(rows))
    print(_summary_text(summary))
    for fam, curve, report in rank_increments(summary):
        if len(curve) < 2:
            continue
        print(f"\nrank sweep ({fam[0]}, every_k={fam[1]}, init={fam[2]}, lr={fam[4]:g}):")
        base_rank, base = curve[0]
        for rank, value in curve:
            print(f"  r={rank:<4} top1 {value:6.2f}  gain vs r={base_rank}: {value - base:+.2f}")
        if report is not None:
            inc = ", ".join(f"{x:+.2f}" for x in report.increments)
            print(f"  increments: {inc}; elbow {'pass' if report.passed else 'fail'}")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(summary_to_csv(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (created)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument(
        "--override", action="append", metavar="KEY=VALUE",
        help="config override, dotted (train.epochs=3) or bare (epochs=3); repeatable",
    )
    parser = argparse.ArgumentParser(prog="adapterlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="one training run; writes metrics.csv, final.ckpt")
    sub.add_parser("sweep", parents=[common], help="grid x seeds; writes metrics.csv, summary.csv")
    sub.add_parser("theory", parents=[common], help="truncation bound validation; writes theory.csv")
    sub.add_parser("params", parents=[common], help="print the trainable-parameter budget")
    rep = sub.add_parser("report", parents=[common], help="aggregate metrics CSVs")
    rep.add_argument("csv", nargs="+", help="metrics.csv files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.csv, args.out if args.out != "out" else None)
        cfg = _load(args)
        if args.command == "params":
            return cmd_params(cfg)
        out = _outdir(args)
        return {"train": cmd_train, "sweep": cmd_sweep, "theory": cmd_theory}[args.command](cfg, out)
    except (ConfigError, UsageError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BoundViolation as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (AdapterLabError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
