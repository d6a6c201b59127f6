"""Sweep execution and aggregation over seeds."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from ..adapter import total_trainable_count
from ..backbone import EncoderState, attach_downstream, init_encoder, pretrain_frozen_backbone
from ..exceptions import ConfigError
from ..metrics import MetricsRow
from ..numkernel import make_rng
from ..theory import elbow_check, make_shift
from ..training import train
from .config import SWEEP_AXES, ExperimentConfig, SweepSpec
from .data import Dataset, deterministic_split, make_planted_task
from .idx import load_idx

log = logging.getLogger(__name__)

__all__ = [
    "PreparedTask",
    "prepare_task",
    "run_one",
    "run_sweep",
    "SummaryRow",
    "aggregate",
    "rank_increments",
    "worker_count",
    "grid_points",
    "summary_to_csv",
    "SUMMARY_COLUMNS",
]

INIT_KEY = 0x1A17
MODEL_AXES = ("regime", "rank", "every_k", "init", "alpha")


@dataclass
class PreparedTask:
    """Downstream dataset plus the frozen backbone every run starts from."""

    data: Dataset
    backbone: EncoderState
    source: Dataset | None = None
    planted: object = None


def _planted(exp: ExperimentConfig):
    t, m = exp.task, exp.model
    shift = make_shift(t.shift_dim, t.c_decay, t.p_decay, make_rng(t.seed, 1))
    task = make_planted_task(
        m.input_dim, m.C, t.n_per_class, shift, t.noise, make_rng(t.seed, 2),
        name=t.name, source_per_class=t.source_per_class,
    )
    return task.source, task.target, task


def prepare_task(exp: ExperimentConfig) -> PreparedTask:
    """Build the downstream split and pretrain (or randomly draw) the backbone."""
    t = exp.task
    planted = None
    if t.kind == "planted":
        source, target, planted = _planted(exp)
    else:
        target = load_idx(t.images, t.labels, n_classes=exp.model.C, name=t.name)
        source = None
        if t.source_images:
            source = load_idx(t.source_images, t.source_labels, n_classes=t.source_classes)
    if target.dim != exp.model.input_dim:
        raise ConfigError(
            f"model.input_dim={exp.model.input_dim} but the dataset has {target.dim} features"
        )
    target = deterministic_split(target, t.fractions, t.split_seed)
    if source is not None and exp.pretrain.epochs > 0:
        source = deterministic_split(source, (0.8, 0.2, 0.0), t.split_seed)
        backbone = pretrain_frozen_backbone(
            replace(exp.model, regime="full_ft", C=source.n_classes), source, exp.pretrain
        )
    else:
        backbone = init_encoder(replace(exp.model, regime="full_ft"), make_rng(exp.pretrain.seed, 0x5EED))
    return PreparedTask(target, backbone, source, planted)


ADAPTER_ONLY_AXES = ("rank", "every_k", "init", "alpha")


def grid_points(spec: SweepSpec, base_regime: str = "adaptertune"):
    # adapter-only axes are meaningless for head_only/full_ft; keep the first
    # point of each such family and drop its duplicates
    names = [a for a in SWEEP_AXES if a in spec.axes]
    seen = set()
    for combo in itertools.product(*(spec.axes[a] for a in names)):
        point = dict(zip(names, combo))
        if point.get("regime", base_regime) != "adaptertune":
            key = tuple((k, str(v)) for k, v in point.items() if k not in ADAPTER_ONLY_AXES)
            if key in seen:
                continue
            seen.add(key)
        for seed in spec.seeds:
            yield point, seed


def _run_label(point, seed):
    parts = [f"{k}={v}" for k, v in point.items()]
    parts.append(f"seed={seed}")
    return ";".join(parts)


def run_one(prepared: PreparedTask, exp: ExperimentConfig, point: dict, seed: int, run_id: str = ""):
    """Train one configuration; returns its metrics rows."""
    model_over = {k: v for k, v in point.items() if k in MODEL_AXES}
    cfg = replace(exp.model, **model_over)
    tcfg = replace(
        exp.train,
        base_lr=point.get("lr", exp.train.base_lr),
        weight_decay=point.get("wd", exp.train.weight_decay),
        seed=seed,
    )
    state = attach_downstream(prepared.backbone, cfg, make_rng(seed, INIT_KEY))
    _, rows = train(state, prepared.data, tcfg, run_id=run_id)
    return rows


def _error_row(exp, point, seed, run_id, dataset):
    # built from raw values: the point may be exactly what failed validation
    m = {**exp.model.as_dict(), **{k: v for k, v in point.items() if k in MODEL_AXES}}
    regime = str(m["regime"])
    try:
        params = total_trainable_count(SimpleNamespace(**m))
    except Exception:
        params = 0
    return MetricsRow(
        run_id=run_id, dataset=dataset, regime=regime,
        rank=m["rank"] if regime == "adaptertune" else 0, every_k=m["every_k"],
        init=str(m["init"]), alpha=m["alpha"], lr=point.get("lr", exp.train.base_lr),
        wd=point.get("wd", exp.train.weight_decay), seed=seed, epoch=-1, split="error",
        loss=math.nan, top1=math.nan, trainable_params=params,
    )


def _safe_run(args):
    prepared, exp, point, seed, run_id = args
    try:
        return run_one(prepared, exp, point, seed, run_id)
    except Exception as exc:  # one bad cell must not abort the sweep
        log.warning("run %s failed: %s", run_id, exc)
        return [_error_row(exp, point, seed, run_id, prepared.data.name)]


def worker_count() -> int:
    """Worker processes from ``ADAPTERLAB_THREADS`` (default 1)."""
    raw = os.environ.get("ADAPTERLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ADAPTERLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_sweep(spec: SweepSpec, prepared: PreparedTask, base: ExperimentConfig, workers: int | None = None):
    """Run every grid point for every seed; rows come back in canonical order.

    Order is lexicographic over the axes (fixed axis order, values as
    listed), then seed, then epoch. Baseline regimes run once per
    combination of the axes that apply to them. Runs are independent, so with several
    workers the result is identical to a serial execution.
    """
    jobs = [
        (prepared, base, point, seed, _run_label(point, seed))
        for point, seed in grid_points(spec, base.model.regime)
    ]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_run, jobs))
    else:
        results = [_safe_run(j) for j in jobs]
    return [row for rows in results for row in rows]


@dataclass(frozen=True)
class SummaryRow:
    dataset: str
    regime: str
    rank: int
    every_k: int
    init: str
    alpha: float
    lr: float
    wd: float
    split: str
    n_seeds: int
    epoch: int
    top1_mean: float
    top1_std: float
    loss_mean: float
    trainable_params: int
    delta_head: float | None


_KEY = ("dataset", "regime", "rank", "every_k", "init", "alpha", "lr", "wd")


def aggregate(rows, split: str = "val") -> list[SummaryRow]:
    """Mean and population std of final-epoch metrics per configuration.

    ``delta_head`` is the mean minus the head-only mean on the same dataset
    (matching lr and wd when such a run exists); ``None`` with a warning when
    no head-only baseline is present.
    """
    rows = [r for r in rows if r.split == split]
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in _KEY), []).append(r)
    stats = {}
    for key, members in groups.items():
        last = max(r.epoch for r in members)
        final = {}
        for r in members:
            if r.epoch == last:
                final[(r.seed, r.run_id)] = r
        top1 = np.array([r.top1 for r in final.values()])
        loss = np.array([r.loss for r in final.values()])
        stats[key] = (last, top1, loss, members[0].trainable_params)

    def baseline(key):
        ds, _, _, _, _, _, lr, wd = key
        heads = [k for k in stats if k[0] == ds and k[1] == "head_only"]
        exact = [k for k in heads if k[6] == lr and k[7] == wd]
        pick = exact or heads
        return float(np.mean(stats[pick[0]][1])) if pick else None

    out = []
    warned = set()
    for key, (last, top1, loss, params) in stats.items():
        base = baseline(key)
        if base is None and key[0] not in warned:
            log.warning("no head-only baseline for dataset %s; delta omitted", key[0])
            warned.add(key[0])
        mean = float(np.mean(top1))
        out.append(
            SummaryRow(
                *key, split=split, n_seeds=int(top1.size), epoch=last, top1_mean=mean,
                top1_std=float(np.std(top1)), loss_mean=float(np.mean(loss)),
                trainable_params=params, delta_head=None if base is None else mean - base,
            )
        )
    return out


def rank_increments(summary):
    """Group adapter rows differing only in rank and run the elbow check on each."""
    families: dict = {}
    for s in summary:
        if s.regime != "adaptertune":
            continue
        fam = (s.dataset, s.every_k, s.init, s.alpha, s.lr, s.wd)
        families.setdefault(fam, []).append(s)
    out = []
    for fam, members in families.items():
        members.sort(key=lambda s: s.rank)
        curve = [(s.rank, s.top1_mean) for s in members]
        report = elbow_check(curve) if len(curve) >= 3 else None
        out.append((fam, curve, report))
    return out


SUMMARY_COLUMNS = tuple(f for f in SummaryRow.__dataclass_fields__)


def summary_to_csv(summary) -> str:
    """Machine-readable form of :func:`aggregate` output (empty delta when absent)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary:
        vals = []
        for name in SUMMARY_COLUMNS:
            v = getattr(s, name)
            vals.append("" if v is None else format(v, ".17g") if isinstance(v, float) else str(v))
        w.writerow(vals)
    return buf.getvalue()
