"""Per-epoch metrics records and their CSV representation."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields, replace

from .exceptions import SchemaError

CSV_COLUMNS = (
    "run_id", "dataset", "regime", "rank", "every_k", "init", "alpha", "lr", "wd",
    "seed", "epoch", "split", "loss", "top1", "trainable_params", "wall_ms",
)


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    dataset: str
    regime: str
    rank: int
    every_k: int
    init: str
    alpha: float
    lr: float
    wd: float
    seed: int
    epoch: int
    split: str
    loss: float
    top1: float
    trainable_params: int
    wall_ms: int = 0

    def __post_init__(self):
        for name in _FLOAT_COLS:
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in _INT_COLS:
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (0.0 <= self.top1 <= 100.0) and self.top1 == self.top1:
            raise ValueError(f"top1 must lie in [0, 100], got {self.top1}")


_INT_COLS = {f.name for f in fields(MetricsRow) if f.type == "int"}
_FLOAT_COLS = {f.name for f in fields(MetricsRow) if f.type == "float"}


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def rows_to_csv(rows, zero_wall: bool = False) -> str:
    """Serialise rows; floats use 17 significant digits (round-trip exact).

    ``zero_wall`` writes 0 in the ``wall_ms`` column, the canonical form for
    determinism comparisons.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        if zero_wall:
            row = replace(row, wall_ms=0)
        w.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue()


def write_csv(rows, path, zero_wall: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows, zero_wall=zero_wall))


def read_csv(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if tuple(header) != CSV_COLUMNS:
            for i, col in enumerate(header):
                if i >= len(CSV_COLUMNS) or col != CSV_COLUMNS[i]:
                    raise SchemaError(f"{path}: unexpected column {col!r} at position {i}")
            raise SchemaError(f"{path}: missing column {CSV_COLUMNS[len(header)]!r}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_COLUMNS):
                raise SchemaError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            kw = {}
            for col, val in zip(CSV_COLUMNS, rec):
                if col in _INT_COLS:
                    kw[col] = int(val)
                elif col in _FLOAT_COLS:
                    kw[col] = float(val)
                else:
                    kw[col] = val
            rows.append(MetricsRow(**kw))
    return rows
