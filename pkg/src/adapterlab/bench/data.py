"""Datasets, stratified deterministic splits and the planted-shift task."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numkernel import make_rng, matmul

__all__ = ["Dataset", "PlantedShiftTask", "make_planted_task", "deterministic_split"]

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Fixed-dimension inputs with integer labels and per-example split tags.

    ``splits`` holds one of ``train``/``val``/``test`` per example; a dataset
    built without tags treats everything as training data.
    """

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per input required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.splits is None:
            self.splits = np.full(self.labels.size, "train", dtype="<U5")
        else:
            self.splits = np.asarray(self.splits, dtype="<U5")
            bad = set(np.unique(self.splits)) - set(SPLITS)
            if bad or self.splits.shape != self.labels.shape:
                raise ValueError(f"invalid split tags {sorted(bad)}")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def split(self, tag: str):
        mask = self.splits == tag
        return self.inputs[mask], self.labels[mask]


def deterministic_split(data: Dataset, fractions=(0.8, 0.2, 0.0), seed: int = 0) -> Dataset:
    """Tag each example train/val/test, stratified by class.

    Within each class the examples are permuted by a generator derived from
    ``(seed, class)`` and cut at rounded cumulative fractions, so per-class
    counts are within one item of ``fraction * class_size``.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    tags = np.empty(len(data), dtype="<U5")
    cum = np.cumsum(fr)
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            continue
        idx = idx[make_rng(seed, 0x5B1, c).permutation(idx.size)]
        cuts = np.rint(cum * idx.size).astype(int)
        cuts[-1] = idx.size
        start = 0
        for tag, stop in zip(SPLITS, cuts):
            tags[idx[start:stop]] = tag
            start = stop
    return Dataset(data.name, data.inputs, data.labels, data.n_classes, tags)


@dataclass
class PlantedShiftTask:
    """Source/target pair whose labelings differ by a known feature shift.

    Features are ``phi(x) = tanh(x @ feature_map.T)``. Source labels are
    ``argmax(labeler @ phi + noise)``; target labels are
    ``argmax(labeler @ (I + delta) @ phi + noise)``.
    """

    source: Dataset
    target: Dataset
    shift: object
    feature_map: np.ndarray
    labeler: np.ndarray
    noise: float = 0.0
    meta: dict = field(default_factory=dict)

    def features(self, X):
        return np.tanh(matmul(np.asarray(X, dtype=np.float64), self.feature_map.T))

    def source_logits(self, X):
        return matmul(self.features(X), self.labeler.T)

    def shifted_features(self, X):
        phi = self.features(X)
        return phi + matmul(phi, self.shift.delta.T)

    def target_logits(self, X):
        return matmul(self.shifted_features(X), self.labeler.T)


def _balanced_draw(name, logits_fn, d_in, C, n_per_class, noise, rng, batch=4096):
    counts = np.zeros(C, dtype=int)
    xs, ys = [], []
    while counts.min() < n_per_class:
        X = rng.normal(size=(batch, d_in))
        logits = logits_fn(X)
        if noise > 0:
            logits = logits + noise * rng.normal(size=logits.shape)
        y = np.argmax(logits, axis=1)
        for xi, yi in zip(X, y):
            if counts[yi] < n_per_class:
                counts[yi] += 1
                xs.append(xi)
                ys.append(yi)
    X = np.array(xs)
    y = np.array(ys, dtype=np.int64)
    order = np.lexsort((np.arange(y.size), y))
    return Dataset(name, X[order], y[order], C)


def make_planted_task(
    d_in: int,
    C: int,
    n_per_class: int,
    shift,
    noise: float = 0.05,
    rng=None,
    name: str = "planted",
    source_per_class: int | None = None,
) -> PlantedShiftTask:
    """Draw a planted-shift source/target pair.

    ``shift.delta`` is ``d x d``; the frozen random feature map takes
    ``d_in`` inputs to ``d`` features. Inputs for each side come from
    independent child generators of ``rng``, and classes are balanced by
    rejection to exactly ``n_per_class`` examples each (``source_per_class``
    for the source side when given).
    """
    if C < 2 or n_per_class < 1:
        raise ValueError("need C >= 2 and n_per_class >= 1")
    if rng is None:
        raise ValueError("make_planted_task needs an rng")
    d = shift.delta.shape[0]
    feature_map = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d, d_in))
    labeler = rng.normal(size=(C, d))
    src_rng, tgt_rng = rng.spawn(2)
    task = PlantedShiftTask(
        source=Dataset(f"{name}-source", np.zeros((0, d_in)), np.zeros(0), C),
        target=Dataset(f"{name}-target", np.zeros((0, d_in)), np.zeros(0), C),
        shift=shift,
        feature_map=feature_map,
        labeler=labeler,
        noise=noise,
    )
    n_src = n_per_class if source_per_class is None else source_per_class
    task.source = _balanced_draw(f"{name}-source", task.source_logits, d_in, C, n_src, noise, src_rng)
    task.target = _balanced_draw(f"{name}-target", task.target_logits, d_in, C, n_per_class, noise, tgt_rng)
    return task
