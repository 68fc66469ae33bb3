"""Synthetic classification data and forget/retain splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "SplitSpec",
    "DataView",
    "synthesize",
    "synthesize_pair",
    "blob_centers",
    "split_classwise",
    "split_random",
    "subsample",
    "load_csv",
    "write_csv",
]

Kind = Literal["blobs", "rings", "spiral"]

# Seed-stream tags keep the train and test draws disjoint.
_TRAIN_STREAM = 0
_TEST_STREAM = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    seed: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} disagree")
        if self.num_classes < 2:
            raise ValueError("a dataset needs at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def view(self, indices: Sequence[int] | None = None) -> "DataView":
        idx = np.arange(len(self)) if indices is None else np.asarray(indices, dtype=np.int64)
        return DataView(self, idx)


@dataclass(frozen=True, eq=False)
class DataView:
    """A subset of a dataset addressed by row indices."""

    dataset: Dataset
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def y(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


@dataclass(frozen=True, eq=False)
class SplitSpec:
    base: Dataset
    forget_indices: np.ndarray
    retain_indices: np.ndarray
    test: Dataset
    mode: Literal["classwise", "random"]
    forget_classes: tuple[int, ...] = ()
    per_class_count: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.forget_indices, dtype=np.int64)
        r = np.asarray(self.retain_indices, dtype=np.int64)
        n = len(self.base)
        if f.size == 0:
            raise ValueError("forget set is empty")
        both = np.concatenate([f, r])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ValueError("forget and retain indices must partition the dataset")
        object.__setattr__(self, "forget_indices", np.sort(f))
        object.__setattr__(self, "retain_indices", np.sort(r))

    @property
    def forget(self) -> DataView:
        return self.base.view(self.forget_indices)

    @property
    def retain(self) -> DataView:
        return self.base.view(self.retain_indices)

    @property
    def full(self) -> DataView:
        return self.base.view()

    def test_view(self) -> DataView:
        return self.test.view()


def blob_centers(classes: int, dim: int, radius: float, layout: str = "circle",
                 hub: int | None = None) -> np.ndarray:
    """Class means on a circle in the first two axes, along the first axis, or scaled one-hots.

    ``radius`` is the circle radius, the spacing between neighbours on the
    line, or the one-hot scale. With ``hub`` set, the other classes use the
    layout (shifted to be centred on the origin) and class ``hub`` sits at the
    origin, inside their convex hull.
    """
    if hub is not None:
        if not 0 <= hub < classes or classes < 3:
            raise ValueError("hub must name one of at least three classes")
        rest = blob_centers(classes - 1, dim, radius, layout)
        centers = np.zeros((classes, dim))
        centers[np.arange(classes) != hub] = rest - rest.mean(axis=0)
        return centers
    centers = np.zeros((classes, dim))
    if layout == "circle":
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    elif layout == "line":
        centers[:, 0] = radius * (np.arange(classes) - (classes - 1) / 2.0)
    elif layout == "simplex":
        if dim < classes:
            raise ValueError("simplex layout needs dim >= classes")
        centers[np.arange(classes), np.arange(classes)] = radius
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return centers


def _draw(kind: str, classes: int, per_class: int, dim: int, noise: float,
          rng: np.random.Generator, radius: float, layout: str,
          hub: int | None) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.arange(classes), per_class)
    n = labels.size
    if kind == "blobs":
        x = blob_centers(classes, dim, radius, layout, hub)[labels] + noise * rng.standard_normal((n, dim))
    elif kind == "rings":
        angle = rng.uniform(0.0, 2.0 * np.pi, n)
        r = radius * (1.0 + labels) / classes
        x = noise * rng.standard_normal((n, dim))
        x[:, 0] += r * np.cos(angle)
        x[:, 1] += r * np.sin(angle)
    elif kind == "spiral":
        t = rng.uniform(0.25, 1.0, n)
        angle = 2.0 * np.pi * (labels / classes + 0.75 * t)
        x = noise * rng.standard_normal((n, dim))
        x[:, 0] += radius * t * np.cos(angle)
        x[:, 1] += radius * t * np.sin(angle)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return x, labels


def synthesize(
    kind: Kind,
    classes: int,
    per_class: int,
    dim: int,
    noise: float,
    seed: int,
    *,
    part: Literal["train", "test"] = "train",
    radius: float = 5.0,
    layout: str = "circle",
    hub: int | None = None,
) -> Dataset:
    """Draw a labelled dataset; ``part="test"`` gives the paired held-out draw.

    The test part has ``per_class // 5`` samples per class and comes from a
    separate seed stream, so it never coincides with the training draw.
    ``radius``, ``layout`` and ``hub`` shape blob means (see :func:`blob_centers`);
    ``radius`` also scales rings and spirals.
    """
    if classes < 2 or per_class < 8 or dim < 2 or noise < 0:
        raise ValueError("need classes >= 2, per_class >= 8, dim >= 2, noise >= 0")
    if part not in ("train", "test"):
        raise ValueError(f"unknown part {part!r}")
    stream = _TRAIN_STREAM if part == "train" else _TEST_STREAM
    count = per_class if part == "train" else max(1, per_class // 5)
    rng = np.random.default_rng([seed, stream])
    x, y = _draw(kind, classes, count, dim, noise, rng, radius, layout, hub)
    return Dataset(x, y, classes, name=f"{kind}-{part}", seed=seed)


def synthesize_pair(kind: Kind, classes: int, per_class: int, dim: int, noise: float,
                    seed: int, **kw) -> tuple[Dataset, Dataset]:
    return (synthesize(kind, classes, per_class, dim, noise, seed, part="train", **kw),
            synthesize(kind, classes, per_class, dim, noise, seed, part="test", **kw))


def split_classwise(dataset: Dataset, forget_classes: Sequence[int], test: Dataset) -> SplitSpec:
    classes = sorted(set(int(c) for c in forget_classes))
    if not classes:
        raise ValueError("forget_classes is empty")
    if any(c < 0 or c >= dataset.num_classes for c in classes):
        raise ValueError("forget class outside the label range")
    if len(classes) >= dataset.num_classes:
        raise ValueError("cannot forget every class")
    in_forget = np.isin(dataset.labels, classes)
    return SplitSpec(dataset, np.flatnonzero(in_forget), np.flatnonzero(~in_forget), test,
                     mode="classwise", forget_classes=tuple(classes))


def split_random(dataset: Dataset, per_class_count: int, seed: int, test: Dataset) -> SplitSpec:
    counts = dataset.class_counts()
    if per_class_count < 1:
        raise ValueError("per_class_count must be at least 1")
    if per_class_count >= counts.min():
        raise ValueError(f"per_class_count {per_class_count} must be below the smallest class "
                         f"size {counts.min()}")
    rng = np.random.default_rng([seed, 17])
    chosen = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        chosen.append(rng.permutation(members)[:per_class_count])
    forget = np.sort(np.concatenate(chosen))
    retain = np.setdiff1d(np.arange(len(dataset)), forget)
    return SplitSpec(dataset, forget, retain, test, mode="random", per_class_count=per_class_count)


def _quotas(sizes: np.ndarray, fraction: float, total: int) -> np.ndarray:
    exact = sizes * fraction
    base = np.floor(exact).astype(np.int64)
    remainder = total - base.sum()
    # largest remainder first; ties go to the lower class index
    order = sorted(range(sizes.size), key=lambda c: (-(exact[c] - base[c]), c))
    for c in order[:max(remainder, 0)]:
        base[c] += 1
    return np.minimum(base, sizes)


def subsample(indices: Sequence[int], fraction: float, seed: int,
              labels: Sequence[int] | None = None) -> np.ndarray:
    """Choose ``ceil(fraction * len(indices))`` indices without replacement.

    When ``labels`` (aligned with ``indices``) are given the draw is stratified
    by class so per-class proportions are kept within one sample.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot subsample an empty index list")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    total = math.ceil(fraction * idx.size - 1e-9)
    rng = np.random.default_rng([seed, 29])
    if labels is None:
        return np.sort(rng.choice(idx, size=total, replace=False))
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != idx.shape:
        raise ValueError("labels must align with indices")
    classes = np.unique(lab)
    sizes = np.array([(lab == c).sum() for c in classes])
    quotas = _quotas(sizes, fraction, total)
    picked = [rng.choice(idx[lab == c], size=q, replace=False) for c, q in zip(classes, quotas)]
    return np.sort(np.concatenate(picked))


def load_csv(path: str | Path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Read ``f0,...,f{D-1},label`` rows into a dataset."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 1
        if dim < 1 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(dim)]:
            raise ValueError(f"{path}: header must be f0,...,f{{D-1}},label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    y = np.asarray(labels, dtype=np.int64)
    c = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(np.asarray(feats, dtype=np.float64).reshape(-1, dim), y, c,
                   name=name or path.stem)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
