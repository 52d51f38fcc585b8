"""Dataset ingestion, standardization, and the synthetic task generator.

CSV contract: UTF-8, comma separated, no header. Column 1 is the integer
class label (1-based); columns 2..D+1 are decimal feature values written
in shortest round-trip form. The distinct labels in a file must form a
contiguous integer run (class-increment files may start above 1, e.g.
labels {4, 5}).

The synthetic generator builds T tasks of growing class count C_t = t+1.
Class y of task t has mean sqrt(t) * sin(2*pi*y/C_t) in odd dimensions
and sqrt(t) * cos(2*pi*y/C_t) in even dimensions (1-based d), with
isotropic Gaussian noise of variance 0.5. Labels are uniform.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from exflow.errors import ConfigError, DataError

SCALE_FLOOR = 1e-8
NOISE_VAR = 0.5


class Dataset:
    """A labelled feature matrix for one task."""

    def __init__(self, features, labels, task_id=None, note=""):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=int)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("need exactly one label per feature row")
        self.task_id = task_id
        self.note = note

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def label_set(self):
        return sorted(set(self.labels.tolist()))


class SyntheticSpec:
    """Shape of the rotating-means benchmark generator."""

    def __init__(self, dim, n_tasks, task_size, noise_var=NOISE_VAR, seed=0,
                 test_size=1000):
        if dim < 2:
            raise ConfigError("synthetic dimension must be >= 2")
        if n_tasks < 1:
            raise ConfigError("need at least one task")
        if task_size < n_tasks + 1:
            raise ConfigError(
                "task_size must be at least the largest class count "
                f"(task {n_tasks} has {n_tasks + 1} classes)"
            )
        if noise_var <= 0:
            raise ConfigError("noise variance must be positive")
        self.dim = int(dim)
        self.n_tasks = int(n_tasks)
        self.task_size = int(task_size)
        self.noise_var = float(noise_var)
        self.seed = int(seed)
        self.test_size = int(test_size)

    def classes_of(self, t: int) -> int:
        return t + 1


def class_mean(t: int, y: int, n_classes: int, dim: int) -> np.ndarray:
    """Mean vector of class y in task t: alternating sin/cos pattern.

    Dimension index d runs 1-based: odd d carries sin, even d carries
    cos, both of 2*pi*y/C_t and scaled by sqrt(t).
    """
    angle = 2.0 * math.pi * y / n_classes
    mu = np.empty(dim)
    mu[0::2] = math.sin(angle)  # d = 1, 3, 5, ...
    mu[1::2] = math.cos(angle)  # d = 2, 4, 6, ...
    return math.sqrt(t) * mu


def _draw_task(spec, t, size, rng):
    c = spec.classes_of(t)
    ys = rng.integers(1, c + 1, size=size)
    xs = np.empty((size, spec.dim))
    sd = math.sqrt(spec.noise_var)
    for y in range(1, c + 1):
        mask = ys == y
        xs[mask] = class_mean(t, y, c, spec.dim) + sd * rng.normal(
            size=(int(mask.sum()), spec.dim)
        )
    return Dataset(xs, ys, task_id=t, note=f"synthetic task {t} ({c} classes)")


def generate_synthetic(spec: SyntheticSpec, rng=None):
    """(train sets, test sets), one per task, from the same process."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    trains, tests = [], []
    for t in range(1, spec.n_tasks + 1):
        trains.append(_draw_task(spec, t, spec.task_size, rng))
        tests.append(_draw_task(spec, t, spec.test_size, rng))
    return trains, tests


def load_dataset(path, declared_dimension, task_id=None) -> Dataset:
    """Parse a CSV per the contract; errors carry the offending row number."""
    dim = int(declared_dimension)
    feats, labels = [], []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataError(
                    f"{path} row {rownum}: expected {dim + 1} columns "
                    f"(label + {dim} features), got {len(row)}"
                )
            raw = row[0].strip()
            try:
                label = int(raw)
            except ValueError:
                raise DataError(f"{path} row {rownum}: label {raw!r} is not an integer")
            if label < 1:
                raise DataError(f"{path} row {rownum}: label {label} (labels are 1-based)")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path} row {rownum}: bad feature value ({exc})")
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path} row {rownum}: non-finite feature value")
            labels.append(label)
            feats.append(vals)
    if not feats:
        raise DataError(f"{path}: no data rows")
    distinct = sorted(set(labels))
    if distinct[-1] - distinct[0] + 1 != len(distinct):
        raise DataError(
            f"{path}: labels {distinct} do not form a contiguous run"
        )
    return Dataset(np.array(feats), np.array(labels), task_id=task_id,
                   note=f"loaded from {path}")


def save_dataset(ds: Dataset, path) -> None:
    """Write the CSV contract with shortest round-trip float formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for i in range(len(ds)):
            fields = [str(int(ds.labels[i]))]
            fields += [repr(float(v)) for v in ds.features[i]]
            fh.write(",".join(fields))
            fh.write("\n")


class Standardizer:
    """Per-dimension affine transform fit on training data only."""

    def __init__(self, offset, scale):
        self.offset = np.asarray(offset, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, features):
        offset = features.mean(axis=0)
        scale = np.maximum(features.std(axis=0), SCALE_FLOOR)
        return cls(offset, scale)

    def is_identity(self):
        return bool(np.all(self.offset == 0.0) and np.all(self.scale == 1.0))

    def apply(self, features):
        return (features - self.offset) / self.scale

    def invert(self, features):
        return features * self.scale + self.offset


def standardize(train: Dataset, others=()):
    """Zero-mean unit-scale transform from train stats, applied everywhere.

    Returns (transformed train, list of transformed others, transform).
    Constant columns hit the scale floor and map to zero.
    """
    if len(train) == 0:
        raise DataError("cannot standardize an empty training set")
    tf = Standardizer.fit(train.features)
    new_train = Dataset(tf.apply(train.features), train.labels,
                        task_id=train.task_id, note=train.note)
    new_others = [
        Dataset(tf.apply(ds.features), ds.labels, task_id=ds.task_id, note=ds.note)
        for ds in others
    ]
    return new_train, new_others, tf
