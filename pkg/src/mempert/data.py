"""Datasets: CSV ingestion and seeded synthetic generators."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidParameter, LabelError, ParseError


class Task(str, enum.Enum):
    REGRESSION = "regression"
    BINARY = "binary"
    MULTICLASS = "multiclass"


@dataclass(frozen=True)
class Dataset:
    """Features ``X`` (N x D), labels ``y`` and the L2 strength ``delta``.

    Class labels are stored as integer indices; models one-hot encode them.
    """

    X: np.ndarray
    y: np.ndarray
    task: Task
    delta: float = 1.0
    n_classes: int = 1

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        task = Task(self.task)
        y = np.asarray(self.y, dtype=float if task is Task.REGRESSION else int).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InvalidParameter(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if X.shape[1] < 1:
            raise InvalidParameter("need at least one feature")
        if self.delta < 0:
            raise InvalidParameter("delta must be non-negative")
        n_classes = self.n_classes
        if task is Task.BINARY:
            n_classes = 2
            if y.size and not np.isin(y, (0, 1)).all():
                raise LabelError("binary labels must be 0 or 1")
        elif task is Task.MULTICLASS:
            if n_classes < 2:
                n_classes = int(y.max()) + 1 if y.size else 2
            if y.size and (y.min() < 0 or y.max() >= n_classes):
                raise LabelError(f"class indices must lie in [0, {n_classes})")
        else:
            n_classes = 1
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "n_classes", n_classes)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=int)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def without(self, idx) -> Dataset:
        keep = np.setdiff1d(np.arange(self.n), np.asarray(list(idx), dtype=int))
        return self.subset(keep)

    def with_delta(self, delta: float) -> Dataset:
        return replace(self, delta=float(delta))


@dataclass
class DataConfig:
    """Where data comes from. ``kind`` is ``csv`` or one of the synthetic generators."""

    kind: str = "blobs"
    path: str | None = None
    task: str | None = None
    n: int = 200
    dim: int = 2
    n_classes: int = 2
    noise: float = 1.0
    class_noise: list[float] | None = None
    n_test: int = 1000
    test_fraction: float = 0.0
    standardize: bool = False
    bias: bool = False
    delta: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.test_fraction < 1:
            raise InvalidParameter("test_fraction must lie in [0, 1)")
        if self.n < 1 or self.dim < 1 or self.n_classes < 1:
            raise InvalidParameter("n, dim, n_classes must be >= 1")
        if self.kind not in GENERATORS and self.kind != "csv":
            raise InvalidParameter(f"unknown data kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise InvalidParameter("csv data needs a path")


# ---------------------------------------------------------------- generators


def _linear(rng, n, cfg):
    w = rng.standard_normal(cfg.dim)
    X = rng.standard_normal((n, cfg.dim))
    y = X @ w + cfg.noise * rng.standard_normal(n)
    return X, y, Task.REGRESSION, 1


def _class_means(n_classes, dim, radius=3.0):
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    if dim > 1:
        means[:, 1] = radius * np.sin(angles)
    return means


def _blobs(rng, n, cfg):
    c = max(cfg.n_classes, 2)
    means = _class_means(c, cfg.dim)
    scales = np.full(c, cfg.noise) if cfg.class_noise is None else cfg.noise * np.asarray(cfg.class_noise)
    if scales.shape != (c,):
        raise InvalidParameter("class_noise needs one entry per class")
    y = np.arange(n) % c
    rng.shuffle(y)
    X = means[y] + scales[y, None] * rng.standard_normal((n, cfg.dim))
    return X, y, (Task.BINARY if c == 2 else Task.MULTICLASS), c


def _two_gaussians(rng, n, cfg):
    # overlapping pair of Gaussians in cfg.dim dimensions, signal along a random direction
    direction = rng.standard_normal(cfg.dim)
    direction /= np.linalg.norm(direction)
    y = (np.arange(n) % 2)
    rng.shuffle(y)
    X = cfg.noise * rng.standard_normal((n, cfg.dim)) + np.outer(2 * y - 1, direction)
    return X, y, Task.BINARY, 2


def _moons(rng, n, cfg):
    y = np.arange(n) % 2
    rng.shuffle(y)
    t = rng.uniform(0, np.pi, n)
    X = np.zeros((n, max(cfg.dim, 2)))
    X[:, 0] = np.where(y == 0, np.cos(t), 1 - np.cos(t))
    X[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
    X += 0.1 * cfg.noise * rng.standard_normal(X.shape)
    return X, y, Task.BINARY, 2


GENERATORS = {"linear": _linear, "blobs": _blobs, "two_gaussians": _two_gaussians, "moons": _moons}


def _finish(X, y, task, n_classes, cfg, rows_train, rows_test):
    mk = lambda rows: Dataset(X[rows], y[rows], task, cfg.delta, n_classes)
    train, test = mk(rows_train), mk(rows_test)
    if cfg.standardize:
        train, test = standardize(train, test)
    if cfg.bias:
        train, test = add_bias(train), add_bias(test)
    return train, test


def synthesize(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Generate ``cfg.n`` training rows plus ``cfg.n_test`` held-out rows."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n + cfg.n_test
    X, y, task, c = GENERATORS[cfg.kind](rng, total, cfg)
    rows = np.arange(total)
    return _finish(X, y, task, c, cfg, rows[: cfg.n], rows[cfg.n :])


def load(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Resolve a DataConfig into (train, test)."""
    cfg.validate()
    if cfg.kind != "csv":
        return synthesize(cfg)
    full = load_csv(cfg.path, cfg.task or "regression", cfg.delta)
    rows_train, rows_test = split_indices(full.n, cfg.test_fraction, cfg.seed)
    return _finish(full.X, full.y, full.task, full.n_classes, cfg, rows_train, rows_test)


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= test_fraction < 1:
        raise InvalidParameter("test_fraction must lie in [0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(math.floor(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def standardize(train: Dataset, test: Dataset | None = None):
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    tr = replace(train, X=(train.X - mu) / sd)
    if test is None:
        return tr
    return tr, replace(test, X=(test.X - mu) / sd)


def add_bias(data: Dataset) -> Dataset:
    return replace(data, X=np.hstack([data.X, np.ones((data.n, 1))]))


def class_indices(data: Dataset, c: int) -> np.ndarray:
    return np.flatnonzero(data.y == c)


# ----------------------------------------------------------------------- csv


def load_csv(path: str | Path, task: str | Task, delta: float = 1.0) -> Dataset:
    """Read ``f0,f1,...,y`` rows. Class labels must be contiguous from 0."""
    task = Task(task)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        feats = [j for j, h in enumerate(header) if h.startswith("f")]
        if "y" not in header or not feats:
            raise ParseError("header must contain f* feature columns and a y column", line=1)
        ycol = header.index("y")
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                X.append([float(row[j]) for j in feats])
                y.append(float(row[ycol]))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not X:
        raise ParseError("no data rows", line=2)
    y = np.asarray(y)
    n_classes = 1
    if task is not Task.REGRESSION:
        if not np.all(y == np.round(y)):
            raise LabelError("class labels must be integers")
        labels = np.unique(y.astype(int))
        if labels[0] != 0 or not np.array_equal(labels, np.arange(labels.size)):
            raise LabelError(f"class labels must be contiguous from 0, got {labels.tolist()}")
        n_classes = max(labels.size, 2)
        y = y.astype(int)
    return Dataset(np.asarray(X), y, task, delta, n_classes)


def save_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(data.dim)] + ["y"])
        for xi, yi in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi)) if data.task is Task.REGRESSION else int(yi)])
