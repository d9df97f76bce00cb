"""Labeled data containers, CSV ingestion, preprocessing and minibatching."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "Standardization",
    "MinibatchSchedule",
    "load_csv",
    "load_features",
    "save_csv",
    "load_pima",
    "make_blobs",
    "standardize",
    "split",
    "init_inducing",
]


class DataError(ValueError):
    """Raised when input data cannot be parsed or violates the label contract."""


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` of shape (n, d) with labels ``y`` in {-1, +1}."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"inputs must be a non-empty 2-D array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if not np.all(np.isfinite(X)):
            raise DataError("inputs contain non-finite values")
        if not np.all((y == 1) | (y == -1)):
            raise DataError("labels must be -1 or +1")
        X.setflags(write=False)
        y = y.astype(np.int8)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class Standardization:
    """Per-feature affine map ``(x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def invert(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardization":
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["scale"], dtype=float))

    @classmethod
    def identity(cls, d: int) -> "Standardization":
        return cls(np.zeros(d), np.ones(d))


def _encode_labels(raw, where=None):
    raw = np.asarray(raw, dtype=float)
    values = set(np.unique(raw).tolist())
    if values <= {-1.0, 1.0}:
        return raw.astype(np.int8)
    if values <= {0.0, 1.0}:
        return np.where(raw > 0, 1, -1).astype(np.int8)
    bad = sorted(values - {-1.0, 0.0, 1.0})
    raise DataError(f"labels{where or ''} outside accepted encodings {{-1,+1}} or {{0,1}}: {bad[:5]}")


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _read_table(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    start = 0
    if not all(_is_number(c.strip()) for c in rows[0]):
        start = 1
    width = len(rows[0])
    values = np.empty((len(rows) - start, width))
    for r, row in enumerate(rows[start:]):
        if len(row) != width:
            raise DataError(f"{path}: row {r + start + 1} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: cannot parse {cell!r} at row {r + start + 1}, column {c}"
                ) from None
    if values.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    return values


def load_csv(path, label_column: int) -> Dataset:
    """Read a comma-separated file; the header row is detected automatically.

    Row order is preserved. Parse errors name the offending 1-based file row and
    0-based column.
    """
    values = _read_table(path)
    width = values.shape[1]
    col = label_column if label_column >= 0 else width + label_column
    if not 0 <= col < width:
        raise DataError(f"{path}: label column {label_column} out of range for {width} columns")
    y = _encode_labels(values[:, col], where=f" in column {col}")
    X = np.delete(values, col, axis=1)
    return Dataset(X, y)


def load_features(path) -> np.ndarray:
    """Unlabeled inputs, one row per instance."""
    X = _read_table(path)
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: inputs contain non-finite values")
    return X


def save_csv(data: Dataset, path, header=None) -> None:
    """Write ``data`` with the label in the last column, using round-trip float repr."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_pima() -> Dataset:
    """The 768-instance Pima Indians diabetes data shipped with the package."""
    ref = resources.files("sepgp") / "data" / "pima.csv"
    with resources.as_file(ref) as p:
        return load_csv(p, label_column=-1)


def make_blobs(n: int, seed: int = 0, centers_per_class: int = 3, spread: float = 0.6) -> Dataset:
    """Two classes, each a mixture of isotropic Gaussian blobs in the plane.

    Blob centres are drawn from a fixed generator so that datasets produced with
    different ``seed`` values (and sizes) share the same underlying distribution.
    """
    centres = np.random.default_rng(12345).uniform(-3, 3, size=(2, centers_per_class, 2))
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1, -1)
    which = rng.integers(centers_per_class, size=n)
    X = centres[(y > 0).astype(int), which] + spread * rng.standard_normal((n, 2))
    return Dataset(X, y)


def standardize(data: Dataset, enabled: bool = True) -> tuple[Dataset, Standardization]:
    """Center and scale each feature to unit sample standard deviation.

    Constant features keep scale 1 and map to 0. With ``enabled=False`` the
    identity map is returned.
    """
    if not enabled:
        return data, Standardization.identity(data.d)
    if data.n < 2:
        raise DataError("standardization needs at least two rows")
    mean = data.X.mean(axis=0)
    scale = data.X.std(axis=0, ddof=1)
    scale = np.where(scale > 0, scale, 1.0)
    st = Standardization(mean, scale)
    return Dataset(st.apply(data.X), data.y), st


def split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test partition with ``round(n * test_fraction)`` test rows."""
    if not 0 < test_fraction < 1:
        raise DataError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = data.n
    n_test = min(max(math.floor(n * test_fraction + 0.5), 1), n - 1)
    if n_test < 1 or n - n_test < 1:
        raise DataError(f"cannot split {n} rows into two non-empty parts")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


def init_inducing(data: Dataset, m: int, seed: int) -> np.ndarray:
    """Pick ``m`` distinct training rows (by index) as initial inducing points."""
    if not 1 <= m <= data.n:
        raise DataError(f"need 1 <= m <= n, got m={m}, n={data.n}")
    idx = np.random.default_rng(seed).choice(data.n, size=m, replace=False)
    return data.X[idx].copy()


@dataclass
class MinibatchSchedule:
    """Seeded epoch-wise permutation split into consecutive batches."""

    n: int
    batch_size: int
    seed: int = 0
    epoch: int = 0
    n_inducing: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.n_inducing is not None and self.batch_size > self.n_inducing:
            warnings.warn(
                f"minibatch size {self.batch_size} exceeds the number of inducing points "
                f"{self.n_inducing}",
                stacklevel=3,
            )

    def batches(self):
        """Index arrays for the current epoch; advances the epoch counter when exhausted."""
        perm = np.random.default_rng([self.seed, self.epoch]).permutation(self.n)
        for start in range(0, self.n, self.batch_size):
            yield perm[start:start + self.batch_size]
        self.epoch += 1
