"""Labeled traffic-feature datasets: synthetic generation, CSV I/O,
standardization, stratified splitting and PCA projection.

Labels are 0-based in memory and 1-based on disk (Normal=1, BP=2, DoS=3, FoT=4).
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError


class ClassLabel(enum.IntEnum):
    NORMAL = 1
    BP = 2
    DOS = 3
    FOT = 4

    @property
    def index(self) -> int:
        return int(self) - 1


DEFAULT_CLASSES = len(ClassLabel)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of samples. ``labels`` holds 0-based class indices."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = DEFAULT_CLASSES
    provenance: str = ""

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DataError(f"features must be a 2-D array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError("one label per sample required")
        if self.n_classes < 2:
            raise DataError("need at least 2 classes")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels out of range for {self.n_classes} classes")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx, provenance=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes,
                       self.provenance if provenance is None else provenance)

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels, self.n_classes, self.provenance)

    def canonical(self) -> "Dataset":
        """Rows sorted by (features, label); independent of the input order."""
        keys = [self.labels] + [self.features[:, j] for j in range(self.feature_dim - 1, -1, -1)]
        return self.subset(np.lexsort(keys))


def concat(datasets: Sequence[Dataset], provenance="concat") -> Dataset:
    if not datasets:
        raise DataError("nothing to concatenate")
    dims = {d.feature_dim for d in datasets}
    classes = {d.n_classes for d in datasets}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dimensions: {sorted(dims)}")
    if len(classes) != 1:
        raise DataError("inconsistent class counts")
    return Dataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        classes.pop(),
        provenance,
    )


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic traffic-feature generator.

    ``per_class`` is either one count per class (used for every node) or one
    such tuple per node. ``overlap`` in [0, 1] pulls the BP and FoT clusters
    onto the Normal cluster; DoS stays well separated. ``node_shift`` moves
    each node's Normal cluster by a node-specific offset of that length.
    Explicit ``means`` (U x d) and ``covariances`` (U x d x d) override the
    generated geometry.
    """

    nodes: int = 3
    per_class: tuple = (3000, 300, 300, 300)
    feature_dim: int = 10
    overlap: float = 0.5
    node_shift: float = 0.0
    seed: int = 0
    means: np.ndarray | None = field(default=None, compare=False)
    covariances: np.ndarray | None = field(default=None, compare=False)

    def node_counts(self) -> list[tuple[int, ...]]:
        pc = tuple(self.per_class)
        if pc and all(isinstance(c, (int, np.integer)) for c in pc):
            return [tuple(int(c) for c in pc)] * self.nodes
        rows = [tuple(int(c) for c in row) for row in pc]
        if len(rows) != self.nodes:
            raise ConfigError(f"per_class lists {len(rows)} nodes, config has {self.nodes}")
        return rows

    @property
    def n_classes(self) -> int:
        return len(self.node_counts()[0])

    def validate(self):
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError("overlap must lie in [0, 1]")
        if self.node_shift < 0:
            raise ConfigError("node_shift must be >= 0")
        rows = self.node_counts()
        u = len(rows[0])
        if u < 2 or any(len(r) != u for r in rows):
            raise ConfigError("every node needs the same number (>= 2) of class counts")
        if any(c < 0 for r in rows for c in r):
            raise ConfigError("class counts must be >= 0")
        if self.means is not None and np.shape(self.means) != (u, self.feature_dim):
            raise ConfigError(f"means must have shape ({u}, {self.feature_dim})")
        if self.covariances is not None and np.shape(self.covariances) != (u, self.feature_dim, self.feature_dim):
            raise ConfigError(f"covariances must have shape ({u}, {self.feature_dim}, {self.feature_dim})")


# Distance of the overlapping attack clusters from Normal at overlap = 0, and
# of the DoS cluster regardless of overlap (in units of cluster std).
_NEAR_DISTANCE = 4.0
_FAR_DISTANCE = 8.0


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def cluster_geometry(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class means (U x d) and covariances (U x d x d) for a config."""
    config.validate()
    u, d = config.n_classes, config.feature_dim
    rng = np.random.default_rng([config.seed, 0])
    means = np.zeros((u, d))
    dos = ClassLabel.DOS.index
    for c in range(1, u):
        dist = _FAR_DISTANCE if c == dos else _NEAR_DISTANCE * (1.0 - config.overlap)
        means[c] = dist * _unit(rng, d)
    covs = np.empty((u, d, d))
    for c in range(u):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        covs[c] = (q * rng.uniform(0.5, 1.5, size=d)) @ q.T
    if config.means is not None:
        means = np.array(config.means, dtype=float)
    if config.covariances is not None:
        covs = np.array(config.covariances, dtype=float)
    return means, covs


def generate_synthetic(config: SynthConfig) -> list[Dataset]:
    """One dataset per node, drawn from per-class Gaussian clusters.

    Samples are grouped by class in label order. Output depends only on
    ``config``.
    """
    config.validate()
    means, covs = cluster_geometry(config)
    chols = []
    for c, cov in enumerate(covs):
        if not np.allclose(cov, cov.T):
            raise ConfigError(f"covariance of class {c + 1} is not symmetric")
        try:
            chols.append(np.linalg.cholesky(cov))
        except np.linalg.LinAlgError:
            raise ConfigError(f"covariance of class {c + 1} is not positive definite") from None

    u, d = config.n_classes, config.feature_dim
    out = []
    for node, counts in enumerate(config.node_counts(), start=1):
        rng = np.random.default_rng([config.seed, node])
        shift = config.node_shift * _unit(rng, d) if config.node_shift > 0 else np.zeros(d)
        xs, ys = [], []
        for c in range(u):
            mu = means[c] + (shift if c == ClassLabel.NORMAL.index else 0.0)
            z = rng.normal(size=(counts[c], d))
            xs.append(mu + z @ chols[c].T)
            ys.append(np.full(counts[c], c))
        out.append(Dataset(np.concatenate(xs), np.concatenate(ys), u,
                           f"synthetic seed={config.seed} node={node}"))
    return out


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------


def _header(d, with_label=True):
    cols = [f"f{j}" for j in range(d)]
    return cols + ["label"] if with_label else cols


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(dataset.feature_dim))
        for x, y in zip(dataset.features.tolist(), dataset.labels.tolist()):
            w.writerow([repr(v) for v in x] + [y + 1])


def _parse_header(row, path):
    if not row:
        raise ParseError("missing header", 1, path)
    has_label = row[-1].strip() == "label"
    cols = row[:-1] if has_label else row
    for j, name in enumerate(cols):
        if name.strip() != f"f{j}":
            raise ParseError(f"unexpected column name {name!r} (expected 'f{j}')", 1, path)
    if not cols:
        raise ParseError("no feature columns", 1, path)
    return len(cols), has_label


def iter_records(fh, n_classes=DEFAULT_CLASSES, expected_dim=None, path=None,
                 require_label=False) -> Iterator[tuple[int, np.ndarray, int | None]]:
    """Yield ``(line, features, label_index_or_None)`` from a CSV stream."""
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1, path) from None
    d, has_label = _parse_header(header, path)
    if require_label and not has_label:
        raise ParseError("label column required", 1, path)
    if expected_dim is not None and d != expected_dim:
        raise ParseError(f"file has {d} features, expected {expected_dim}", 1, path)
    width = d + 1 if has_label else d
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", line, path)
        try:
            x = np.array([float(v) for v in row[:d]])
        except ValueError as exc:
            raise ParseError(f"non-numeric feature ({exc})", line, path) from None
        if not np.all(np.isfinite(x)):
            raise ParseError("non-finite feature value", line, path)
        label = None
        if has_label:
            try:
                value = int(row[d])
            except ValueError:
                raise ParseError(f"label {row[d]!r} is not an integer", line, path) from None
            if not 1 <= value <= n_classes:
                raise ParseError(f"label {value} outside 1..{n_classes}", line, path)
            label = value - 1
        yield line, x, label


def load_csv(path, expected_dim=None, n_classes=DEFAULT_CLASSES) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        return read_csv(fh, expected_dim, n_classes, path=str(path))


def read_csv(fh, expected_dim=None, n_classes=DEFAULT_CLASSES, path=None) -> Dataset:
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    xs, ys = [], []
    d = expected_dim
    for _, x, y in iter_records(fh, n_classes, expected_dim, path, require_label=True):
        xs.append(x)
        ys.append(y)
        d = x.shape[0]
    if not xs:
        features = np.empty((0, d or 0))
    else:
        features = np.vstack(xs)
    return Dataset(features, np.array(ys, dtype=np.int64), n_classes, str(path or "<stream>"))


def node_files(directory) -> list[Path]:
    """``node{l}.csv`` files in a directory, ordered by l."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    found = {}
    for p in directory.glob("node*.csv"):
        stem = p.stem[4:]
        if stem.isdigit():
            found[int(stem)] = p
    if not found:
        raise DataError(f"{directory}: no node*.csv files")
    return [found[k] for k in sorted(found)]


# --------------------------------------------------------------------------
# Standardization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    means: np.ndarray
    stds: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.means) / self.stds

    def transform(self, dataset: Dataset) -> Dataset:
        if dataset.feature_dim != self.means.shape[0]:
            raise DataError(f"scaler fitted on {self.means.shape[0]} features, data has {dataset.feature_dim}")
        return dataset.with_features(self.apply(dataset.features))

    def to_dict(self):
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, obj):
        means = np.array(obj["means"], dtype=float)
        stds = np.array(obj["stds"], dtype=float)
        if means.shape != stds.shape or np.any(stds <= 0):
            raise DataError("invalid scaler parameters")
        return cls(means, stds)


def fit_scaler(train: Dataset) -> ScalerParams:
    if len(train) == 0:
        raise DataError("cannot fit a scaler on an empty dataset")
    means = train.features.mean(axis=0)
    stds = train.features.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    return ScalerParams(means, stds)


def standardize(train: Dataset, others: Sequence[Dataset] = ()):
    """Fit population mean/std on ``train``; apply to ``train`` and ``others``."""
    params = fit_scaler(train)
    return params, params.transform(train), [params.transform(o) for o in others]


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------


def split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0):
    """Stratified train/test split: ``round(test_fraction * count)`` test rows per class."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DataError(f"class {c + 1} has fewer than 2 samples; cannot stratify")
        idx = rng.permutation(idx)
        n_test = int(math.floor(test_fraction * idx.size + 0.5))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx)) if train_idx else np.empty(0, dtype=np.int64)
    te = np.sort(np.concatenate(test_idx)) if test_idx else np.empty(0, dtype=np.int64)
    return dataset.subset(tr), dataset.subset(te)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaResult:
    points: np.ndarray
    components: np.ndarray  # k x d, rows orthonormal
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    mean: np.ndarray


def pca_project(data, k: int) -> PcaResult:
    """Project onto the top-k principal components of the centered data.

    Component signs are fixed so the largest-magnitude entry is positive.
    """
    x = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("PCA needs a non-empty 2-D dataset")
    d = x.shape[1]
    if not 1 <= k <= d:
        raise ConfigError(f"k must lie in 1..{d}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T
    for row in vecs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    total = vals.sum()
    ratio = vals / total if total > 0 else np.zeros_like(vals)
    comps = vecs[:k]
    return PcaResult(xc @ comps.T, comps, vals[:k], ratio[:k], mean)


def write_pca_csv(result: PcaResult, labels, path) -> None:
    """``pc0,...,pc{k-1},label`` with 1-based labels."""
    k = result.points.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"pc{j}" for j in range(k)] + ["label"])
        for p, y in zip(result.points.tolist(), np.asarray(labels).tolist()):
            w.writerow([repr(v) for v in p] + [int(y) + 1])
