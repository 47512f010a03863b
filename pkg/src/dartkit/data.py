"""Synthetic domain-shift generators, CSV ingestion and minibatch streams.

Training code only ever receives a :class:`TrainingView` (source + unlabeled
target) or a :class:`TargetView` (unlabeled target only); neither carries the
target ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

GENERATORS = ("two_moons_rotate", "gaussian_mixture_shift")


class CsvError(ValueError):
    """CSV ingestion failure carrying a file/row/column location."""

    def __init__(self, message, path=None, row=None, column=None):
        loc = ", ".join(
            p for p in (
                str(path) if path is not None else None,
                f"row {row}" if row is not None else None,
                f"column {column}" if column is not None else None,
            ) if p
        )
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path, self.row, self.column = path, row, column


class MissingColumnError(CsvError):
    pass


class NonNumericCellError(CsvError):
    pass


class EmptyFileError(CsvError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


def compute_bounds(*arrays: np.ndarray) -> np.ndarray:
    """Per-feature ``(low, high)`` over the union of the given arrays, shape (d, 2)."""
    stacked = np.vstack(arrays)
    return np.stack([stacked.min(axis=0), stacked.max(axis=0)], axis=1)


@dataclass(frozen=True)
class TrainingView:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    classes: int
    feature_bounds: np.ndarray

    def target_view(self) -> "TargetView":
        return TargetView(self.target_features, self.classes, self.feature_bounds)


@dataclass(frozen=True)
class TargetView:
    target_features: np.ndarray
    classes: int
    feature_bounds: np.ndarray


@dataclass(frozen=True)
class DomainDataset:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    target_labels_eval: np.ndarray | None
    classes: int
    feature_bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        xs, xt = np.asarray(self.source_features, float), np.asarray(self.target_features, float)
        ys = np.asarray(self.source_labels, dtype=np.int64)
        if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
            raise ValueError(f"source {xs.shape} and target {xt.shape} must be 2-D with equal width")
        if len(xs) < 1 or len(xt) < 1:
            raise ValueError("both domains need at least one sample")
        if ys.shape != (len(xs),):
            raise ValueError("source_labels length must equal number of source rows")
        yt = self.target_labels_eval
        if yt is not None:
            yt = np.asarray(yt, dtype=np.int64)
            if yt.shape != (len(xt),):
                raise ValueError("target_labels_eval length must equal number of target rows")
        for y in (ys, yt):
            if y is not None and y.size and (y.min() < 0 or y.max() >= self.classes):
                raise ValueError(f"labels must lie in [0, {self.classes})")
        bounds = self.feature_bounds
        if bounds is None:
            bounds = compute_bounds(xs, xt)
        bounds = np.asarray(bounds, dtype=np.float64)
        lo, hi = bounds[:, 0], bounds[:, 1]
        if bounds.shape != (xs.shape[1], 2) or np.any(lo > hi):
            raise ValueError("feature_bounds must be (d, 2) with low <= high")
        if np.any(xs < lo) or np.any(xs > hi) or np.any(xt < lo) or np.any(xt > hi):
            raise ValueError("feature_bounds do not contain all features")
        object.__setattr__(self, "source_features", _readonly(xs))
        object.__setattr__(self, "target_features", _readonly(xt))
        object.__setattr__(self, "source_labels", _readonly(ys))
        object.__setattr__(self, "target_labels_eval", None if yt is None else _readonly(yt))
        object.__setattr__(self, "feature_bounds", _readonly(bounds))

    @property
    def dim(self) -> int:
        return self.source_features.shape[1]

    def training_view(self) -> TrainingView:
        return TrainingView(
            self.source_features, self.source_labels, self.target_features,
            self.classes, self.feature_bounds,
        )

    def target_view(self) -> TargetView:
        return TargetView(self.target_features, self.classes, self.feature_bounds)

    def eval_labels(self) -> np.ndarray:
        """Target ground truth; evaluation-only."""
        if self.target_labels_eval is None:
            raise ValueError("dataset has no target evaluation labels")
        return self.target_labels_eval


# -- generators ---------------------------------------------------------------


@dataclass(frozen=True)
class ShiftSpec:
    generator: str = "two_moons_rotate"
    rotation: float = 30.0
    shift: tuple = (1.0,)
    cov_scale: float = 1.0
    noise_sd: float = 0.1
    m: int = 400
    n: int = 400
    classes: int = 2
    dim: int = 2
    scale: float = 1.0
    weak_dims: int = 0
    weak_gap: float = 0.0
    weak_sd: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if not 0 <= self.rotation < 180:
            raise ValueError(f"rotation must lie in [0, 180), got {self.rotation}")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.scale <= 0 or self.cov_scale <= 0:
            raise ValueError("scale and cov_scale must be positive")
        if self.weak_dims < 0 or self.weak_gap < 0 or self.weak_sd < 0:
            raise ValueError("weak_dims, weak_gap and weak_sd must be >= 0")
        if self.generator == "two_moons_rotate" and (self.classes != 2 or self.dim != 2):
            raise ValueError("two_moons_rotate produces 2 classes with 2 primary dimensions")
        if self.generator == "gaussian_mixture_shift":
            if self.classes < 2 or self.dim < 1:
                raise ValueError("gaussian_mixture_shift needs classes >= 2 and dim >= 1")
            if len(self.shift) not in (1, self.dim):
                raise ValueError(f"shift must have 1 or {self.dim} entries")


def balanced_labels(count: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(count) % classes)


def two_moons_points(count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free interleaved half circles, centred at the origin."""
    y = balanced_labels(count, 2, rng)
    t = rng.uniform(0.0, math.pi, size=count)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    pts = np.where(y[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
    return pts, y


def rotation_matrix(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def mixture_means(classes: int, dim: int, seed: int) -> np.ndarray:
    """Class means at radius 2: a randomly rotated regular simplex when it fits in ``dim``."""
    rng = np.random.default_rng([seed, 2])
    if classes > dim + 1:
        means = rng.normal(size=(classes, dim))
        return 2.0 * means / np.linalg.norm(means, axis=1, keepdims=True)
    centred = np.eye(classes) - 1.0 / classes
    basis = np.linalg.svd(centred)[2][: classes - 1].T  # orthonormal basis of the simplex plane
    verts = np.zeros((classes, dim))
    verts[:, : classes - 1] = centred @ basis
    rot, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    verts = verts @ rot.T
    return 2.0 * verts / np.linalg.norm(verts, axis=1, keepdims=True)


def weak_means(classes: int, dims: int, gap: float, seed: int) -> np.ndarray:
    """Per-class sign patterns of magnitude ``gap`` for the weak coordinates."""
    rng = np.random.default_rng([seed, 3])
    signs = rng.choice([-1.0, 1.0], size=(classes, dims))
    if classes == 2:
        signs[1] = -signs[0]
    return gap * signs


def generate(spec: ShiftSpec) -> DomainDataset:
    """Draw source from the base law and target from the shifted law.

    Source and target use independent RNG streams ``[seed, 0]`` and ``[seed, 1]``.
    The shift acts on the primary coordinates only. When ``weak_dims > 0``,
    that many extra columns are appended: each carries a class-dependent mean
    of ``±weak_gap`` plus ``N(0, weak_sd²)`` noise, identically in both
    domains. With ``weak_gap`` below the attack budget these columns are
    predictive but not robust.
    """
    spec.validate()
    rs, rt = np.random.default_rng([spec.seed, 0]), np.random.default_rng([spec.seed, 1])
    if spec.generator == "two_moons_rotate":
        xs, ys = two_moons_points(spec.m, rs)
        xt, yt = two_moons_points(spec.n, rt)
        xt = xt @ rotation_matrix(spec.rotation).T
        xs = xs + spec.noise_sd * rs.normal(size=xs.shape)
        xt = xt + spec.noise_sd * rt.normal(size=xt.shape)
    else:
        means = mixture_means(spec.classes, spec.dim, spec.seed)
        shift = np.broadcast_to(np.asarray(spec.shift, dtype=float), (spec.dim,))
        ys = balanced_labels(spec.m, spec.classes, rs)
        yt = balanced_labels(spec.n, spec.classes, rt)
        xs = means[ys] + spec.noise_sd * rs.normal(size=(spec.m, spec.dim))
        xt = means[yt] + shift + spec.cov_scale * spec.noise_sd * rt.normal(size=(spec.n, spec.dim))
    xs, xt = spec.scale * xs, spec.scale * xt
    if spec.weak_dims:
        wm = weak_means(spec.classes, spec.weak_dims, spec.weak_gap, spec.seed)
        xs = np.hstack([xs, wm[ys] + spec.weak_sd * rs.normal(size=(spec.m, spec.weak_dims))])
        xt = np.hstack([xt, wm[yt] + spec.weak_sd * rt.normal(size=(spec.n, spec.weak_dims))])
    return DomainDataset(xs, ys, xt, yt, spec.classes)


# -- CSV ----------------------------------------------------------------------


def _read_domain(path, label_required: bool, feature_columns: Sequence[str] | None, label_column: str):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise EmptyFileError("file is empty", path=path)
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if not body:
        raise EmptyFileError("file has a header but no data rows", path=path)
    if feature_columns is None:
        feature_columns = sorted((h for h in header if h.startswith("f") and h[1:].isdigit()), key=lambda h: int(h[1:]))
        if not feature_columns:
            raise MissingColumnError("no feature columns named f0..f{d-1}", path=path)
    for col in feature_columns:
        if col not in header:
            raise MissingColumnError("missing feature column", path=path, column=col)
    has_label = label_column in header
    if label_required and not has_label:
        raise MissingColumnError("missing label column", path=path, column=label_column)

    idx = [header.index(c) for c in feature_columns]
    x = np.empty((len(body), len(idx)))
    y = np.empty(len(body), dtype=np.int64) if has_label else None
    # rows are numbered by file line; the header is row 1
    out_row = 0
    for r, row in enumerate(rows[1:]):
        line = r + 2
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise CsvError(f"expected {len(header)} cells, found {len(row)}", path=path, row=line)
        for j, (col, k) in enumerate(zip(feature_columns, idx)):
            try:
                val = float(row[k])
            except ValueError:
                raise NonNumericCellError(f"non-numeric value {row[k]!r}", path=path, row=line, column=col) from None
            if not math.isfinite(val):
                raise NonNumericCellError(f"non-finite value {row[k]!r}", path=path, row=line, column=col)
            x[out_row, j] = val
        if has_label:
            cell = row[header.index(label_column)].strip()
            try:
                y[out_row] = int(cell)
            except ValueError:
                raise NonNumericCellError(f"label {cell!r} is not an integer", path=path, row=line, column=label_column) from None
        out_row += 1
    return list(feature_columns), x, y


def load_csv(source_path, target_path, feature_columns=None, label_column="label", classes=None) -> DomainDataset:
    """Parse one CSV per domain; the target label column is optional (eval-only)."""
    cols_s, xs, ys = _read_domain(source_path, True, feature_columns, label_column)
    cols_t, xt, yt = _read_domain(target_path, False, feature_columns, label_column)
    if cols_s != cols_t:
        raise MissingColumnError(f"feature columns differ: {cols_s} vs {cols_t}", path=target_path)
    if classes is None:
        classes = int(max(ys.max(), -1 if yt is None else yt.max())) + 1
        classes = max(classes, 2)
    for y, p in ((ys, source_path), (yt, target_path)):
        if y is not None and (y.min() < 0 or y.max() >= classes):
            raise CsvError(f"labels must lie in [0, {classes})", path=p)
    return DomainDataset(xs, ys, xt, yt, classes)


def load_target_csv(path, classes: int, feature_columns=None, label_column="label", bounds=None):
    """Target file only (Step 2 never needs the source domain).

    Returns ``(TargetView, eval_labels or None)``. ``bounds`` defaults to the
    target's own min/max; pass the teacher's recorded bounds to match a full run.
    """
    _, xt, yt = _read_domain(path, False, feature_columns, label_column)
    if yt is not None and (yt.min() < 0 or yt.max() >= classes):
        raise CsvError(f"labels must lie in [0, {classes})", path=path)
    if bounds is None:
        bounds = compute_bounds(xt)
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.shape != (xt.shape[1], 2):
        raise CsvError(f"bounds shape {bounds.shape} does not match {xt.shape[1]} feature columns", path=path)
    # widen rather than clip: the data are never altered
    bounds = np.stack([np.minimum(bounds[:, 0], xt.min(axis=0)), np.maximum(bounds[:, 1], xt.max(axis=0))], axis=1)
    view = TargetView(_readonly(xt), classes, _readonly(bounds))
    return view, (None if yt is None else _readonly(yt))


def save_csv(dataset: DomainDataset, source_path, target_path) -> None:
    d = dataset.dim
    header = [f"f{j}" for j in range(d)]
    for path, x, y in (
        (source_path, dataset.source_features, dataset.source_labels),
        (target_path, dataset.target_features, dataset.target_labels_eval),
    ):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header + (["label"] if y is not None else []))
            for i in range(len(x)):
                w.writerow([repr(float(v)) for v in x[i]] + ([int(y[i])] if y is not None else []))


# -- minibatches --------------------------------------------------------------


def minibatches(count: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches from a seeded permutation; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(count)
    return [perm[i:i + batch_size] for i in range(0, count, batch_size)]


def _cycled(count: int, needed: int, rng: np.random.Generator) -> np.ndarray:
    parts, total = [], 0
    while total < needed:
        parts.append(rng.permutation(count))
        total += count
    return np.concatenate(parts)[:needed]


def paired_batches(m: int, n: int, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Zip independent source and target streams over one pass of the longer one.

    The shorter stream is re-shuffled each time it is exhausted.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    longest = max(m, n)
    src = _cycled(m, longest, np.random.default_rng([seed, epoch, 0]))
    tgt = _cycled(n, longest, np.random.default_rng([seed, epoch, 1]))
    for i in range(0, longest, batch_size):
        yield src[i:i + batch_size], tgt[i:i + batch_size]
