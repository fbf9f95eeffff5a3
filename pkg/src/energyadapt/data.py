"""Synthetic rotated-domain benchmark and feature-file ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLUSTER_RADIUS = 3.0
CLUSTER_STD = 0.5
NUISANCE_STD = 0.5  # variance 0.25


@dataclass
class DomainDataset:
    domain: int
    features: np.ndarray
    labels: np.ndarray
    angle: float | None = None
    tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.labels), -1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on row count")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class DomainBatch:
    """One minibatch. ``domains`` holds the domain id of every row."""

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_dataset(cls, ds, idx=None):
        if idx is None:
            idx = np.arange(len(ds))
        return cls(ds.features[idx], ds.labels[idx], np.full(len(idx), ds.domain, dtype=np.int64))

    @classmethod
    def concat(cls, batches):
        batches = list(batches)
        return cls(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.domains for b in batches]),
        )


@dataclass
class BenchmarkSpec:
    num_classes: int = 4
    dim: int = 16
    per_class: int = 200
    source_angles: tuple = (15.0, 30.0, 45.0, 60.0, 75.0)
    target_angles: tuple = (0.0, 90.0)
    geometry_seed: int = 0
    noise_scale: float = 1.0
    # Alternate class radii CLUSTER_RADIUS +/- radial_offset. With equal radii
    # and four classes, a 90 degree rotation permutes the labels, which leaves
    # targets at 0 and 90 degrees exactly between two classes' source arcs.
    radial_offset: float = 1.0

    def validate(self):
        if self.num_classes < 2 or self.dim < 2 or self.per_class < 1:
            raise ValueError("benchmark needs >= 2 classes, >= 2 dims and >= 1 sample per class")
        if set(self.source_angles) & set(self.target_angles):
            raise ValueError("source and target angles must be disjoint")
        if not self.source_angles:
            raise ValueError("at least one source angle is required")


def rotation(angle_deg):
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def rotate_plane(features, angle_deg):
    """Rotate the first two coordinates of every row counter-clockwise."""
    out = np.array(features, dtype=np.float64, copy=True)
    out[:, :2] = out[:, :2] @ rotation(angle_deg).T
    return out


def class_means(spec):
    """Cluster centers at evenly spaced angles, phase set by the geometry seed.

    Radii alternate between ``CLUSTER_RADIUS + radial_offset`` and
    ``CLUSTER_RADIUS - radial_offset`` around the circle.
    """
    rng = np.random.default_rng(spec.geometry_seed)
    phase = rng.uniform(0, 2 * np.pi)
    ang = phase + 2 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    radius = CLUSTER_RADIUS + spec.radial_offset * (-1.0) ** np.arange(spec.num_classes)
    return radius[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _base_samples(spec, rng):
    means = class_means(spec)
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    n = labels.size
    x = np.empty((n, spec.dim))
    x[:, :2] = means[labels] + spec.noise_scale * CLUSTER_STD * rng.standard_normal((n, 2))
    x[:, 2:] = spec.noise_scale * NUISANCE_STD * rng.standard_normal((n, spec.dim - 2))
    return x, labels


def generate_rotated_benchmark(spec, rng):
    """Draw one dataset per source and target angle.

    Every domain gets fresh base samples (so domains never share points),
    then its plane is rotated by the domain angle. Domain ids are assigned in
    the order sources then targets.
    """
    spec.validate()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    sources, targets = [], []
    angles = [(a, sources) for a in spec.source_angles] + [(a, targets) for a in spec.target_angles]
    for dom, (angle, bucket) in enumerate(angles):
        x, y = _base_samples(spec, rng)
        bucket.append(DomainDataset(dom, rotate_plane(x, angle), y, angle=float(angle), tag=f"rot{angle:g}"))
    return sources, targets


def split_dataset(ds, fraction, rng):
    """Stratified split into (first, second) with ``fraction`` of each class in second."""
    first, second = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = rng.permutation(idx)
        k = int(round(fraction * idx.size))
        second.append(idx[:k])
        first.append(idx[k:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    mk = lambda idx: DomainDataset(ds.domain, ds.features[idx], ds.labels[idx], ds.angle, ds.tag)  # noqa: E731
    return mk(a), mk(b)


def batch_iter(ds, batch_size, rng):
    """Endless stream of shuffled batches; each epoch is a permutation, last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield DomainBatch.from_dataset(ds, perm[start:start + batch_size])


def epoch_batches(ds, batch_size, rng):
    """One epoch of ``batch_iter``."""
    n = len(ds)
    it = batch_iter(ds, batch_size, rng)
    return [next(it) for _ in range(max(1, -(-n // batch_size)))] if n else []


# --------------------------------------------------------------------------
# CSV feature files: header ``domain,label,f0,...,f{d-1}``

class FeatureFileError(ValueError):
    pass


def save_feature_csv(path, datasets):
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    datasets = list(datasets)
    dim = datasets[0].dim if datasets else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label", *[f"f{k}" for k in range(dim)]])
        for ds in datasets:
            for row, lab in zip(ds.features, ds.labels):
                w.writerow([ds.domain, int(lab), *[repr(float(v)) for v in row]])


def load_feature_csv(path, dim=None):
    """Read a feature file. Returns one ``DomainDataset`` per domain id, in file order.

    A file with a header and no rows yields a single empty dataset.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureFileError(f"{path}: missing header") from None
        if header[:2] != ["domain", "label"] or header[2:] != [f"f{k}" for k in range(len(header) - 2)]:
            raise FeatureFileError(f"{path}: header must be domain,label,f0,...")
        d = len(header) - 2
        if dim is not None and d != dim:
            raise FeatureFileError(f"{path}: expected {dim} features, header has {d}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise FeatureFileError(f"{path}: line {lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                dom, lab = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise FeatureFileError(f"{path}: line {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise FeatureFileError(f"{path}: line {lineno}: non-finite value")
            feats, labs = rows.setdefault(dom, ([], []))
            feats.append(vals)
            labs.append(lab)
    if not rows:
        return [DomainDataset(0, np.zeros((0, d)), np.zeros(0, dtype=np.int64))]
    return [DomainDataset(dom, np.array(f).reshape(-1, d), np.array(lab)) for dom, (f, lab) in rows.items()]


@dataclass
class Benchmark:
    """Train/held-out source splits and target sets produced from one spec and seed."""

    spec: BenchmarkSpec
    sources: list
    held_out: list
    targets: list
    meta: dict = field(default_factory=dict)


def make_benchmark(spec, seed, holdout=0.25):
    rng = np.random.default_rng(seed)
    sources, targets = generate_rotated_benchmark(spec, rng)
    train, held = [], []
    for ds in sources:
        a, b = split_dataset(ds, holdout, rng)
        train.append(a)
        held.append(b)
    return Benchmark(spec, train, held, targets)
