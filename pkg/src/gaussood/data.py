"""Tabular dataset handling: CSV ingestion, z-scoring, minority
down-sampling, stratified folds, and a synthetic blob benchmark.

Datasets are immutable values; every operation returns a new one.
Rows of the designated OOD class never enter a training split.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass
class TabularDataset:
    features: np.ndarray            # (n, p) float64
    labels: np.ndarray              # (n,) dense class ids
    class_names: list               # id -> name
    feature_names: list
    label_column: str = "label"
    ood_class: int | None = None
    minority_class: int | None = None
    norm_mean: np.ndarray | None = None  # set once z-scored
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, p) with one label per row")
        k = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError("labels reference unknown classes")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def id_class_ids(self):
        """Class ids that participate in training (everything but OOD)."""
        return [c for c in range(self.n_classes) if c != self.ood_class]

    @property
    def ood_mask(self):
        if self.ood_class is None:
            return np.zeros(self.n_rows, dtype=bool)
        return self.labels == self.ood_class

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def _sorted_class_names(names):
    """Numeric-aware order so 'class 10' style labels sort sensibly."""
    unique = sorted(set(names))
    try:
        return sorted(unique, key=float)
    except ValueError:
        return unique


def _resolve_class(name, class_names, role):
    if name is None:
        return None
    if name not in class_names:
        raise ValueError(f"{role} class {name!r} not among labels {class_names}")
    return class_names.index(name)


def load_csv(path, label_column, ood_class=None, minority_class=None) -> TabularDataset:
    """Load a headered CSV; all non-label columns are float64 features.

    `ood_class` / `minority_class` are label values (strings) naming the
    designated classes, or None.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row")
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]

        rows, raw_labels = [], []
        for r, record in enumerate(reader, start=1):
            if len(record) != len(header):
                raise ValueError(f"{path}: row {r} has {len(record)} cells, expected {len(header)}")
            raw_labels.append(record[label_idx])
            feats = []
            for i, cell in enumerate(record):
                if i == label_idx:
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: row {r}, column {header[i]!r}: non-numeric value {cell!r}"
                    ) from None
            rows.append(feats)
    if not rows:
        raise ValueError(f"{path}: no data rows")

    class_names = _sorted_class_names(raw_labels)
    ids = {name: i for i, name in enumerate(class_names)}
    labels = np.array([ids[name] for name in raw_labels], dtype=np.int64)
    return TabularDataset(
        features=np.array(rows, dtype=np.float64),
        labels=labels,
        class_names=class_names,
        feature_names=feature_names,
        label_column=label_column,
        ood_class=_resolve_class(ood_class, class_names, "OOD"),
        minority_class=_resolve_class(minority_class, class_names, "minority"),
    )


def save_csv(dataset: TabularDataset, path):
    """Write the dataset back out; full float precision so loads round-trip."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(dataset.feature_names) + [dataset.label_column])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [dataset.class_names[label]])


def write_manifest(dataset: TabularDataset, path):
    """JSON sidecar naming the label/OOD/minority columns and class order."""
    payload = {
        "label_column": dataset.label_column,
        "ood_class": None if dataset.ood_class is None else dataset.class_names[dataset.ood_class],
        "minority_class": (None if dataset.minority_class is None
                           else dataset.class_names[dataset.minority_class]),
        "classes": list(dataset.class_names),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_manifest(path):
    payload = json.loads(Path(path).read_text())
    for key in ("label_column", "ood_class", "minority_class"):
        if key not in payload:
            raise ValueError(f"{path}: manifest missing {key!r}")
    return payload


def load_with_manifest(csv_path, manifest_path) -> TabularDataset:
    m = read_manifest(manifest_path)
    return load_csv(csv_path, m["label_column"],
                    ood_class=m["ood_class"], minority_class=m["minority_class"])


def zscore_fit_apply(train_rows, all_rows):
    """Column stats from the training rows only, applied everywhere.

    Population (1/n) standard deviation; constant columns keep std 1 so
    they normalize to zeros. Returns (normalized_all, mean, std).
    """
    train_rows = np.asarray(train_rows, dtype=np.float64)
    all_rows = np.asarray(all_rows, dtype=np.float64)
    if train_rows.shape[0] == 0:
        raise ValueError("cannot fit normalization stats on zero rows")
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(constant, 1.0, std)
    return (all_rows - mean) / std, mean, std


def normalized(dataset: TabularDataset, train_indices) -> TabularDataset:
    """Dataset z-scored with stats fitted on `train_indices` rows."""
    scaled, mean, std = zscore_fit_apply(dataset.features[train_indices], dataset.features)
    return replace(dataset, features=scaled, norm_mean=mean, norm_std=std)


def apply_mdsr(dataset: TabularDataset, mdsr, seed) -> TabularDataset:
    """Keep floor(mdsr * n_minority) uniformly chosen minority rows.

    Other classes are untouched and row order is preserved; mdsr = 1 is
    the identity.
    """
    if not 0.0 < mdsr <= 1.0:
        raise ValueError(f"mdsr must lie in (0, 1], got {mdsr}")
    if mdsr == 1.0:
        return dataset
    if dataset.minority_class is None:
        raise ValueError("dataset has no designated minority class")
    minority_rows = np.flatnonzero(dataset.labels == dataset.minority_class)
    keep = int(np.floor(mdsr * minority_rows.size))
    if keep < 2:
        raise ValueError(
            f"mdsr={mdsr} would leave {keep} minority rows (< 2); "
            f"minority class has {minority_rows.size} rows"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(minority_rows, size=keep, replace=False))
    mask = np.ones(dataset.n_rows, dtype=bool)
    mask[minority_rows] = False
    mask[chosen] = True
    return replace(dataset, features=dataset.features[mask], labels=dataset.labels[mask])


def make_blobs(k_id, n_per_class, dim, separation, ood_offset,
               imbalance=None, seed=0, minority_class=0) -> TabularDataset:
    """Synthetic benchmark: k_id unit-variance Gaussian ID clusters plus
    one displaced OOD cluster.

    ID centers sit at mutual distance exactly `separation`; the OOD
    center lies at distance max(ood_offset, geometric minimum) from
    every ID center, along a direction orthogonal to all ID centers'
    differences. `imbalance` optionally gives per-class fractions of
    n_per_class (counts are floored).
    """
    if k_id < 2:
        raise ValueError(f"need at least 2 ID classes, got {k_id}")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if ood_offset <= 0:
        raise ValueError(f"ood_offset must be positive, got {ood_offset}")
    if dim < k_id:
        raise ValueError(f"dim must be >= k_id, got dim={dim}, k_id={k_id}")
    if not 0 <= minority_class < k_id:
        raise ValueError(f"minority_class must be an ID class index, got {minority_class}")

    counts = [n_per_class] * k_id
    if imbalance is not None:
        if len(imbalance) != k_id:
            raise ValueError("imbalance needs one fraction per ID class")
        counts = [int(np.floor(f * n_per_class)) for f in imbalance]
        if min(counts) < 1:
            raise ValueError("imbalance fractions leave an empty class")

    scale = separation / np.sqrt(2.0)
    centers = np.zeros((k_id, dim))
    for i in range(k_id):
        centers[i, i] = scale
    centroid = centers.mean(axis=0)
    radius_sq = scale**2 * (k_id - 1) / k_id
    if dim > k_id:
        direction = np.zeros(dim)
        direction[k_id] = 1.0
    else:
        direction = np.ones(dim) / np.sqrt(dim)
    shift = np.sqrt(max(ood_offset**2 - radius_sq, 0.0))
    ood_center = centroid + shift * direction

    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for i, count in enumerate(counts):
        blocks.append(rng.normal(size=(count, dim)) + centers[i])
        labels.extend([i] * count)
    blocks.append(rng.normal(size=(n_per_class, dim)) + ood_center)
    labels.extend([k_id] * n_per_class)

    return TabularDataset(
        features=np.vstack(blocks),
        labels=np.array(labels, dtype=np.int64),
        class_names=[f"c{i}" for i in range(k_id)] + ["ood"],
        feature_names=[f"f{j}" for j in range(dim)],
        ood_class=k_id,
        minority_class=minority_class,
    )


@dataclass
class SplitPlan:
    """Fold assignment over ID rows; OOD rows are listed separately."""

    id_rows: np.ndarray    # dataset row indices of ID rows
    fold_of: np.ndarray    # fold index per entry of id_rows
    ood_rows: np.ndarray
    folds: int
    seed: int
    mdsr: float = 1.0

    def train_indices(self, fold):
        return self.id_rows[self.fold_of != fold]

    def val_indices(self, fold):
        return self.id_rows[self.fold_of == fold]


def stratified_folds(dataset: TabularDataset, folds, seed, mdsr=1.0) -> SplitPlan:
    """Per-class round-robin fold assignment after a seeded shuffle."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    rng = np.random.default_rng(seed)
    fold_of_row = np.full(dataset.n_rows, -1, dtype=np.int64)
    for c in dataset.id_class_ids:
        rows = np.flatnonzero(dataset.labels == c)
        if rows.size < folds:
            raise ValueError(
                f"class {dataset.class_names[c]!r} has {rows.size} rows, fewer than {folds} folds"
            )
        rng.shuffle(rows)
        fold_of_row[rows] = np.arange(rows.size) % folds
    id_rows = np.flatnonzero(fold_of_row >= 0)
    return SplitPlan(
        id_rows=id_rows,
        fold_of=fold_of_row[id_rows],
        ood_rows=np.flatnonzero(dataset.ood_mask),
        folds=folds,
        seed=seed,
        mdsr=mdsr,
    )
