"""Multimodal datasets: synthetic generation, CSV ingestion, partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class MultimodalDataset:
    features: list[np.ndarray]          # one [n_samples x dim_m] matrix per modality
    labels: np.ndarray                  # int64, values in [0, num_classes)
    num_classes: int
    modality_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    class_means: list[np.ndarray] | None = None   # synthetic data only, [K x dim_m] per modality

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.features:
            raise DataError("dataset needs at least one modality")
        n = self.labels.shape[0]
        for m, x in enumerate(self.features):
            if x.ndim != 2 or x.shape[0] != n:
                raise DataError(f"modality {m} has shape {x.shape}, expected ({n}, dim)")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")
        if not self.modality_names:
            self.modality_names = [f"m{m + 1}" for m in range(len(self.features))]
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.num_classes)]

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.features]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset([x[idx] for x in self.features], self.labels[idx],
                                 self.num_classes, list(self.modality_names),
                                 list(self.class_names), self.class_means)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray


def synthesize(num_modalities: int, num_classes: int, dims: Sequence[int], samples: int,
               informativeness: Sequence[float], noise: float, seed: int) -> MultimodalDataset:
    """Class-conditional Gaussian data, one mixture per modality.

    Class means of modality ``m`` are ``informativeness[m] * z`` with
    ``z ~ N(0, I)``, so informativeness 0 collapses every class onto the
    origin and the modality carries no label signal. Labels are balanced
    (every class appears ``samples // K`` or ``samples // K + 1`` times).
    """
    if num_modalities < 1 or num_classes < 2:
        raise DataError("need at least one modality and two classes")
    if len(dims) != num_modalities or any(int(d) < 1 for d in dims):
        raise DataError(f"invalid dims {list(dims)} for {num_modalities} modalities")
    if len(informativeness) != num_modalities:
        raise DataError("one informativeness value per modality required")
    if any(not 0.0 <= v <= 1.0 for v in informativeness):
        raise DataError("informativeness values must lie in [0, 1]")
    if samples < num_classes:
        raise DataError(f"samples ({samples}) must be >= number of classes ({num_classes})")
    if noise <= 0:
        raise DataError("noise must be positive")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(samples) % num_classes)
    features, means = [], []
    for d, info in zip(dims, informativeness):
        mu = info * rng.standard_normal((num_classes, int(d)))
        x = mu[labels] + noise * rng.standard_normal((samples, int(d)))
        features.append(x)
        means.append(mu)
    return MultimodalDataset(features, labels, num_classes, class_means=means)


def partition_dirichlet(dataset: MultimodalDataset, num_clients: int, alpha: float, seed: int,
                        shard_size: int | None = None) -> list[ClientShard]:
    """Non-IID split with per-class client proportions drawn from Dirichlet(alpha).

    Shards are then equalised: oversized shards give up randomly chosen rows
    to a pool that tops up undersized ones, so shards stay disjoint. Rows
    beyond ``num_clients * shard_size`` are left unused.
    """
    if num_clients < 1:
        raise DataError("num_clients must be >= 1")
    if alpha <= 0:
        raise DataError("alpha must be positive")
    n = len(dataset)
    size = n // num_clients if shard_size is None else int(shard_size)
    if size < 1 or size * num_clients > n:
        raise DataError(f"{n} samples cannot fill {num_clients} non-empty shards of size {max(size, 1)}")

    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(dataset.num_classes):
        rows = rng.permutation(np.flatnonzero(dataset.labels == k))
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * len(rows)).astype(np.int64)
        for client, part in enumerate(np.split(rows, cuts)):
            buckets[client].extend(part.tolist())

    pool: list[int] = []
    for client in range(num_clients):
        b = np.asarray(buckets[client], dtype=np.int64)
        if len(b) > size:
            keep = rng.permutation(len(b))
            pool.extend(b[keep[size:]].tolist())
            buckets[client] = b[np.sort(keep[:size])].tolist()
    pool = rng.permutation(np.asarray(pool, dtype=np.int64)).tolist()
    for client in range(num_clients):
        need = size - len(buckets[client])
        if need > 0:
            buckets[client].extend(pool[:need])
            del pool[:need]

    return [ClientShard(c, np.sort(np.asarray(b, dtype=np.int64))) for c, b in enumerate(buckets)]


def split_validation(dataset: MultimodalDataset, fraction: float, seed: int):
    """Stratified ``(train, validation)`` split.

    The validation size is ``round(fraction * n)``, apportioned to classes by
    largest remainder.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie strictly between 0 and 1")
    n = len(dataset)
    total = int(round(fraction * n))
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    quota = fraction * counts
    take = np.floor(quota).astype(np.int64)
    short = total - int(take.sum())
    if short > 0:
        order = np.argsort(-(quota - take), kind="stable")
        take[order[:short]] += 1
    if np.any(take < 1):
        k = int(np.flatnonzero(take < 1)[0])
        raise DataError(f"fraction {fraction} leaves class {k} with no validation sample")
    if np.any(take >= counts):
        raise DataError("fraction leaves a class with no training sample")

    rng = np.random.default_rng(seed)
    val_idx = []
    for k in range(dataset.num_classes):
        rows = rng.permutation(np.flatnonzero(dataset.labels == k))
        val_idx.append(rows[:take[k]])
    val = np.sort(np.concatenate(val_idx))
    mask = np.ones(n, dtype=bool)
    mask[val] = False
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(val)


# ----------------------------------------------------------------------- CSV

def read_table(path, label_column: str) -> tuple[list[str], np.ndarray, list[str]]:
    """Read one CSV file into ``(feature column names, values, raw labels)``.

    Every non-label cell must be a finite decimal number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: missing label column {label_column!r}")
        li = header.index(label_column)
        cols = [h for i, h in enumerate(header) if i != li]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for i, cell in enumerate(row):
                if i == li:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}, column {header[i]!r}: non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: line {lineno}, column {header[i]!r}: non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
            labels.append(row[li].strip())
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(cols))
    return cols, values, labels


def _class_order(raw: Sequence[str]) -> list[str]:
    uniq = set(raw)
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return sorted(uniq)


def load_csv(paths: Sequence, label_column: str) -> MultimodalDataset:
    """One CSV per modality, rows aligned, sharing ``label_column``.

    Labels are re-indexed to ``[0, K)`` in sorted order (numeric order when
    every label parses as a number, lexicographic otherwise).
    """
    if not paths:
        raise DataError("at least one CSV path required")
    tables = [read_table(p, label_column) for p in paths]
    n = len(tables[0][2])
    for p, (_, _, labels) in zip(paths, tables):
        if len(labels) != n:
            raise DataError(f"{p}: {len(labels)} rows, but {paths[0]} has {n}")
    raw = tables[0][2]
    for p, (_, _, labels) in zip(paths[1:], tables[1:]):
        for i, (a, b) in enumerate(zip(raw, labels)):
            if a != b:
                raise DataError(f"{p}: line {i + 2} label {b!r} disagrees with {paths[0]} ({a!r})")
    if n == 0:
        raise DataError(f"{paths[0]}: no data rows")
    classes = _class_order(raw)
    index = {c: k for k, c in enumerate(classes)}
    labels = np.asarray([index[c] for c in raw], dtype=np.int64)
    names = [Path(p).stem for p in paths]
    return MultimodalDataset([t[1] for t in tables], labels, len(classes), names, classes)
