"""Class prototypes per modality and the encoder quality index built on them.

A prototype is the mean encoder feature of one class. Well-trained encoders
produce prototypes that point in different directions, so the average
pairwise cosine similarity between a modality's global prototypes is high
for an undertrained encoder and low for a well-trained one.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import MultimodalDataset
from .nn import Mlp, Tensor, forward_mlp, no_grad


@dataclass(frozen=True)
class Prototype:
    modality: int
    klass: int
    vector: np.ndarray


def local_prototypes(encoders: Sequence[Mlp], shard: MultimodalDataset) -> list[Prototype]:
    """Mean feature per (modality, class) over one client's shard.

    Classes absent from the shard are omitted.
    """
    if len(shard) == 0:
        raise ValueError("cannot compute prototypes of an empty shard")
    if len(encoders) != shard.num_modalities:
        raise ValueError(f"{len(encoders)} encoders for {shard.num_modalities} modalities")
    present = np.unique(shard.labels)
    out = []
    with no_grad():
        for m, enc in enumerate(encoders):
            z = forward_mlp(enc, Tensor(shard.features[m])).data
            for k in present:
                out.append(Prototype(m, int(k), z[shard.labels == k].mean(axis=0)))
    return out


def normalize_prototype(p: Prototype) -> Prototype:
    norm = np.linalg.norm(p.vector)
    if norm == 0.0:
        raise ValueError(f"zero prototype for modality {p.modality}, class {p.klass} (dead encoder?)")
    return Prototype(p.modality, p.klass, p.vector / norm)


def global_prototypes(client_prototypes: Iterable[Sequence[Prototype]], num_modalities: int,
                      num_classes: int) -> list[Prototype]:
    """Average each (modality, class) prototype over the clients that report it."""
    sums: dict[tuple[int, int], np.ndarray] = {}
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for protos in client_prototypes:
        for p in protos:
            key = (p.modality, p.klass)
            sums[key] = p.vector.copy() if key not in sums else sums[key] + p.vector
            counts[key] += 1
    missing = [(m, k) for m in range(num_modalities) for k in range(num_classes)
               if counts[(m, k)] == 0]
    if missing:
        raise ValueError(f"no client reported (modality, class) pairs {missing}")
    return [Prototype(m, k, sums[(m, k)] / counts[(m, k)])
            for m in range(num_modalities) for k in range(num_classes)]


def quality_index(vectors) -> float:
    """``(1/K) * sum over ordered pairs k != o of cos(p_k, p_o)``."""
    p = np.asarray(vectors, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("quality index needs at least two prototypes")
    norms = np.linalg.norm(p, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero prototype vector (dead encoder?)")
    u = p / norms[:, None]
    gram = u @ u.T
    k = p.shape[0]
    return float((gram.sum() - np.trace(gram)) / k)


def normalize_quality(raw) -> np.ndarray:
    w = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise ValueError("quality vector is all zero; cannot normalise")
    return w / norm


def encoder_quality(prototypes: Sequence[Prototype], num_modalities: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw and normalised quality vectors from global prototypes.

    Raw indices are clamped at zero before normalisation.
    """
    by_mod: dict[int, list[np.ndarray]] = defaultdict(list)
    for p in sorted(prototypes, key=lambda p: (p.modality, p.klass)):
        by_mod[p.modality].append(p.vector)
    raw = np.array([quality_index(by_mod[m]) for m in range(num_modalities)])
    return raw, normalize_quality(np.maximum(raw, 0.0))


def combination_quality(quality, members: Iterable[int]) -> float:
    members = list(members)
    if not members:
        raise ValueError("combination must contain at least one modality")
    q = np.asarray(quality, dtype=np.float64)
    return float(sum(q[m] for m in members))
