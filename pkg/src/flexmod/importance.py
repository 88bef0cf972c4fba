"""Modality importance as exact Shapley values of validation loss.

The players are modalities; the value of a coalition is the header's
validation cross-entropy when only that coalition's features are supplied
and every other modality is replaced by a zero feature vector.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from .data import MultimodalDataset
from .model import GlobalModel
from .nn import Tensor, cross_entropy, no_grad

MAX_EXACT_MODALITIES = 12


def evaluate_subset_loss(model: GlobalModel, validation: MultimodalDataset,
                         subset: Iterable[int]) -> float:
    subset = set(subset)
    n = len(validation)
    with no_grad():
        feats = []
        for m, enc in enumerate(model.encoders):
            if m in subset:
                feats.append(enc(Tensor(validation.features[m])))
            else:
                feats.append(Tensor(np.zeros((n, model.feature_dim))))
        logits = model.head(feats)
        return float(cross_entropy(logits, validation.labels).data)


def subset_values(value: Callable[[frozenset], float], num_players: int) -> dict[frozenset, float]:
    """Evaluate ``value`` on all ``2**num_players`` coalitions."""
    cache = {}
    for mask in range(1 << num_players):
        s = frozenset(i for i in range(num_players) if mask >> i & 1)
        cache[s] = float(value(s))
    return cache


def shapley_from_values(cache: dict[frozenset, float], num_players: int) -> np.ndarray:
    """Subset-form Shapley values from a complete coalition-value table."""
    m = num_players
    fact = [math.factorial(i) for i in range(m + 1)]
    weight = [fact[s] * fact[m - s - 1] / fact[m] for s in range(m)]
    phi = np.zeros(m)
    for s, v_s in cache.items():
        w = weight[len(s)] if len(s) < m else 0.0
        for i in range(m):
            if i not in s:
                phi[i] += w * (cache[s | {i}] - v_s)
    return phi


def shapley_values(model: GlobalModel, validation: MultimodalDataset,
                   return_cache: bool = False):
    """Raw Shapley value of every modality with respect to validation loss.

    Loss falls as useful modalities are added, so helpful modalities get
    negative raw values.
    """
    m = model.num_modalities
    if m < 1:
        raise ValueError("model has no modalities")
    if m > MAX_EXACT_MODALITIES:
        raise ValueError(f"exact Shapley enumeration is limited to {MAX_EXACT_MODALITIES} "
                         f"modalities; reduce M (got {m})")
    cache = subset_values(lambda s: evaluate_subset_loss(model, validation, s), m)
    phi = shapley_from_values(cache, m)
    return (phi, cache) if return_cache else phi


def normalize_importance(raw) -> np.ndarray:
    """Negate, clamp at zero, then L2-normalise."""
    g = np.maximum(-np.asarray(raw, dtype=np.float64), 0.0)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise ValueError("no modality reduces validation loss; importance is undefined")
    return g / norm


def combination_importance(importance, members: Iterable[int]) -> float:
    members = list(members)
    if not members:
        raise ValueError("combination must contain at least one modality")
    g = np.asarray(importance, dtype=np.float64)
    return float(sum(g[m] for m in members))
