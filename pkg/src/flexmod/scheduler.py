"""Per-round allocation of training slots to modality combinations.

Combinations are the non-empty subsets of the ``M`` modalities, indexed in
bitmask order: combination ``i`` (0-based) contains modality ``m`` iff bit
``m`` of ``i + 1`` is set. For two modalities that is ``({0}, {1}, {0, 1})``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .importance import combination_importance
from .prototype import combination_quality


def combinations(num_modalities: int) -> list[tuple[int, ...]]:
    return [tuple(m for m in range(num_modalities) if mask >> m & 1)
            for mask in range(1, 1 << num_modalities)]


def combination_label(members: Sequence[int], names: Sequence[str] | None = None) -> str:
    if names is None:
        return "+".join(str(m + 1) for m in members)
    return "+".join(names[m] for m in members)


class SubadditivityWarning(UserWarning):
    pass


@dataclass
class CombinationTable:
    num_modalities: int
    times: np.ndarray                      # int, one per combination
    omega: np.ndarray = field(default=None)   # combination quality
    gamma: np.ndarray = field(default=None)   # combination importance

    def __post_init__(self):
        self.members = combinations(self.num_modalities)
        s = len(self.members)
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.times.shape != (s,):
            raise ValueError(f"need {s} unit times for M={self.num_modalities}, got {self.times.shape[0]}")
        if np.any(self.times < 1):
            raise ValueError("unit times must be positive integers")
        self.omega = np.zeros(s) if self.omega is None else np.asarray(self.omega, dtype=np.float64)
        self.gamma = np.zeros(s) if self.gamma is None else np.asarray(self.gamma, dtype=np.float64)
        index = {frozenset(c): i for i, c in enumerate(self.members)}
        for i, a in enumerate(self.members):
            for j, b in enumerate(self.members):
                if i < j and not set(a) & set(b):
                    u = index[frozenset(a) | frozenset(b)]
                    if self.times[u] > self.times[i] + self.times[j]:
                        warnings.warn(
                            f"training {combination_label(self.members[u])} together (t={self.times[u]}) "
                            f"costs more than separately ({self.times[i]} + {self.times[j]})",
                            SubadditivityWarning, stacklevel=2)

    @classmethod
    def from_indices(cls, times, quality, importance) -> "CombinationTable":
        """Lift per-modality quality and importance vectors to every combination."""
        m = len(quality)
        members = combinations(m)
        omega = [combination_quality(quality, c) for c in members]
        gamma = [combination_importance(importance, c) for c in members]
        return cls(m, times, omega, gamma)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def cardinalities(self) -> np.ndarray:
        return np.array([len(c) for c in self.members])

    @property
    def full_index(self) -> int:
        return self.size - 1

    def singleton_index(self, m: int) -> int:
        return (1 << m) - 1

    def unit_values(self, beta: float) -> np.ndarray:
        _check_beta(beta)
        return beta * self.omega + (1.0 - beta) * self.gamma


def _check_beta(beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")


def utility(allocation, table: CombinationTable, beta: float) -> float:
    a = np.asarray(allocation)
    return float(np.dot(table.unit_values(beta), a))


def time_cost(allocation, table: CombinationTable) -> int:
    return int(np.dot(table.times, np.asarray(allocation, dtype=np.int64)))


def solve_knapsack(values, times, budget: int, priority: Sequence[int] | None = None) -> np.ndarray:
    """Exact unbounded knapsack over an integer budget.

    Maximises ``sum(values * counts)`` subject to ``sum(times * counts) <= budget``.
    Among optimal solutions the one taking the most units of ``priority[0]``
    wins, then of ``priority[1]``, and so on. Items with non-positive value
    are never taken.
    """
    values = np.asarray(values, dtype=np.float64)
    times = np.asarray(times, dtype=np.int64)
    budget = int(budget)
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if not np.all(np.isfinite(values)):
        raise ValueError("item values must be finite")
    n = len(values)
    order = list(range(n)) if priority is None else list(priority)

    # best[i][b]: optimum using only order[i:], budget b
    best = np.zeros((n + 1, budget + 1))
    for i in range(n - 1, -1, -1):
        item = order[i]
        t, v = int(times[item]), values[item]
        row = best[i + 1].copy()
        if v > 0:
            for b in range(t, budget + 1):
                cand = row[b - t] + v
                if cand > row[b]:
                    row[b] = cand
        best[i] = row

    counts = np.zeros(n, dtype=np.int64)
    remaining = budget
    for i, item in enumerate(order):
        t, v = int(times[item]), values[item]
        if v <= 0:
            continue
        target = best[i][remaining]
        tol = 1e-12 * max(1.0, abs(target))
        for c in range(remaining // t, 0, -1):
            if c * v + best[i + 1][remaining - c * t] >= target - tol:
                counts[item] = c
                remaining -= c * t
                break
    return counts


def preference_order(table: CombinationTable) -> list[int]:
    """Larger combinations first, then lower index."""
    return sorted(range(table.size), key=lambda i: (-len(table.members[i]), i))


def solve_allocation(table: CombinationTable, beta: float, budget: int) -> np.ndarray:
    """Integer allocation maximising utility within ``budget`` time units."""
    return solve_knapsack(table.unit_values(beta), table.times, budget, preference_order(table))


def order_schedule(allocation, table: CombinationTable) -> list[int]:
    """Expand counts into slots, larger combinations first (ties by index)."""
    a = np.asarray(allocation, dtype=np.int64)
    if np.any(a < 0):
        raise ValueError("allocation counts must be non-negative")
    return [i for i in preference_order(table) for _ in range(int(a[i]))]


def fill_with(table: CombinationTable, index: int, budget: int) -> np.ndarray:
    """As many slots of one combination as fit in ``budget``."""
    a = np.zeros(table.size, dtype=np.int64)
    a[index] = budget // int(table.times[index])
    return a


@dataclass(frozen=True)
class BoundParams:
    eta: float
    L: float
    delta: float
    num_modalities: int

    def __post_init__(self):
        if min(self.eta, self.L, self.delta) <= 0 or self.num_modalities < 1:
            raise ValueError("eta, L, delta and M must all be positive")


def bound_from_sizes(sizes: Sequence[int], params: BoundParams) -> float:
    """Divergence bound for a sequence of combination cardinalities.

    ``2 eta^2 sum_e [prod_{j=e}^{E-1} (2 + 2 eta^2 L^2 c_j)] (M - c_e) delta^2``
    with the empty product (``e = E``) equal to 1.
    """
    sizes = [int(c) for c in sizes]
    if not sizes:
        raise ValueError("schedule must be non-empty")
    m = params.num_modalities
    if any(not 1 <= c <= m for c in sizes):
        raise ValueError(f"combination sizes must lie in [1, {m}]")
    k = 2.0 * params.eta ** 2 * params.L ** 2
    total = 0.0
    prod = 1.0
    # walk backwards so prod holds prod_{j=e}^{E-1}
    for e in range(len(sizes) - 1, -1, -1):
        if e < len(sizes) - 1:
            prod *= 2.0 + k * sizes[e]
        total += prod * (m - sizes[e])
    return 2.0 * params.eta ** 2 * total * params.delta ** 2


def ordering_guaranteed(params: BoundParams, num_slots: int) -> bool:
    """Whether larger-combinations-first is provably the bound-minimising order.

    Swapping two adjacent slots that are not the last pair always favours the
    larger combination first. For the last pair the preference can flip once
    ``k = 2 eta^2 L^2`` is large; with ``S`` bounding the weight of the
    earlier slots, ``k (M - 2 + S) <= 1`` rules that out for every schedule of
    ``num_slots`` slots.
    """
    m = params.num_modalities
    k = 2.0 * params.eta ** 2 * params.L ** 2
    s = (m - 1) * sum((2.0 + k * m) ** i for i in range(1, num_slots - 1))
    return k * (m - 2 + s) <= 1.0


def divergence_bound(schedule: Sequence[int], params: BoundParams, table: CombinationTable) -> float:
    return bound_from_sizes([len(table.members[i]) for i in schedule], params)


def estimate_bound_params(gradient_norms: Sequence[float], eta: float, L: float,
                          num_modalities: int) -> BoundParams:
    """Take ``delta`` as the largest per-modality gradient norm seen so far."""
    norms = list(gradient_norms)
    if not norms:
        raise ValueError("gradient-norm trace is empty")
    return BoundParams(eta, L, float(max(norms)), num_modalities)
