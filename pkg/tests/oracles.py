"""Independent reference computations used by the tests.

None of these touch the package's graph machinery, DP solver or subset-form
Shapley code; they are deliberately naive.
"""

import itertools
import math

import numpy as np


def central_diff(f, arrays, step=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            up = f()
            a[i] = old - step
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def act(name, x):
    return {"relu": lambda v: np.maximum(v, 0), "tanh": np.tanh,
            "sigmoid": lambda v: 1 / (1 + np.exp(-v)), "identity": lambda v: v}[name](x)


def mlp_forward(weights, biases, acts, x):
    """Straight-line matrix chain."""
    h = np.asarray(x, float)
    for w, b, a in zip(weights, biases, acts):
        h = act(a, h @ np.asarray(w).T + np.asarray(b))
    return h


def softmax_xent(logits, labels):
    logits = np.asarray(logits, float)
    total = 0.0
    for row, y in zip(logits, labels):
        e = np.exp(row - row.max())
        p = e / e.sum()
        total += -math.log(p[y])
    return total / len(labels)


def permutation_shapley(value, m):
    """Average marginal contribution over all m! player orderings."""
    phi = np.zeros(m)
    perms = list(itertools.permutations(range(m)))
    for order in perms:
        coalition = set()
        for player in order:
            before = value(frozenset(coalition))
            coalition.add(player)
            phi[player] += value(frozenset(coalition)) - before
    return phi / len(perms)


def exhaustive_knapsack(values, times, budget):
    """Best value over every feasible integer count vector (enumerated)."""
    values = [float(v) for v in values]
    times = [int(t) for t in times]
    best = 0.0
    best_vec = [0] * len(values)

    def rec(i, remaining, acc, vec):
        nonlocal best, best_vec
        if i == len(values):
            if acc > best:
                best, best_vec = acc, list(vec)
            return
        for c in range(remaining // times[i] + 1):
            vec.append(c)
            rec(i + 1, remaining - c * times[i], acc + c * values[i], vec)
            vec.pop()

    rec(0, budget, 0.0, [])
    return best, best_vec


def literal_bound(sizes, eta, L, delta, m):
    """Term-by-term evaluation with explicit inner products (1-based as written)."""
    E = len(sizes)
    c = {j + 1: sizes[j] for j in range(E)}
    total = 0.0
    for e in range(1, E + 1):
        prod = 1.0
        for j in range(e, E):
            prod *= 2 + 2 * eta ** 2 * L ** 2 * c[j]
        total += prod * (m - c[e])
    return 2 * eta ** 2 * total * delta ** 2
