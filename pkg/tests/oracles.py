"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np

from ssmtkrd.reduction import MERGE


def cos(u, v):
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def brute_connections(tokens, set_a, set_b):
    out = []
    for a in set_a:
        best_j, best = None, -math.inf
        for b in set_b:  # ascending, strict > keeps the smaller index on ties
            s = cos(tokens[a], tokens[b])
            if s > best:
                best_j, best = b, s
        out.append((a, best_j, best))
    return out


def two_phase(X, plan, modes):
    """Apply merges connection by connection, then delete every a-row."""
    X = np.asarray(X, dtype=float)
    sums = {}
    for c, mode in zip(plan.connections_retained, modes):
        if mode == MERGE:
            acc, n = sums.get(c.b_index, (X[c.b_index].copy(), 1))
            sums[c.b_index] = (acc + X[c.a_index], n + 1)
    out = X.copy()
    for b, (acc, n) in sums.items():
        out[b] = acc / n
    removed = {c.a_index for c in plan.connections_retained}
    return np.array([out[i] for i in range(len(X)) if i not in removed])


def brute_bipartite(tokens, keep_ratio):
    n = len(tokens)
    n_remove = n - math.ceil(keep_ratio * n - 1e-9)
    evens, odds = list(range(0, n, 2)), list(range(1, n, 2))
    conns = brute_connections(tokens, evens, odds)
    conns.sort(key=lambda c: (-c[2], c[0]))
    chosen = conns[:n_remove]
    removed = {a for a, _, _ in chosen}
    kept = [i for i in range(n) if i not in removed]
    return kept, chosen


def brute_utrc(y, n_remove, mode):
    """UTRC on one ``[L, E]`` row with every retained connection merged or pruned.

    ``mode`` is ``"merge"`` or ``"prune"``; merge sums the target first and
    then its sources in retention order.
    """
    y = [list(map(float, row)) for row in y]
    L = len(y)
    s = [sum(max(0.0, v) for v in row) / len(row) for row in y]
    order = sorted(range(L), key=lambda i: (s[i], i))
    set_a, set_b = sorted(order[:L // 2]), sorted(order[L // 2:])
    conns = brute_connections(y, set_a, set_b)
    conns.sort(key=lambda c: (-c[2], c[0]))
    chosen = conns[:n_remove]
    out = [row[:] for row in y]
    if mode == "merge":
        groups = {}
        for a, b, _ in chosen:
            groups.setdefault(b, []).append(a)
        for b, sources in groups.items():
            acc = np.array(y[b])
            for a in sources:
                acc = acc + np.array(y[a])
            out[b] = list(acc / (len(sources) + 1))
    removed = {a for a, _, _ in chosen}
    kept = [i for i in range(L) if i not in removed]
    return np.array([out[i] for i in kept]), kept, set_b
