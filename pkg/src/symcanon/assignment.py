"""Linear assignment: an O(n^3) exact solver and a factorial oracle.

``hungarian_max`` maximizes sum_i C[i, perm[i]] over permutations using
shortest augmenting paths with dual potentials (Jonker-Volgenant style) on
the negated matrix.  ``brute_force_lap`` enumerates all n! permutations and
is the test oracle for n <= 8.
"""

from __future__ import annotations

import itertools

import numpy as np

Array = np.ndarray


def _check_matrix(c: Array) -> Array:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise ValueError(f"cost matrix must be square and non-empty, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    return c


def assignment_value(c: Array, perm) -> float:
    """Sum of selected entries in row order (shared by solver and oracle)."""
    perm = np.asarray(perm, dtype=np.int64)
    return float(c[np.arange(c.shape[0]), perm].sum())


def _solve_min(cost: Array) -> Array:
    """Exact min-cost assignment; returns row -> column mapping.

    Classic potentials + augmenting-path formulation, one Dijkstra-like scan
    per row, O(n^3) total.  Deterministic: scan order breaks ties.
    """
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # p[j] = row assigned to column j (1-based; 0 is the virtual root)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    cols = np.arange(n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            # argmin over free columns; np.argmin scans left to right, so
            # ties resolve to the smallest column index deterministically
            masked = np.where(free, minv, INF)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[p[1:] - 1] = cols[1:] - 1
    return perm


def hungarian_max(c: Array) -> tuple[Array, float]:
    """Maximum-weight perfect matching on a square matrix.

    Returns (perm, objective) with perm[i] the column matched to row i.
    """
    c = _check_matrix(c)
    perm = _solve_min(-c)
    return perm, assignment_value(c, perm)


def brute_force_lap(c: Array) -> tuple[Array, float]:
    """Exhaustive maximization; ties resolved to the lexicographically
    smallest permutation.  Guard-railed to n <= 8."""
    c = _check_matrix(c)
    n = c.shape[0]
    if n > 8:
        raise ValueError(f"brute force limited to n <= 8, got n = {n}")
    best_perm = None
    best_val = -np.inf
    for perm in itertools.permutations(range(n)):
        val = assignment_value(c, perm)
        if val > best_val:
            best_val = val
            best_perm = perm
    return np.asarray(best_perm, dtype=np.int64), best_val
