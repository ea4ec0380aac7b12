"""Numba-jitted twins of the hot geometry kernels (see _kernels_numpy)."""

from __future__ import annotations

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def pairwise_sqdist(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            out[i, j] = dx * dx + dy * dy + dz * dz
    return out


@njit(cache=True)
def fps_indices(points, k, seed_index):
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    best = np.empty(n)
    for i in range(n):
        dx = points[i, 0] - points[seed_index, 0]
        dy = points[i, 1] - points[seed_index, 1]
        dz = points[i, 2] - points[seed_index, 2]
        best[i] = dx * dx + dy * dy + dz * dz
    for step in range(1, k):
        nxt = 0
        far = -1.0
        for i in range(n):
            if best[i] > far:  # strict: ties keep the lowest index
                far = best[i]
                nxt = i
        chosen[step] = nxt
        for i in range(n):
            dx = points[i, 0] - points[nxt, 0]
            dy = points[i, 1] - points[nxt, 1]
            dz = points[i, 2] - points[nxt, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best[i]:
                best[i] = d
    return chosen


@njit(cache=True)
def knn_indices(points, queries, k):
    n = points.shape[0]
    g = queries.shape[0]
    out = np.empty((g, k), dtype=np.int64)
    d = np.empty(n)
    taken = np.empty(n, dtype=np.bool_)
    for q in range(g):
        for i in range(n):
            dx = points[i, 0] - queries[q, 0]
            dy = points[i, 1] - queries[q, 1]
            dz = points[i, 2] - queries[q, 2]
            d[i] = dx * dx + dy * dy + dz * dz
            taken[i] = False
        for slot in range(k):
            best = -1
            bestd = INF
            for i in range(n):
                if not taken[i] and d[i] < bestd:
                    bestd = d[i]
                    best = i
            taken[best] = True
            out[q, slot] = best
    return out


@njit(cache=True)
def _lapjv_core(cost, v):
    """Jonker-Volgenant assignment given initial column potentials v.

    Greedy phase: a row is pre-assigned only when the argmin column of its
    reduced costs is free, which keeps every assigned pair at its row
    minimum regardless of where v came from (cold start or a warm start
    from a previous, slightly different cost matrix). Remaining free rows
    are resolved by Dijkstra shortest augmenting paths.
    """
    n = cost.shape[0]
    x = np.full(n, -1, dtype=np.int64)  # row -> column
    y = np.full(n, -1, dtype=np.int64)  # column -> row
    for i in range(n):
        best = INF
        jbest = -1
        for j in range(n):
            red = cost[i, j] - v[j]
            if red < best:
                best = red
                jbest = j
        if y[jbest] == -1:
            x[i] = jbest
            y[jbest] = i

    d = np.empty(n)
    pred = np.empty(n, dtype=np.int64)
    todo = np.empty(n, dtype=np.int64)  # unscanned columns, swap-removed when scanned
    done = np.empty(n, dtype=np.int64)
    for f in range(n):
        if x[f] != -1:
            continue
        for j in range(n):
            d[j] = cost[f, j] - v[j]
            pred[j] = f
            todo[j] = j
        ntodo = n
        ndone = 0
        mu = 0.0
        endj = -1
        while True:
            mu = INF
            pos = -1
            jmin = -1
            for t in range(ntodo):
                j = todo[t]
                if d[j] < mu or (d[j] == mu and j < jmin):
                    mu = d[j]
                    pos = t
                    jmin = j
            todo[pos] = todo[ntodo - 1]
            ntodo -= 1
            done[ndone] = jmin
            ndone += 1
            if y[jmin] == -1:
                endj = jmin
                break
            i = y[jmin]
            h = cost[i, jmin] - v[jmin] - mu
            for t in range(ntodo):
                k = todo[t]
                red = cost[i, k] - v[k] - h
                if red < d[k]:
                    d[k] = red
                    pred[k] = i
        for t in range(ndone):
            j = done[t]
            v[j] += d[j] - mu
        j = endj
        while True:
            i = pred[j]
            y[j] = i
            nxt = x[i]
            x[i] = j
            if i == f:
                break
            j = nxt
    return x


def hungarian(cost: np.ndarray, v0: np.ndarray | None = None) -> tuple[np.ndarray, float, np.ndarray]:
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"hungarian: cost matrix must be square, got {cost.shape}")
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if v0 is None:
        v = cost.min(axis=0).astype(np.float64)  # column reduction
    else:
        if v0.shape != (n,):
            raise ValueError(f"hungarian: warm-start potentials must have shape ({n},)")
        v = np.ascontiguousarray(v0, dtype=np.float64).copy()
    assignment = _lapjv_core(cost, v)
    total = float(cost[np.arange(n), assignment].sum())
    return assignment, total, v
