"""Pure-numpy reference implementations of the hot geometry kernels.

These are the fallback path when numba is unavailable or disabled via
``DCSNET_KERNELS=numpy``; semantics are identical to the jitted twins.
"""

from __future__ import annotations

import numpy as np

INF = np.inf


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def fps_indices(points: np.ndarray, k: int, seed_index: int) -> np.ndarray:
    """Greedy farthest-point sampling; ties broken by lowest index."""
    n = len(points)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    diff = points - points[seed_index]
    best = np.einsum("nd,nd->n", diff, diff)
    for step in range(1, k):
        nxt = int(np.argmax(best))  # argmax returns the first maximum
        chosen[step] = nxt
        diff = points - points[nxt]
        best = np.minimum(best, np.einsum("nd,nd->n", diff, diff))
    return chosen


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest `points` to each query; ties by lowest index."""
    d = pairwise_sqdist(queries, points)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def hungarian(cost: np.ndarray, v0: np.ndarray | None = None) -> tuple[np.ndarray, float, np.ndarray]:
    """Minimum-cost perfect matching on a square cost matrix.

    Jonker-Volgenant: a greedy pass assigns every row whose reduced-cost
    argmin column is free (valid for any initial potentials, so a warm
    start from a previous solve is allowed), then Dijkstra shortest
    augmenting paths resolve the remaining rows. Returns
    (row -> column assignment, total cost, final column potentials).
    """
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"hungarian: cost matrix must be square, got {cost.shape}")
    cost = np.asarray(cost, dtype=np.float64)
    if v0 is None:
        v = cost.min(axis=0).astype(np.float64)  # column reduction
    else:
        if v0.shape != (n,):
            raise ValueError(f"hungarian: warm-start potentials must have shape ({n},)")
        v = np.asarray(v0, dtype=np.float64).copy()

    x = np.full(n, -1, dtype=np.int64)  # row -> column
    y = np.full(n, -1, dtype=np.int64)  # column -> row
    for i in range(n):
        j = int(np.argmin(cost[i] - v))
        if y[j] == -1:
            x[i] = j
            y[j] = i

    for f in np.flatnonzero(x == -1):
        d = cost[f] - v
        pred = np.full(n, f, dtype=np.int64)
        scanned = np.zeros(n, dtype=bool)
        while True:
            masked = np.where(scanned, INF, d)
            jmin = int(np.argmin(masked))
            mu = masked[jmin]
            scanned[jmin] = True
            if y[jmin] == -1:
                endj = jmin
                break
            i = y[jmin]
            red = cost[i] - v - (cost[i, jmin] - v[jmin] - mu)
            better = ~scanned & (red < d)
            d[better] = red[better]
            pred[better] = i
        v[scanned] += d[scanned] - mu
        j = endj
        while True:
            i = pred[j]
            y[j] = i
            x[i], j = j, x[i]
            if i == f:
                break
    total = float(cost[np.arange(n), x].sum())
    return x, total, v
