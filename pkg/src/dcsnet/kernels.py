"""Backend dispatch for the hot geometry kernels.

The environment variable ``DCSNET_KERNELS`` selects the implementation:
``numba`` (jitted loops), ``numpy`` (pure-numpy fallback), or ``auto``
(default: numba when importable). Both backends are semantically
identical; see benchmarks/bench_kernels.py for the speed comparison.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_numpy

_requested = os.environ.get("DCSNET_KERNELS", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"DCSNET_KERNELS must be auto|numba|numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = _kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = _kernels_numpy
        BACKEND = "numpy"


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance matrix between two (·, 3) point arrays."""
    return _impl.pairwise_sqdist(np.ascontiguousarray(a, dtype=np.float64),
                                 np.ascontiguousarray(b, dtype=np.float64))


def fps_indices(points: np.ndarray, k: int, seed_index: int) -> np.ndarray:
    """Farthest-point-sampling index set (greedy max-min, deterministic)."""
    return _impl.fps_indices(np.ascontiguousarray(points, dtype=np.float64), k, seed_index)


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """For each query, indices of its k nearest points (ties by lowest index)."""
    return _impl.knn_indices(np.ascontiguousarray(points, dtype=np.float64),
                             np.ascontiguousarray(queries, dtype=np.float64), k)


def hungarian(cost: np.ndarray, v0: np.ndarray | None = None) -> tuple[np.ndarray, float, np.ndarray]:
    """Minimum-cost perfect matching: (row -> column assignment, total cost,
    final column potentials). Passing the potentials of a previous solve as
    ``v0`` warm-starts the solver; the result is optimal either way."""
    return _impl.hungarian(np.asarray(cost, dtype=np.float64), v0)
