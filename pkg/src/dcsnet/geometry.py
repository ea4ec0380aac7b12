"""Point-cloud kernels: sampling, grouping, and the distance losses.

Chamfer/EMD/weighted-centers are differentiable: nearest-neighbor and
matching index selection happens outside the graph (envelope theorem),
the matched distances flow through the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


@dataclass
class PointCloud:
    """An ordered set of N 3-d points with optional class label."""

    points: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"point cloud must be (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def normalize(self) -> "PointCloud":
        """Center at the origin and scale the farthest point to unit norm."""
        centered = self.points - self.points.mean(axis=0)
        radius = np.linalg.norm(centered, axis=1).max()
        if radius == 0.0:
            raise ValueError("cannot normalize a degenerate (single-location) cloud")
        return PointCloud(centered / radius, label=self.label, id=self.id)


@dataclass
class CenterSet:
    """G center/composition points plus how they were produced."""

    centers: np.ndarray
    source: str = "composition"  # FPS | DCS | composition

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise ValueError(f"centers must be (G, 3), got {self.centers.shape}")
        if not np.isfinite(self.centers).all():
            raise ValueError("centers contain non-finite coordinates")

    def __len__(self) -> int:
        return len(self.centers)


@dataclass
class Matching:
    """Optimal bijection source index -> target index and its total cost."""

    permutation: np.ndarray
    total_cost: float
    duals: np.ndarray | None = None  # column potentials, reusable as a warm start


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, PointCloud):
        return Tensor(x.points)
    return Tensor(np.asarray(x, dtype=np.float64))


def fps(cloud, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling indices; deterministic, ties by lowest index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"fps: k={k} outside [1, {n}]")
    if not 0 <= seed_index < n:
        raise ValueError(f"fps: seed index {seed_index} outside [0, {n})")
    return kernels.fps_indices(pts, k, seed_index)


def chamfer(p, g, form: str = "l2") -> Tensor:
    """Symmetric Chamfer distance, differentiable w.r.t. both point sets.

    l2 form: mean squared nearest-neighbor distance in each direction;
    l1 form: the same with unsquared Euclidean distances.
    """
    if form not in ("l1", "l2"):
        raise ValueError(f"chamfer: form must be l1 or l2, got {form!r}")
    p, g = _as_tensor(p), _as_tensor(g)
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("chamfer: point sets must be non-empty")
    d = kernels.pairwise_sqdist(p.data, g.data)

    def one_way(src, dst, nearest):
        diff = src - ad.gather(dst, nearest, axis=0)
        sq = (diff * diff).sum(axis=1)
        return sq.mean() if form == "l2" else ad.sqrt(sq).mean()

    return one_way(p, g, d.argmin(axis=1)) + one_way(g, p, d.argmin(axis=0))


def emd(p, g, duals: np.ndarray | None = None) -> tuple[Tensor, Matching]:
    """Earth Mover's Distance between equal-size sets: min-cost bijection.

    The optimal matching is found by the Jonker-Volgenant algorithm on the
    Euclidean cost matrix; gradients flow through the matched distances
    at the fixed optimal assignment. ``duals`` from a previous matching of
    nearby point sets warm-starts the solver (the result stays optimal).
    """
    p, g = _as_tensor(p), _as_tensor(g)
    if p.shape[0] != g.shape[0]:
        raise ValueError(f"emd: point sets must have equal size, got {p.shape[0]} and {g.shape[0]}")
    cost = np.sqrt(kernels.pairwise_sqdist(p.data, g.data))
    assignment, total, v = kernels.hungarian(cost, duals)
    diff = p - ad.gather(g, assignment, axis=0)
    loss = ad.sqrt((diff * diff).sum(axis=1)).sum()
    return loss, Matching(permutation=assignment, total_cost=float(loss.data), duals=v)


def mmd(generated, reference, metric: str = "cd") -> Tensor:
    """Set-level distance: mean over reference clouds of the min metric to any generated cloud."""
    if metric not in ("cd", "emd"):
        raise ValueError(f"mmd: metric must be cd or emd, got {metric!r}")
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("mmd: both sets must be non-empty")
    total = None
    for x in reference:
        best = None
        for y in generated:
            d = chamfer(x, y, form="l2") if metric == "cd" else emd(x, y)[0]
            if best is None or d.data < best.data:
                best = d
        total = best if total is None else total + best
    return total / len(reference)


def weighted_centers(points, weights, normalize_columns: bool = True) -> Tensor:
    """Centers as weight-mass-weighted means of the points (G, 3).

    With column normalization (the default) every center is a convex
    combination of the points; without it the literal weighted sum is used.
    """
    points, weights = _as_tensor(points), _as_tensor(weights)
    if points.shape[0] != weights.shape[0]:
        raise ValueError(f"weighted_centers: {points.shape[0]} points vs {weights.shape[0]} weight rows")
    raw = weights.T @ points
    if not normalize_columns:
        return raw
    colsum = weights.data.sum(axis=0)
    bad = np.flatnonzero(colsum <= 0.0)
    if bad.size:
        raise ValueError(f"weighted_centers: column {bad[0]} has zero total weight")
    return raw / weights.sum(axis=0).reshape((-1, 1))


def knn_group(cloud, centers, k: int) -> tuple[Tensor, np.ndarray]:
    """G patches of the k points nearest each center, in center-relative coordinates.

    Returns (patches tensor of shape (G, k, 3), index array (G, k)).
    Patches are differentiable w.r.t. both the points and the centers.
    """
    points = _as_tensor(cloud)
    centers = _as_tensor(centers)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"knn_group: k={k} exceeds point count {n}")
    idx = kernels.knn_indices(points.data, centers.data, k)
    g = centers.shape[0]
    gathered = ad.gather(points, idx.ravel(), axis=0).reshape((g, k, 3))
    return gathered - centers.reshape((g, 1, 3)), idx


def sphere_samples(n: int, method: str = "fibonacci", rng: np.random.Generator | None = None) -> np.ndarray:
    """n unit-norm samples on the canonical sphere.

    "fibonacci" is the deterministic golden-angle lattice; "uniform-random"
    draws isotropic Gaussians and normalizes (requires an rng).
    """
    if n < 1:
        raise ValueError("sphere_samples: n must be >= 1")
    if method == "fibonacci":
        i = np.arange(n, dtype=np.float64)
        z = 1.0 - (2.0 * i + 1.0) / n
        phi = i * np.pi * (3.0 - np.sqrt(5.0))
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    elif method == "uniform-random":
        if rng is None:
            raise ValueError("sphere_samples: uniform-random requires an rng")
        pts = rng.normal(size=(n, 3))
    else:
        raise ValueError(f"sphere_samples: unknown method {method!r}")
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)
