"""The learned sampling pipeline: canonical sphere mapping, composition
learning, and differentiable center sampling (DCS).

Stage 1 trains an encoder/decoder pair that reconstructs a cloud from
unit-sphere samples; stage 2 trains a per-point composition network on the
sphere; stage 3 reuses that network as a differentiable center sampler
driven by Gumbel-softmax weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry, kernels, nn
from .autodiff import Tensor


@dataclass
class SamplerConfig:
    group_count: int = 64
    points_per_group: int = 32
    dcs_depth: int = 2
    hidden_width: int = 128
    latent_width: int = 128
    encoder_knn: int = 8
    decoder_width: int = 256
    gumbel_temperature: float = 1.0
    temperature_anneal: float = 1.0  # multiplicative per epoch; 1.0 = no anneal
    gumbel_hard: bool = False
    uniform_prior_weight: float = 0.0
    column_normalize: bool = True
    lambda_emd: float = 1.0
    sphere_method: str = "fibonacci"

    def __post_init__(self):
        if self.group_count < 2:
            raise ValueError("group_count must be >= 2")
        if self.dcs_depth not in (1, 2, 3):
            raise ValueError("dcs_depth must be 1, 2 or 3")
        if self.gumbel_temperature <= 0.0:
            raise ValueError("gumbel_temperature must be > 0")


@dataclass
class SphereSamples:
    """Unit-sphere samples, optionally with their decoded cloud-space images."""

    samples: np.ndarray
    decoded: Tensor | None = None

    def __post_init__(self):
        norms = np.linalg.norm(self.samples, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise ValueError("sphere samples must have unit norm")
        if self.decoded is not None and self.decoded.shape[0] != len(self.samples):
            raise ValueError("decoded point count must match sample count")

    def __len__(self) -> int:
        return len(self.samples)


class SphereEncoder(nn.Module):
    """Single edge-convolution over the kNN graph, max-pooled to a latent vector.

    Per-point features are max over neighbors j of MLP([p_i ; p_j - p_i]);
    the neighbor graph is built over distinct point locations so duplicated
    points leave the latent unchanged.
    """

    def __init__(self, rng: np.random.Generator, latent_width: int = 128, k: int = 8):
        self.k = k
        self.latent_width = latent_width
        self.edge_mlp = nn.MLP([6, 32, latent_width], rng)

    def __call__(self, points, neighbor_idx: np.ndarray | None = None) -> Tensor:
        """Encode one cloud (N, 3) -> (latent,) or a batch (B, N, 3) -> (B, latent).

        ``neighbor_idx`` lets callers reuse the (per-cloud) kNN graph, which
        depends only on the fixed point coordinates.
        """
        pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
        if pts.ndim == 3:  # a batch of clouds -> (B, latent)
            b, n, _ = pts.shape
            flat = pts.reshape((b * n, 3))
            if neighbor_idx is None:
                neighbor_idx = np.stack([self._neighbor_indices(pts.data[c]) for c in range(b)])
            idx = (neighbor_idx + (np.arange(b) * n)[:, None, None]).reshape(b * n, self.k)
            feats = self._edge_features(flat, idx, b * n)
            return feats.reshape((b, n, self.latent_width)).max(axis=1)
        n = pts.shape[0]
        if neighbor_idx is None:
            neighbor_idx = self._neighbor_indices(pts.data)
        return self._edge_features(pts, neighbor_idx, n).max(axis=0)

    def _edge_features(self, pts: Tensor, idx: np.ndarray, n: int) -> Tensor:
        """Per-point features: max over the k neighbors of MLP([p_i ; p_j - p_i])."""
        xi = ad.broadcast_to(pts.reshape((n, 1, 3)), (n, self.k, 3))
        xj = ad.gather(pts, idx.ravel(), axis=0).reshape((n, self.k, 3))
        edges = ad.concat([xi, xj - xi], axis=2).reshape((n * self.k, 6))
        return self.edge_mlp(edges).reshape((n, self.k, self.latent_width)).max(axis=1)

    def _neighbor_indices(self, pts: np.ndarray) -> np.ndarray:
        uniq, first = np.unique(pts, axis=0, return_index=True)
        if len(uniq) < self.k + 1:
            raise ValueError(f"encoder needs at least {self.k + 1} distinct locations, got {len(uniq)}")
        # k nearest distinct locations; column 0 is always the point's own
        # location (distance zero), so dropping it excludes self/duplicates
        nbr = kernels.knn_indices(uniq, pts, self.k + 1)
        return first[nbr[:, 1:]]


class SphereDecoder(nn.Module):
    """Maps [latent ; sphere sample] through a 3-layer MLP to cloud space."""

    def __init__(self, rng: np.random.Generator, latent_width: int = 128, hidden: int = 256):
        self.latent_width = latent_width
        self.mlp = nn.MLP([latent_width + 3, hidden, hidden, 3], rng)

    def __call__(self, latent: Tensor, samples: np.ndarray) -> Tensor:
        if latent.shape[-1] != self.latent_width:
            raise ValueError(f"latent width {latent.shape[-1]} != model width {self.latent_width}")
        m = len(samples)
        if m < 1:
            raise ValueError("need at least one sphere sample")
        w = self.latent_width
        if latent.ndim == 2:  # a batch of latents -> (B, m, 3)
            b = latent.shape[0]
            tiled = ad.broadcast_to(latent.reshape((b, 1, w)), (b, m, w))
            sph = np.broadcast_to(samples, (b, m, 3))
            out = self.mlp(ad.concat([tiled, Tensor(sph)], axis=2).reshape((b * m, w + 3)))
            return out.reshape((b, m, 3))
        tiled = ad.broadcast_to(latent.reshape((1, w)), (m, w))
        return self.mlp(ad.concat([tiled, Tensor(samples)], axis=1))


class CompositionNet(nn.Module):
    """Per-point assignment network U: coordinates -> row-stochastic group weights.

    Depth-2 default mirrors a (linear, batch-norm, ReLU, linear, batch-norm)
    stack with per-point weight sharing; softmax over groups produces the
    probability map.
    """

    def __init__(self, rng: np.random.Generator, group_count: int, depth: int = 2,
                 hidden: int = 128, zero_init_last: bool = False):
        widths = {1: [3, group_count], 2: [3, hidden, group_count], 3: [3, hidden, hidden, group_count]}[depth]
        self.linears = [
            nn.Linear(a, b, rng, zero_init=(zero_init_last and i == len(widths) - 2))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.norms = [nn.BatchNorm1d(w) for w in widths[1:]]

    def logits(self, points) -> Tensor:
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
        for i, (lin, bn) in enumerate(zip(self.linears, self.norms)):
            x = bn(lin(x))
            if i < len(self.linears) - 1:
                x = ad.relu(x)
        return x

    def __call__(self, points) -> Tensor:
        return ad.softmax(self.logits(points), axis=-1)


@dataclass
class DCSSample:
    """Output of one differentiable center-sampling pass."""

    centers: Tensor
    prob_map: Tensor
    patches: Tensor
    patch_indices: np.ndarray


def stage1_loss(cloud, decoded: Tensor, lambda_emd: float = 1.0) -> Tensor:
    """Reconstruction loss: l2 Chamfer plus (optionally) the EMD term."""
    loss = geometry.chamfer(cloud, decoded, form="l2")
    if lambda_emd != 0.0:
        pts = cloud.points if isinstance(cloud, geometry.PointCloud) else cloud
        if len(pts) != decoded.shape[0]:
            raise ValueError(f"EMD term needs equal sizes, got {len(pts)} and {decoded.shape[0]}")
        emd_term, _ = geometry.emd(cloud, decoded)
        loss = loss + lambda_emd * emd_term
    return loss


def stage2_loss(cloud, sphere: SphereSamples, prob_map: Tensor, normalize_columns: bool = True) -> Tensor:
    """Chamfer between composition points of the decoded sphere and the cloud."""
    if sphere.decoded is None:
        raise ValueError("stage2_loss needs decoded sphere points")
    centers = geometry.weighted_centers(sphere.decoded, prob_map, normalize_columns=normalize_columns)
    return geometry.chamfer(centers, cloud, form="l2")


def forward_map(cloud, sphere: SphereSamples) -> tuple[np.ndarray, np.ndarray]:
    """The learned cloud -> sphere mapping: each point goes to the sphere
    sample whose decoded image is nearest (ties by lowest sample index).

    Returns (per-point sphere coordinates, sample indices).
    """
    if sphere.decoded is None:
        raise ValueError("forward_map needs decoded sphere points")
    pts = cloud.points if isinstance(cloud, geometry.PointCloud) else np.asarray(cloud, dtype=np.float64)
    d = kernels.pairwise_sqdist(pts, sphere.decoded.data)
    idx = d.argmin(axis=1)
    return sphere.samples[idx], idx


def dcs_sample(cloud, net: CompositionNet, config: SamplerConfig,
               rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
               temperature: float | None = None) -> DCSSample:
    """Differentiable center sampling: Gumbel-relaxed assignment weights,
    weighted centers, and fixed-size kNN patches around each center."""
    pts = cloud.points if isinstance(cloud, geometry.PointCloud) else cloud
    pts_t = pts if isinstance(pts, Tensor) else Tensor(np.asarray(pts, dtype=np.float64))
    if pts_t.shape[0] < config.points_per_group:
        raise ValueError("cloud smaller than one patch")
    tau = config.gumbel_temperature if temperature is None else temperature
    logits = net.logits(pts_t)
    q_hat = nn.gumbel_softmax(logits, tau, rng=rng, noise=noise, hard=config.gumbel_hard)
    centers = geometry.weighted_centers(pts_t, q_hat, normalize_columns=config.column_normalize)
    patches, idx = geometry.knn_group(pts_t, centers, config.points_per_group)
    return DCSSample(centers=centers, prob_map=q_hat, patches=patches, patch_indices=idx)


def global_recon_loss(centers, cloud, mode: str = "l2") -> Tensor:
    """Center-reconstruction loss between sampled centers and the cloud.

    Modes: "l1", "l2", "l1+l2", or "mmd" (set-level distance; for a single
    centers/cloud pair it reduces to the l2 Chamfer term).
    """
    if mode == "l1":
        return geometry.chamfer(centers, cloud, form="l1")
    if mode == "l2":
        return geometry.chamfer(centers, cloud, form="l2")
    if mode == "l1+l2":
        return geometry.chamfer(centers, cloud, form="l1") + geometry.chamfer(centers, cloud, form="l2")
    if mode == "mmd":
        return geometry.mmd([centers], [cloud], metric="cd")
    raise ValueError(f"unknown global loss mode {mode!r}")


def uniform_prior_penalty(prob_map: Tensor) -> Tensor:
    """KL divergence of the per-group column mass from the uniform distribution."""
    g = prob_map.shape[1]
    mass = prob_map.mean(axis=0)
    # 0 * log 0 := 0 for degenerate one-hot maps
    zero = mass.data == 0.0
    return (mass * ad.log(mass * g + zero)).sum()


def export_probability_map(path, points: np.ndarray, prob_map: np.ndarray):
    """Write one CSV row per point: x, y, z, argmax group, max prob, all G probs."""
    points = np.asarray(points, dtype=np.float64)
    prob_map = np.asarray(prob_map, dtype=np.float64)
    if len(points) != len(prob_map):
        raise ValueError("points and probability map disagree on row count")
    g = prob_map.shape[1]
    header = "x,y,z,group,max_prob," + ",".join(f"q{j}" for j in range(g))
    rows = np.column_stack([points, prob_map.argmax(axis=1), prob_map.max(axis=1), prob_map])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
