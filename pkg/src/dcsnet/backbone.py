"""Toy masked point autoencoder and classification head.

Patches are embedded by a shared PointNet-style MLP with max-pooling,
positions enter only through a small MLP of each patch center, and a
pre-norm transformer reconstructs the masked patches (pretraining) or
feeds a [CLS]-token classifier (finetuning).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry, nn
from .autodiff import Tensor


@dataclass
class BackboneConfig:
    embed_width: int = 96
    encoder_blocks: int = 3
    heads: int = 4
    mask_ratio: float = 0.6
    decoder_blocks: int = 1
    mlp_ratio: int = 4
    dropout: float = 0.5

    def __post_init__(self):
        if self.embed_width % self.heads != 0:
            raise ValueError("embed_width must be divisible by heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0, 1)")


class PatchEmbed(nn.Module):
    """Shared per-point MLP (3 -> 64 -> D) followed by max-pool over the patch."""

    def __init__(self, rng: np.random.Generator, embed_width: int):
        self.embed_width = embed_width
        self.mlp = nn.MLP([3, 64, embed_width], rng)

    def __call__(self, patches) -> Tensor:
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=np.float64))
        single = x.ndim == 2
        if single:
            x = x.reshape((1,) + x.shape)
        g, k, _ = x.shape
        if k == 0:
            raise ValueError("patch_embed: empty patch")
        feats = self.mlp(x.reshape((g * k, 3))).reshape((g, k, self.embed_width)).max(axis=1)
        return feats.reshape((self.embed_width,)) if single else feats


class MultiHeadAttention(nn.Module):
    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        self.heads = heads
        self.head_width = width // heads
        self.q = nn.Linear(width, width, rng)
        self.k = nn.Linear(width, width, rng)
        self.v = nn.Linear(width, width, rng)
        self.proj = nn.Linear(width, width, rng)

    def __call__(self, x: Tensor, return_weights: bool = False):
        t, d = x.shape
        h, dh = self.heads, self.head_width

        def split(z):  # (T, D) -> (H, T, dh)
            return z.reshape((t, h, dh)).transpose((1, 0, 2))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ad.softmax((q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(dh)), axis=-1)
        out = self.proj((scores @ v).transpose((1, 0, 2)).reshape((t, d)))
        return (out, scores) if return_weights else out


class TransformerBlock(nn.Module):
    """Pre-norm block: attention and MLP sublayers with residual connections."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, mlp_ratio: int = 4):
        self.norm1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.MLP([width, mlp_ratio * width, width], rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MaskedPointAutoencoder(nn.Module):
    """Encodes visible patch tokens, decodes masked positions to k x 3 points."""

    def __init__(self, rng: np.random.Generator, config: BackboneConfig, points_per_patch: int):
        d = config.embed_width
        self.config = config
        self.points_per_patch = points_per_patch
        self.patch_embed = PatchEmbed(rng, d)
        self.pos_mlp = nn.MLP([3, 64, d], rng)
        self.encoder = [TransformerBlock(rng, d, config.heads, config.mlp_ratio)
                        for _ in range(config.encoder_blocks)]
        self.decoder = [TransformerBlock(rng, d, config.heads, config.mlp_ratio)
                        for _ in range(config.decoder_blocks)]
        self.mask_token = nn.Parameter(rng.normal(0.0, 0.02, size=d))
        self.head = nn.Linear(d, points_per_patch * 3, rng)

    def mask_indices(self, group_count: int, rng: np.random.Generator) -> np.ndarray:
        masked = int(self.config.mask_ratio * group_count)
        if masked == 0 or masked == group_count:
            raise ValueError(f"mask ratio {self.config.mask_ratio} leaves no masked or no visible tokens")
        return np.sort(rng.choice(group_count, size=masked, replace=False))

    def encode_decode(self, patches, centers, mask_rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
        """Returns (reconstructed masked patches (masked, k, 3), masked indices)."""
        tokens = self.patch_embed(patches)
        g = tokens.shape[0]
        masked = self.mask_indices(g, mask_rng)
        visible = np.setdiff1d(np.arange(g), masked)

        centers_t = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=np.float64))
        pos = self.pos_mlp(centers_t)
        x = ad.gather(tokens, visible, axis=0) + ad.gather(pos, visible, axis=0)
        for block in self.encoder:
            x = block(x)

        d = self.config.embed_width
        mask_tok = ad.broadcast_to(self.mask_token.reshape((1, d)), (len(masked), d))
        full = ad.concat([x, mask_tok + ad.gather(pos, masked, axis=0)], axis=0)
        for block in self.decoder:
            full = block(full)
        out = ad.gather(full, np.arange(len(visible), g), axis=0)
        pred = self.head(out).reshape((len(masked), self.points_per_patch, 3))
        return pred, masked

    def encode_tokens(self, patches, centers) -> Tensor:
        """Full (unmasked) encoder pass over all patch tokens."""
        tokens = self.patch_embed(patches)
        centers_t = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=np.float64))
        x = tokens + self.pos_mlp(centers_t)
        for block in self.encoder:
            x = block(x)
        return x


class CloudClassifier(nn.Module):
    """[CLS]-token classifier on top of the masked autoencoder's encoder."""

    def __init__(self, rng: np.random.Generator, autoencoder: MaskedPointAutoencoder, num_classes: int):
        d = autoencoder.config.embed_width
        # shared reference; the autoencoder owns these parameters
        self._autoencoder = autoencoder
        self.cls_token = nn.Parameter(rng.normal(0.0, 0.02, size=d))
        self.head = nn.MLP([d, d // 2, num_classes], rng)
        self.dropout_p = autoencoder.config.dropout

    def __call__(self, patches, centers, rng: np.random.Generator | None = None) -> Tensor:
        tokens = self._autoencoder.patch_embed(patches)
        centers_t = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=np.float64))
        x = tokens + self._autoencoder.pos_mlp(centers_t)
        d = self._autoencoder.config.embed_width
        x = ad.concat([self.cls_token.reshape((1, d)), x], axis=0)
        for block in self._autoencoder.encoder:
            x = block(x)
        cls = ad.gather(x, np.array([0]), axis=0)
        if self.training and rng is None:
            raise ValueError("classifier in train mode needs an rng for dropout")
        cls = nn.dropout(cls, self.dropout_p, rng, self.training)
        return self.head(cls).reshape((-1,))


def local_recon_loss(predicted: Tensor, target) -> Tensor:
    """Mean l2 Chamfer distance over masked patches (order-free within a patch)."""
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if predicted.shape != tgt.shape:
        raise ValueError(f"patch shape mismatch: {predicted.shape} vs {tgt.shape}")
    m = predicted.shape[0]
    total = None
    for i in range(m):
        idx = np.array([i])
        d = geometry.chamfer(ad.gather(predicted, idx, axis=0).reshape(predicted.shape[1:]),
                             ad.gather(tgt, idx, axis=0).reshape(tgt.shape[1:]), form="l2")
        total = d if total is None else total + d
    return total / m
