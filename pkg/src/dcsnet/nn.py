"""Layers, parameters and stochastic ops built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class Parameter(Tensor):
    """A named, optionally frozen leaf tensor.

    When ``trainable`` is False no gradient is materialized and the
    optimizer leaves the values bit-identical.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    """Container base: tracks child modules/parameters by attribute name."""

    training: bool = True

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for attr, value in vars(self).items():
            if attr.startswith("_"):  # shared references, not owned state
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = path
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{path}.{i}."))
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        out.append((item.name, item))
        names = [n for n, _ in out]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in module tree")
        return out

    def _children(self):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def train(self):
        self.training = True
        for child in self._children():
            child.train()
        return self

    def eval(self):
        self.training = False
        for child in self._children():
            child.eval()
        return self

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.trainable = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, arr in self._named_buffers():
            state[name] = arr.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self._named_buffers())
        for name, arr in state.items():
            if name in params:
                if params[name].shape != arr.shape:
                    raise ShapeError(f"parameter {name}: shape {arr.shape} != {params[name].shape}")
                params[name].data = np.asarray(arr, dtype=np.float64).copy()
            elif name in buffers:
                buffers[name][...] = arr
            else:
                raise KeyError(f"unknown entry in state dict: {name}")

    def _named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Module):
                out.extend(value._named_buffers(prefix=path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item._named_buffers(prefix=f"{path}.{i}."))
            elif isinstance(value, np.ndarray) and attr.startswith("running_"):
                out.append((path, value))
        return out


def _kaiming(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """Affine map on the last axis; shared across all leading axes."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            w = _kaiming(rng, in_features, (in_features, out_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.weight) + self.bias


class BatchNorm1d(Module):
    """Normalizes features over the leading (batch/point) axis.

    Train mode uses batch statistics and updates running estimates with
    momentum 0.1; eval mode uses the running estimates. Train mode on a
    single row is rejected (variance undefined).
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise ShapeError(f"BatchNorm1d expects a 2-d input, got {x.shape}")
        if self.training:
            if x.shape[0] < 2:
                raise ShapeError("BatchNorm1d in train mode needs batch size >= 2")
            mu = x.mean(axis=0)
            centered = x - mu
            var = (centered * centered).mean(axis=0)
            n = x.shape[0]
            self.running_mean += self.momentum * (mu.data - self.running_mean)
            self.running_var += self.momentum * (var.data * n / (n - 1) - self.running_var)
            xhat = centered / ad.sqrt(var + self.eps)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xhat * self.gamma + self.beta


class LayerNorm(Module):
    """Normalizes over the last axis with learned scale and shift."""

    def __init__(self, num_features: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / ad.sqrt(var + self.eps) * self.gamma + self.beta


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator, zero_init_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero_init=(zero_init_last and i == len(widths) - 2))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(axis=axis, keepdims=True).detach()
    return shifted - ad.log(ad.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under `logits` rows."""
    logp = log_softmax(logits, axis=-1)
    picked = ad.gather(logp.reshape((-1, logits.shape[-1])), np.arange(len(labels)), axis=0)
    onehot = np.zeros(picked.shape)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return -(picked * onehot).sum() / len(labels)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Gumbel(0,1) noise: -log(-log(u)), u uniform on the open interval."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, temperature: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None, hard: bool = False) -> Tensor:
    """Differentiable categorical relaxation over the last axis.

    Perturbs logits with Gumbel noise and applies a temperature-scaled
    softmax. With ``hard=True`` the forward value is the one-hot argmax
    while the gradient is that of the soft sample (straight-through).
    """
    if temperature <= 0.0:
        raise ValueError(f"gumbel_softmax: temperature must be > 0, got {temperature}")
    if logits.shape[-1] < 2:
        raise ShapeError("gumbel_softmax needs at least 2 categories")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax: pass an rng or explicit noise")
        noise = sample_gumbel(logits.shape, rng)
    soft = ad.softmax((logits + noise) / temperature, axis=-1)
    if not hard:
        return soft
    onehot = np.zeros(soft.shape)
    np.put_along_axis(onehot, soft.data.argmax(axis=-1, keepdims=True), 1.0, axis=-1)
    return soft + Tensor(onehot - soft.data)
