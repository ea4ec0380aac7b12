"""dcsnet: leakage-free point-cloud pretraining with differentiable center sampling."""

from . import (autodiff, backbone, checkpoint, config, data, geometry, gradcheck,
               kernels, nn, optim, pipeline, rng, sampler)
from .autodiff import ShapeError, Tensor
from .geometry import CenterSet, Matching, PointCloud

__version__ = "0.1.0"

__all__ = [
    "autodiff", "backbone", "checkpoint", "config", "data", "geometry", "gradcheck",
    "kernels", "nn", "optim", "pipeline", "rng", "sampler",
    "Tensor", "ShapeError", "PointCloud", "CenterSet", "Matching", "__version__",
]
