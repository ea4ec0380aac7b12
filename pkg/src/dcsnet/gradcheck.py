"""Central finite-difference verification of every differentiable operation."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import backbone, geometry, nn, sampler
from .autodiff import Tensor

REL_TOL = 1e-4
STEP = 1e-5


def finite_difference_gradient(f, x0: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central finite differences of scalar-valued f at x0."""
    num = np.zeros_like(x0)
    flat = num.ravel()
    base = x0.ravel()
    for i in range(base.size):
        xp, xm = base.copy(), base.copy()
        xp[i] += step
        xm[i] -= step
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * step)
    return num


def check_gradient(build_loss, x0: np.ndarray, rel_tol: float = REL_TOL, step: float = STEP) -> float:
    """Max relative error between the analytic and numeric gradient.

    `build_loss` maps a Tensor to a scalar Tensor; it is re-invoked for
    every probe so any internal index selection is recomputed.
    """
    x = Tensor(np.asarray(x0, dtype=np.float64).copy(), requires_grad=True)
    loss = build_loss(x)
    ad.backward(loss)
    analytic = x.grad.copy()
    numeric = finite_difference_gradient(lambda v: build_loss(Tensor(v)).item(), x0, step)
    scale = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / scale))


def _cases(rng: np.random.Generator, instances: int):
    """Yield (name, build_loss, input) probes for every differentiable op."""
    for trial in range(instances):
        x0 = rng.uniform(-2.0, 2.0, size=(4, 5))
        w = rng.uniform(-1.0, 1.0, size=(5, 3))
        yield "elementwise", lambda x, w=w: (ad.relu(x) * x + ad.exp(0.3 * x)).sum() + ad.log(x * x + 1.0).mean(), x0
        yield "matmul+softmax", lambda x, w=w: (ad.softmax(x @ w, axis=1) * (x @ w)).sum(), x0
        yield "reductions", lambda x: x.min(axis=1).sum() + x.max(axis=0).sum() + ad.sqrt(x * x + 0.5).mean(), x0

        p = rng.uniform(-1.0, 1.0, size=(6, 3))
        g = rng.uniform(-1.0, 1.0, size=(5, 3))
        g6 = rng.uniform(-1.0, 1.0, size=(6, 3))
        yield "chamfer_l2", lambda x, g=g: geometry.chamfer(x, g, form="l2"), p
        yield "chamfer_l1", lambda x, g=g: geometry.chamfer(x, g, form="l1"), p
        yield "emd", lambda x, g6=g6: geometry.emd(x, g6)[0], p

        wts = rng.dirichlet(np.ones(4), size=6)
        yield "weighted_centers", lambda x, wts=wts: (geometry.weighted_centers(x, Tensor(wts)) ** 2.0).sum(), p

        noise = nn.sample_gumbel((6, 4), rng)
        proj = rng.uniform(-1.0, 1.0, size=(3, 4))
        yield ("gumbel_softmax",
               lambda x, noise=noise, proj=proj, wts=wts:
               (nn.gumbel_softmax(x @ Tensor(proj), 0.7, noise=noise) * wts).sum(), p)

        seed = int(rng.integers(2**31))
        init = np.random.default_rng(seed)
        enc = sampler.SphereEncoder(init, latent_width=6, k=4)
        cloud = rng.uniform(-1.0, 1.0, size=(12, 3))
        yield "encoder", lambda x, enc=enc: (enc(x) ** 2.0).sum(), cloud

        dec = sampler.SphereDecoder(init, latent_width=6, hidden=10)
        sph = geometry.sphere_samples(8)
        lat = rng.uniform(-1.0, 1.0, size=(6,))
        yield "decoder", lambda l, dec=dec, sph=sph: (dec(l, sph) ** 2.0).sum(), lat

        comp = sampler.CompositionNet(init, group_count=4, depth=2, hidden=8)
        yield "composition_net", lambda x, comp=comp, wts=wts: (comp(x) * wts).sum(), p

        pe = backbone.PatchEmbed(init, 6)
        patch = rng.uniform(-1.0, 1.0, size=(4, 3))
        yield "patch_embed", lambda x, pe=pe: (pe(x) ** 2.0).sum(), patch


def run_suite(instances: int = 20, seed: int = 0, rel_tol: float = REL_TOL,
              verbose: bool = False) -> dict[str, float]:
    """Run all probes; returns worst relative error per operation name."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, build, x0 in _cases(rng, instances):
        err = check_gradient(build, x0, rel_tol)
        worst[name] = max(worst.get(name, 0.0), err)
        if verbose and err >= rel_tol:
            print(f"FAIL {name}: rel error {err:.3e}")
    return worst


def main(instances: int = 20, seed: int = 0) -> int:
    worst = run_suite(instances=instances, seed=seed, verbose=True)
    ok = True
    for name, err in sorted(worst.items()):
        status = "ok" if err < REL_TOL else "FAIL"
        print(f"{status:4s} {name:20s} worst rel error {err:.3e}")
        ok = ok and err < REL_TOL
    return 0 if ok else 1
