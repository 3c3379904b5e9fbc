"""Central-difference gradient checks for every loss on random small batches."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses as L
from . import ndgrad as nd

GRAD_TOL = 1e-4


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def loss_objectives(n: int = 8, dim: int = 16, queue: int = 12, tau: float = 0.2, seed: int = 0):
    """(name, objective, params) triples covering every loss in :mod:`bsimlab.losses`.

    Objectives take a dict of tensors and return a scalar tensor. Queries
    and keys that must be unit-norm are normalized inside the objective so
    the finite-difference probes stay on the loss's domain.
    """
    rng = np.random.default_rng(seed)
    pairing = np.arange(n)[::-1].copy()
    lam = rng.uniform(0.05, 0.95, n)
    z = {k: rng.standard_normal((n, dim)) for k in ("zm1", "zp2", "zm2", "zp1")}
    keys = _unit(rng.standard_normal((n, dim)))
    qbank = _unit(rng.standard_normal((queue, dim)))

    def batch(P, lambdas=lam):
        return L.BatchEmbeddings(P["zm1"], P["zp2"], P["zm2"], P["zp1"], lambdas, pairing)

    def simclr(P):
        return L.simclr_bsim_loss(batch(P), tau).scalar

    def paired(P):
        return L.simclr_paired_sim_loss(batch(P), tau).scalar

    def ntxent(P):
        return L.nt_xent_baseline(P["za"], P["zb"], tau).scalar

    def moco(P):
        return L.moco_bsim_batch(nd.l2_normalize(P["q"]), keys, keys[pairing], qbank, lam, tau).scalar

    def infonce(P):
        return L.moco_infonce(nd.l2_normalize(P["q"]), keys, qbank, tau).scalar

    def byol(P):
        return L.byol_loss(P["q"], P["z1"]).scalar

    def byol_v0(P):
        return L.byol_bsim_v0(P["q"], P["z1"], P["z2"], lam).scalar

    def byol_v1(P):
        return L.byol_bsim_v1(P["q"], P["z1"], P["z2"], lam).scalar

    def wbsim(P):
        b = batch(P)
        return L.wbsim_combine(
            L.simclr_bsim_loss(b, tau), L.nt_xent_baseline(P["zm1"], P["zp2"], tau), 0.7, 0.3
        ).scalar

    q = rng.standard_normal((n, dim))
    byol_params = {"q": q, "z1": rng.standard_normal((n, dim)), "z2": rng.standard_normal((n, dim))}
    return [
        ("simclr_bsim", simclr, dict(z)),
        ("simclr_paired_sim", paired, dict(z)),
        ("nt_xent", ntxent, {"za": z["zp1"], "zb": z["zp2"]}),
        ("moco_bsim", moco, {"q": q}),
        ("moco_infonce", infonce, {"q": q}),
        ("byol", byol, {"q": q, "z1": byol_params["z1"]}),
        ("byol_bsim_v0", byol_v0, dict(byol_params)),
        ("byol_bsim_v1", byol_v1, dict(byol_params)),
        ("wbsim", wbsim, dict(z)),
    ]


def gradient_suite(n: int = 8, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error per loss."""
    out = {}
    for name, fn, params in loss_objectives(n=n, seed=seed):
        out[name] = grad_error(fn, params, eps)
    return out


def grad_error(fn: Callable, params: dict, eps: float = 1e-5) -> float:
    return nd.grad_check(fn, params, eps=eps).worst
