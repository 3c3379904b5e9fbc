"""Contrastive losses: single-instance baselines and their mixed-instance variants.

Every InfoNCE-style loss in this module is evaluated by one kernel,
:func:`soft_target_nce`: a masked log-softmax over a row of logits and a
row of target weights. A mixed anchor puts weight lambda on its first
parent and 1 - lambda on the second; a plain anchor puts weight 1 on its
single positive. With lambda = 1 both reduce to the same arithmetic, which
is what makes the lambda = 1 twin runs in :mod:`bsimlab.trainkit` bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

from . import ndgrad as nd
from .models import FeatureQueue
from .ndgrad import AntipodalTargets, Tensor

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    w1: float = 1.0
    w2: float = 0.0
    byol_variant: Optional[Literal["v0", "v1"]] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        for w in (self.w1, self.w2):
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"WBSIM weights must lie in [0, 1], got {w}")
        if self.byol_variant not in (None, "v0", "v1"):
            raise ValueError(f"unknown BYOL variant {self.byol_variant!r}")


@dataclass
class LossValue:
    """A differentiable scalar plus per-anchor terms and pair counts.

    ``counts`` is (positive pairs, negative pairs), counted per anchor over
    the opposite view stream: SimCLR gives (2N, 2N(N-1)); the mixed variant
    gives (4N, 2N(N-2)). Same-stream terms enter denominators but are not
    counted.
    """

    scalar: Tensor
    per_anchor: np.ndarray
    counts: tuple[int, int]

    @property
    def value(self) -> float:
        return float(self.scalar.data)


def check_pairing(pairing, n: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=int)
    if pairing.shape != (n,):
        raise ValueError(f"pairing must have length {n}")
    if n % 2:
        raise ValueError(f"batch size must be even, got {n}")
    if np.any(pairing < 0) or np.any(pairing >= n):
        raise ValueError("pairing index out of range")
    if not np.array_equal(pairing[pairing], np.arange(n)):
        raise ValueError("pairing is not an involution")
    if np.any(pairing == np.arange(n)):
        raise ValueError("pairing has a fixed point (an image mixed with itself)")
    return pairing


@dataclass
class BatchEmbeddings:
    """Projections of the four view streams of a mixed batch.

    ``z_mixed_prime[i]`` embeds Mix(t'(x_i), t'(x_j), lambda_i) with
    j = pairing[i]; ``z_plain_dprime`` embeds the plain t'' views. The
    ``z_mixed_dprime`` / ``z_plain_prime`` pair is the mirror image used by
    the second loss term.
    """

    z_mixed_prime: Tensor
    z_plain_dprime: Tensor
    z_mixed_dprime: Tensor
    z_plain_prime: Tensor
    lambdas: np.ndarray
    pairing: np.ndarray

    def __post_init__(self):
        shapes = {t.shape for t in self.streams()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"embedding streams must share one N x Dz shape, got {shapes}")
        n = self.z_mixed_prime.shape[0]
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        if self.lambdas.shape != (n,):
            raise ValueError("need one lambda per anchor")
        if np.any(self.lambdas < 0) or np.any(self.lambdas > 1):
            raise ValueError("lambdas must lie in [0, 1]")
        self.pairing = check_pairing(self.pairing, n)

    def streams(self):
        return (self.z_mixed_prime, self.z_plain_dprime, self.z_mixed_dprime, self.z_plain_prime)

    @property
    def n(self) -> int:
        return self.z_mixed_prime.shape[0]


def soft_target_nce(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Per row r: -sum_c targets[r, c] * log softmax(logits[r])[c].

    The softmax runs over the entries where ``mask`` is True; targets must
    vanish outside the mask.
    """
    if mask is not None and np.any(targets[~mask] != 0):
        raise ValueError("target weight placed on a masked-out logit")
    lse = nd.logsumexp(logits, axis=1, mask=mask)
    logp = logits - lse
    return -nd.tsum(logp * targets, axis=1)


def _simclr_stream(
    anchors: Tensor, positives: Tensor, lambdas: np.ndarray, pairing: np.ndarray, tau: float
) -> Tensor:
    """Per-anchor terms for mixed anchors against the opposite plain stream.

    Denominator of anchor i: every plain view k, plus every other mixed
    anchor k not in {i, pairing[i]}.
    """
    n = anchors.shape[0]
    rows = np.arange(n)
    inv_tau = 1.0 / tau
    cross = nd.cosine_matrix(anchors, positives) * inv_tau
    same = nd.cosine_matrix(anchors, anchors) * inv_tau
    logits = nd.concat([cross, same], axis=1)
    mask = np.ones((n, 2 * n), dtype=bool)
    mask[rows, n + rows] = False
    mask[rows, n + pairing] = False
    targets = np.zeros((n, 2 * n))
    targets[rows, rows] = lambdas
    targets[rows, pairing] += 1.0 - lambdas
    return soft_target_nce(logits, targets, mask)


def simclr_bsim_loss(batch: BatchEmbeddings, tau: float) -> LossValue:
    """Mixed-instance NT-Xent: (1/2N) * sum_i (l'_i + l''_i)."""
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    n = batch.n
    l1 = _simclr_stream(batch.z_mixed_prime, batch.z_plain_dprime, batch.lambdas, batch.pairing, tau)
    l2 = _simclr_stream(batch.z_mixed_dprime, batch.z_plain_prime, batch.lambdas, batch.pairing, tau)
    scalar = (nd.tsum(l1) + nd.tsum(l2)) * (1.0 / (2 * n))
    return LossValue(scalar, l1.data + l2.data, (4 * n, 2 * n * (n - 2)))


def simclr_paired_sim_loss(batch: BatchEmbeddings, tau: float) -> LossValue:
    """Single-positive reference with the mixed loss's denominator.

    Identical to :func:`simclr_bsim_loss` with every lambda fixed to 1: the
    anchor's partner is dropped from the same-stream negatives.
    """
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    n = batch.n
    ones = np.ones(n)
    l1 = _simclr_stream(batch.z_mixed_prime, batch.z_plain_dprime, ones, batch.pairing, tau)
    l2 = _simclr_stream(batch.z_mixed_dprime, batch.z_plain_prime, ones, batch.pairing, tau)
    scalar = (nd.tsum(l1) + nd.tsum(l2)) * (1.0 / (2 * n))
    return LossValue(scalar, l1.data + l2.data, (2 * n, 2 * n * (n - 2)))


def nt_xent_baseline(z_a, z_b, tau: float) -> LossValue:
    """Standard NT-Xent over 2N views; view i's positive is view i +/- N."""
    z_a, z_b = nd.as_tensor(z_a), nd.as_tensor(z_b)
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError("view matrices must share one N x D shape")
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("NT-Xent needs at least 2 samples")
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    views = nd.concat([z_a, z_b], axis=0)
    logits = nd.cosine_matrix(views, views) * (1.0 / tau)
    m = 2 * n
    mask = ~np.eye(m, dtype=bool)
    partner = np.concatenate([np.arange(n, m), np.arange(n)])
    targets = np.zeros((m, m))
    targets[np.arange(m), partner] = 1.0
    per = soft_target_nce(logits, targets, mask)
    return LossValue(nd.mean(per), per.data, (2 * n, 2 * n * (n - 1)))


# ---------------------------------------------------------------------------
# MoCo


def _check_unit(name: str, x: np.ndarray) -> None:
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} must be unit-normalized")


def _moco_logits(q: Tensor, keys: list, queue: np.ndarray, tau: float) -> Tensor:
    cols = [nd.tsum(q * nd.as_tensor(k), axis=1, keepdims=True) for k in keys]
    if queue.shape[0]:
        cols.append(nd.matmul(q, nd.constant(queue.T)))
    return nd.concat(cols, axis=1) * (1.0 / tau)


def _queue_array(queue, dim: int) -> np.ndarray:
    if isinstance(queue, FeatureQueue):
        return queue.keys
    if queue is None:
        return np.zeros((0, dim))
    return np.asarray(queue, dtype=np.float64).reshape(-1, dim)


def moco_bsim_batch(q, k_lam, k_1mlam, queue, lambdas, tau: float) -> LossValue:
    """Mixed-query InfoNCE for a batch of queries (rows of ``q``).

    Z_n = exp(q.k_lam/tau) + exp(q.k_1mlam/tau) + sum_queue exp(q.k/tau);
    L = mean_n[-lam_n log(exp(q.k_lam/tau)/Z_n) - (1-lam_n) log(exp(q.k_1mlam/tau)/Z_n)].
    Keys and queue are constants.
    """
    q = nd.as_tensor(q)
    if q.ndim == 1:
        q = nd.reshape(q, (1, -1))
    n = q.shape[0]
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    lambdas = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), (n,))
    if np.any(lambdas < 0) or np.any(lambdas > 1):
        raise ValueError("lambda must lie in [0, 1]")
    qarr = _queue_array(queue, q.shape[1])
    keys, weights = [], []
    for k, w in ((k_lam, lambdas), (k_1mlam, 1.0 - lambdas)):
        if k is None:
            if np.any(w != 0):
                raise ValueError("a key with nonzero weight is missing")
            continue
        k = np.atleast_2d(k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64))
        _check_unit("keys", k)
        keys.append(nd.constant(k))
        weights.append(w)
    if not keys:
        raise ValueError("at least one positive key is required")
    if len(keys) == 1 and qarr.shape[0] == 0:
        raise ValueError("empty queue with a single key leaves no contrast")
    _check_unit("query", q.data)
    if qarr.shape[0]:
        _check_unit("queue keys", qarr)
    logits = _moco_logits(q, keys, qarr, tau)
    targets = np.zeros(logits.shape)
    for c, w in enumerate(weights):
        targets[:, c] = w
    per = soft_target_nce(logits, targets)
    n_pos = sum(1 for w in weights if np.any(w != 0))
    n_neg = len(keys) - n_pos + qarr.shape[0]
    return LossValue(nd.mean(per), per.data, (n * n_pos, n * n_neg))


def moco_bsim_loss(q, k_lam, k_1mlam, queue, lam: float, tau: float) -> LossValue:
    """Single-query form of :func:`moco_bsim_batch`."""
    return moco_bsim_batch(q, k_lam, k_1mlam, queue, lam, tau)


def moco_infonce(q, k_pos, queue, tau: float, extra_negatives=None) -> LossValue:
    """Single-positive InfoNCE baseline.

    With ``extra_negatives`` (one key per query, e.g. the key of the image
    a query would have been mixed with) the logits are laid out exactly as
    in :func:`moco_bsim_batch`, which then coincides at lambda = 1.
    """
    q = nd.as_tensor(q)
    n = 1 if q.ndim == 1 else q.shape[0]
    if extra_negatives is not None:
        return moco_bsim_batch(q, k_pos, extra_negatives, queue, np.ones(n), tau)
    return moco_bsim_batch(q, k_pos, None, queue, np.ones(n), tau)


# ---------------------------------------------------------------------------
# BYOL


def _rows(x) -> Tensor:
    x = nd.as_tensor(x)
    return nd.reshape(x, (1, -1)) if x.ndim == 1 else x


def _lam_column(lam, n: int) -> np.ndarray:
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("lambda must lie in [0, 1]")
    return lam


def byol_loss(q_pred, z_t) -> LossValue:
    """Baseline BYOL regression: 2 - 2 cos(q_pred, z_t), averaged over rows."""
    q, z = _rows(q_pred), _rows(z_t)
    per = 2.0 - 2.0 * nd.cosine_sim(q, nd.l2_normalize(z))
    return LossValue(nd.mean(per), per.data, (q.shape[0], 0))


def byol_bsim_v0(q_pred, z1_t, z2_t, lam) -> LossValue:
    """2 - 2 [lam cos(q, z1) + (1 - lam) cos(q, z2)], averaged over rows."""
    q, z1, z2 = _rows(q_pred), _rows(z1_t), _rows(z2_t)
    lam = _lam_column(lam, q.shape[0])
    c1 = nd.cosine_sim(q, nd.l2_normalize(z1))
    c2 = nd.cosine_sim(q, nd.l2_normalize(z2))
    per = 2.0 - 2.0 * (c1 * lam + c2 * (1.0 - lam))
    return LossValue(nd.mean(per), per.data, (2 * q.shape[0], 0))


def mixed_target(z1_t, z2_t, lam, eps: float = nd.EPS_NORM) -> Tensor:
    """lam * normalize(z1) + (1 - lam) * normalize(z2), unnormalized."""
    z1, z2 = _rows(z1_t), _rows(z2_t)
    lam = _lam_column(lam, z1.shape[0])[:, None]
    m = nd.l2_normalize(z1) * lam + nd.l2_normalize(z2) * (1.0 - lam)
    if np.any(np.linalg.norm(m.data, axis=1) <= eps):
        raise AntipodalTargets("mixed target has (near) zero norm")
    return m


def byol_bsim_v1(q_pred, z1_t, z2_t, lam) -> LossValue:
    """2 - 2 cos(q, normalize(lam z1_bar + (1 - lam) z2_bar)), averaged over rows."""
    q = _rows(q_pred)
    m = mixed_target(z1_t, z2_t, lam)
    per = 2.0 - 2.0 * nd.cosine_sim(q, m)
    return LossValue(nd.mean(per), per.data, (2 * q.shape[0], 0))


def symmetrize_byol(loss_fn: Callable[..., LossValue], prime_args, dprime_args) -> LossValue:
    """L' + L'': ``loss_fn`` applied to the mixed-' and mixed-'' directions."""
    a = loss_fn(*prime_args)
    b = loss_fn(*dprime_args)
    return LossValue(
        a.scalar + b.scalar,
        a.per_anchor + b.per_anchor,
        (a.counts[0] + b.counts[0], a.counts[1] + b.counts[1]),
    )


def wbsim_combine(l_bsim: LossValue | None, l_sim: LossValue | None, w1: float, w2: float) -> LossValue:
    """w1 * L_bsim + w2 * L_sim. A zero-weight term is left out of the graph.

    Per-anchor terms are summed when both losses have the same anchors and
    concatenated otherwise; counts are those of the first nonzero term.
    """
    for w in (w1, w2):
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"WBSIM weights must lie in [0, 1], got {w}")
    terms = [(w, l) for w, l in ((w1, l_bsim), (w2, l_sim)) if w != 0]
    if not terms:
        raise ValueError("at least one WBSIM weight must be nonzero")
    if any(l is None for _, l in terms):
        raise ValueError("a loss with nonzero weight is missing")
    scalar = terms[0][1].scalar * terms[0][0]
    per = terms[0][0] * terms[0][1].per_anchor
    for w, l in terms[1:]:
        scalar = scalar + l.scalar * w
        if per.shape == l.per_anchor.shape:
            per = per + w * l.per_anchor
        else:
            per = np.concatenate([per, w * l.per_anchor])
    return LossValue(scalar, per, terms[0][1].counts)
