"""View augmentation, Beta(alpha, alpha) mixing ratios, and CutMix / Mixup.

Images are float64 arrays of shape (H, W, C) with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

LAMBDA_CLAMP = 1e-9
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def check_image(x: np.ndarray) -> None:
    if x.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {x.shape}")
    h, w, c = x.shape
    if h < 8 or w < 8 or c not in (1, 3):
        raise ValueError(f"unsupported image shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


@dataclass(frozen=True)
class BetaParams:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


def _log_gamma_draws(alpha: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """log of Gamma(alpha, 1) samples by Marsaglia-Tsang.

    For alpha < 1 the alpha + 1 sampler is boosted by U**(1/alpha), kept in
    log space so tiny alphas do not underflow to zero.
    """
    a = alpha + 1.0 if alpha < 1.0 else alpha
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        m = max(16, int(need * 1.2))
        x = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            logv = np.log(np.where(ok, v, 1.0))
            accept = ok & (
                (u < 1.0 - 0.0331 * x**4)
                | (np.log(u) < 0.5 * x**2 + d * (1.0 - v + logv))
            )
        vals = math.log(d) + logv[accept]
        take = vals[:need]
        out[filled : filled + len(take)] = take
        filled += len(take)
    if alpha < 1.0:
        u = rng.random(size)
        # u == 0 has probability ~2**-53; nudge it off zero.
        out = out + np.log(np.maximum(u, np.finfo(float).tiny)) / alpha
    return out


def sample_lambdas(params: BetaParams, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent Beta(alpha, alpha) draws clamped to (1e-9, 1 - 1e-9)."""
    lg1 = _log_gamma_draws(params.alpha, rng, size)
    lg2 = _log_gamma_draws(params.alpha, rng, size)
    # g1 / (g1 + g2) = 1 / (1 + exp(log g2 - log g1))
    diff = np.clip(lg2 - lg1, -700.0, 700.0)
    lam = 1.0 / (1.0 + np.exp(diff))
    return np.clip(lam, LAMBDA_CLAMP, 1.0 - LAMBDA_CLAMP)


def sample_lambda(params: BetaParams, rng: np.random.Generator) -> float:
    return float(sample_lambdas(params, rng, 1)[0])


@dataclass
class MixResult:
    image: np.ndarray
    lambda_requested: float
    lambda_effective: float
    region: Optional[tuple[int, int, int, int]]  # (top, left, height, width)
    strategy: Literal["cutmix", "mixup"]


def _check_pair(x1: np.ndarray, x2: np.ndarray, lam: float) -> None:
    if x1.shape != x2.shape:
        raise ValueError(f"cannot mix images of shapes {x1.shape} and {x2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Rectangle (top, left, height, width) covering about (1 - lam) of the image.

    Side lengths are round(H*sqrt(1-lam)) and round(W*sqrt(1-lam)); the box
    is placed uniformly among the positions where it fits, so it never needs
    clipping. Always consumes two integer draws.
    """
    cut = math.sqrt(1.0 - lam)
    ch = min(h, int(math.floor(h * cut + 0.5)))
    cw = min(w, int(math.floor(w * cut + 0.5)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def cutmix(x1: np.ndarray, x2: np.ndarray, lam: float, rng: np.random.Generator) -> MixResult:
    """Paste a rectangle of ``x2`` into a copy of ``x1``.

    ``lambda_effective`` is the fraction of pixels still coming from ``x1``.
    """
    _check_pair(x1, x2, lam)
    h, w = x1.shape[:2]
    top, left, ch, cw = cutmix_box(h, w, lam, rng)
    out = x1.copy()
    region = None
    if ch > 0 and cw > 0:
        out[top : top + ch, left : left + cw] = x2[top : top + ch, left : left + cw]
        region = (top, left, ch, cw)
    lam_eff = 1.0 - (ch * cw) / (h * w)
    return MixResult(out, float(lam), lam_eff, region, "cutmix")


def mixup(x1: np.ndarray, x2: np.ndarray, lam: float) -> MixResult:
    _check_pair(x1, x2, lam)
    out = np.clip(lam * x1 + (1.0 - lam) * x2, 0.0, 1.0)
    return MixResult(out, float(lam), float(lam), None, "mixup")


def mix(strategy: str, x1, x2, lam: float, rng: np.random.Generator) -> MixResult:
    if strategy == "cutmix":
        return cutmix(x1, x2, lam, rng)
    if strategy == "mixup":
        return mixup(x1, x2, lam)
    raise ValueError(f"unknown mix strategy {strategy!r}")


@dataclass(frozen=True)
class AugPolicy:
    """Random-resized-crop, flip, multiplicative color jitter, grayscale."""

    scale: tuple[float, float] = (0.5, 1.0)
    flip_p: float = 0.5
    jitter: float = 0.4
    gray_p: float = 0.2
    ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        s0, s1 = self.scale
        if not (0.0 < s0 <= s1 <= 1.0):
            raise ValueError(f"invalid crop scale range {self.scale}")
        for p in (self.flip_p, self.gray_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range: {p}")
        if self.jitter < 0:
            raise ValueError("color-jitter strength must be >= 0")
        r0, r1 = self.ratio
        if not 0 < r0 <= r1:
            raise ValueError(f"invalid aspect ratio range {self.ratio}")

    @classmethod
    def identity(cls) -> AugPolicy:
        return cls(scale=(1.0, 1.0), flip_p=0.0, jitter=0.0, gray_p=0.0)


def hflip(x: np.ndarray) -> np.ndarray:
    return x[:, ::-1].copy()


def resized_crop(x: np.ndarray, top: float, left: float, ch: float, cw: float) -> np.ndarray:
    """Bilinearly resample the box (top, left, ch, cw) back to the full H x W grid."""
    h, w = x.shape[:2]
    ys = top + (np.arange(h) + 0.5) * (ch / h) - 0.5
    xs = left + (np.arange(w) + 0.5) * (cw / w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = x[y0][:, x0] * (1.0 - wx) + x[y0][:, x1] * wx
    bot_row = x[y1][:, x0] * (1.0 - wx) + x[y1][:, x1] * wx
    return top_row * (1.0 - wy) + bot_row * wy


def augment_view(x: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """One random view of ``x`` with the same shape, values clamped to [0, 1].

    The number of draws taken from ``rng`` does not depend on the policy, so
    two policies fed the same stream stay aligned.
    """
    h, w, c = x.shape
    u = rng.random(7)
    jit = rng.random(3)

    s0, s1 = policy.scale
    area = s0 + (s1 - s0) * u[0]
    if area >= 1.0:
        top, left, ch, cw = 0.0, 0.0, float(h), float(w)
    else:
        lr0, lr1 = math.log(policy.ratio[0]), math.log(policy.ratio[1])
        r = math.exp(lr0 + (lr1 - lr0) * u[1])
        ch = min(float(h), h * math.sqrt(area * r))
        cw = min(float(w), w * math.sqrt(area / r))
        top = (h - ch) * u[2]
        left = (w - cw) * u[3]
    out = x if (ch == h and cw == w) else resized_crop(x, top, left, ch, cw)

    if u[4] < policy.flip_p:
        out = hflip(out)
    if policy.jitter > 0:
        factors = 1.0 - policy.jitter + 2.0 * policy.jitter * jit[:c]
        out = out * factors
    if u[5] < policy.gray_p and c == 3:
        gray = out @ GRAY_WEIGHTS
        out = np.repeat(gray[:, :, None], 3, axis=2)
    out = np.clip(out, 0.0, 1.0)
    return out.copy() if out is x else out
