"""Sphere-constrained minimizers of the two BYOL mixed-target objectives.

For unit targets z1, z2 and a ratio lam, with m = lam*z1 + (1-lam)*z2:

* ``v0``: lam*||z - z1||^2 + (1-lam)*||z - z2||^2, which on the unit sphere
  equals 2 - 2 m.z;
* ``v1``: ||z - m/|m| ||^2, which on the unit sphere equals 2 - 2 m.z/|m|.

Both are minimized over the sphere at z* = m/|m|. The gradients of the
sphere forms differ only by the factor s = 1/|m| >= 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import ndgrad as nd
from .ndgrad import AntipodalTargets, EPS_NORM

Variant = Literal["v0", "v1"]
UNIT_TOL = 1e-10


@dataclass
class SphereProblem:
    z1: np.ndarray
    z2: np.ndarray
    lam: float

    def __post_init__(self):
        self.z1 = np.asarray(self.z1, dtype=np.float64)
        self.z2 = np.asarray(self.z2, dtype=np.float64)
        if self.z1.shape != self.z2.shape or self.z1.ndim != 1:
            raise ValueError("z1 and z2 must be vectors of one dimension")
        for z in (self.z1, self.z2):
            if abs(np.linalg.norm(z) - 1.0) > UNIT_TOL:
                raise ValueError("z1 and z2 must be unit vectors")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, lam: float | None = None) -> SphereProblem:
        z = rng.standard_normal((2, dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        lam = float(rng.random()) if lam is None else lam
        return cls(z[0], z[1], lam)

    @property
    def dim(self) -> int:
        return self.z1.shape[0]

    @property
    def mixture(self) -> np.ndarray:
        return self.lam * self.z1 + (1.0 - self.lam) * self.z2


def _mixture_norm(p: SphereProblem) -> float:
    norm = float(np.linalg.norm(p.mixture))
    if norm <= EPS_NORM:
        raise AntipodalTargets("lambda-mixture of the targets is (near) zero")
    return norm


def analytic_minimizer(p: SphereProblem) -> np.ndarray:
    return p.mixture / _mixture_norm(p)


def gradient_scale(p: SphereProblem) -> float:
    return 1.0 / _mixture_norm(p)


def objective(p: SphereProblem, variant: Variant, z) -> nd.Tensor:
    """Sphere form of the objective (constant terms dropped), as a tape expression."""
    z = nd.as_tensor(z)
    if variant == "v0":
        target = p.mixture
    elif variant == "v1":
        target = analytic_minimizer(p)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return -2.0 * nd.tsum(z * target)


def objective_full(p: SphereProblem, variant: Variant, z: np.ndarray) -> np.ndarray:
    """Unreduced objective at one point or a stack of points (last axis = dim)."""
    z = np.asarray(z, dtype=np.float64)
    if variant == "v0":
        d1 = ((z - p.z1) ** 2).sum(axis=-1)
        d2 = ((z - p.z2) ** 2).sum(axis=-1)
        return p.lam * d1 + (1.0 - p.lam) * d2
    if variant == "v1":
        return ((z - analytic_minimizer(p)) ** 2).sum(axis=-1)
    raise ValueError(f"unknown variant {variant!r}")


def gradient(p: SphereProblem, variant: Variant) -> np.ndarray:
    """Euclidean gradient of the sphere form; constant in z."""
    if variant == "v0":
        return -2.0 * p.mixture
    if variant == "v1":
        return -2.0 * analytic_minimizer(p)
    raise ValueError(f"unknown variant {variant!r}")


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))


@dataclass
class Trajectory:
    iterates: list[np.ndarray] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    cosdist: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "grad_norm", "cosdist_to_zstar"])
            for i, row in enumerate(zip(self.objective, self.grad_norms, self.cosdist)):
                w.writerow([i, *(repr(float(v)) for v in row)])


def projected_gd(
    p: SphereProblem,
    variant: Variant,
    eta: float = 0.1,
    max_iters: int = 100_000,
    tol: float = 1e-6,
    z0: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Gradient step on the sphere form, then renormalize onto the sphere.

    Stops once the cosine distance to z* drops below ``tol``. Non-convergence
    is reported through ``Trajectory.converged``. ``grad_norms`` records the
    norm of the gradient's tangent component at each iterate.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError("step size must lie in (0, 1]")
    z_star = analytic_minimizer(p)
    g = gradient(p, variant)
    if z0 is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        z0 = rng.standard_normal(p.dim)
    z = np.asarray(z0, dtype=np.float64) / np.linalg.norm(z0)
    traj = Trajectory()
    for it in range(max_iters + 1):
        dist = cosine_distance(z, z_star)
        tangent = g - (g @ z) * z
        traj.iterates.append(z)
        traj.objective.append(float(g @ z))
        traj.grad_norms.append(float(np.linalg.norm(tangent)))
        traj.cosdist.append(dist)
        if dist < tol:
            traj.converged = True
            break
        if it == max_iters:
            break
        step = z - eta * g
        z = step / np.linalg.norm(step)
    return traj


def sphere_grid(step_deg: float = 1.0) -> np.ndarray:
    """Points of S^2 on a (polar, azimuth) grid with the given resolution."""
    theta = np.deg2rad(np.arange(0.0, 180.0 + 1e-9, step_deg))
    phi = np.deg2rad(np.arange(0.0, 360.0, step_deg))
    t, f = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(t) * np.cos(f), np.sin(t) * np.sin(f), np.cos(t)], axis=-1)
    return pts.reshape(-1, 3)


def grid_minimizer(p: SphereProblem, variant: Variant = "v0", step_deg: float = 1.0):
    """Brute-force argmin of the full objective over a D=3 spherical grid."""
    if p.dim != 3:
        raise ValueError("the spherical grid oracle is 3-dimensional")
    pts = sphere_grid(step_deg)
    vals = objective_full(p, variant, pts)
    k = int(np.argmin(vals))
    return pts[k], float(vals[k]), vals


def grid_angle_tolerance(step_deg: float = 1.0) -> float:
    """Worst angular distance (radians) from any point of S^2 to the grid."""
    return math.radians(step_deg) / math.sqrt(2.0) * 1.01
