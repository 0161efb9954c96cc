"""Set-valued state estimation: GP posterior to axis-aligned confidence ellipsoid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .dynamics import ContractViolation

__all__ = [
    "Ellipsoid",
    "EstimatorConfig",
    "chi2_quantile",
    "estimate",
    "estimate_batch",
    "contains",
    "sample_uniform",
]


@dataclass(frozen=True)
class EstimatorConfig:
    delta: float = 0.95
    min_semiaxis: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation("delta must lie in (0, 1)")
        if self.min_semiaxis <= 0:
            raise ContractViolation("min_semiaxis must be positive")


@dataclass(frozen=True)
class Ellipsoid:
    """``{x : sum(((x - center) / semiaxes)**2) <= 1}``."""

    center: np.ndarray
    semiaxes: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).copy()
        a = np.asarray(self.semiaxes, dtype=float).copy()
        if c.shape != a.shape or np.any(a <= 0):
            raise ContractViolation("semiaxes must be positive and match the center")
        c.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "semiaxes", a)

    @property
    def shape_matrix(self) -> np.ndarray:
        return np.diag(1.0 / self.semiaxes**2)

    def to_json(self) -> dict:
        return {"center": [float(v) for v in self.center], "semiaxes": [float(v) for v in self.semiaxes]}


def chi2_quantile(dof: int, delta: float, tol: float = 1e-10) -> float:
    """Quantile of the chi-square distribution by bisection on its CDF."""
    if not (isinstance(dof, (int, np.integer)) and 1 <= dof <= 16):
        raise ContractViolation("dof must be an integer in [1, 16]")
    if not 0.0 < delta < 1.0:
        raise ContractViolation("delta must lie in (0, 1)")
    k = 0.5 * dof
    lo, hi = 0.0, 1.0
    while gammainc(k, 0.5 * hi) < delta:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gammainc(k, 0.5 * mid) < delta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def estimate_batch(model, cfg: EstimatorConfig, xhat) -> tuple[np.ndarray, np.ndarray]:
    """Centers and semiaxes of the confidence ellipsoids for a batch of perceived states."""
    xhat = np.asarray(xhat, dtype=float)
    mu, sd = model.predict(xhat)
    scale = np.sqrt(chi2_quantile(xhat.shape[-1], cfg.delta))
    return xhat + mu, np.maximum(sd * scale, cfg.min_semiaxis)


def estimate(model, cfg: EstimatorConfig, xhat) -> Ellipsoid:
    """High-confidence ellipsoid for the actual state given the perceived state."""
    c, a = estimate_batch(model, cfg, np.asarray(xhat, dtype=float).reshape(1, -1))
    return Ellipsoid(c[0], a[0])


def contains(e: Ellipsoid, x) -> bool | np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != e.center.shape[0]:
        raise ContractViolation("dimension mismatch")
    inside = (((x - e.center) / e.semiaxes) ** 2).sum(-1) <= 1.0
    return bool(inside) if inside.ndim == 0 else inside


def sample_uniform(e_or_center, rng: np.random.Generator, size: int | None = None, semiaxes=None) -> np.ndarray:
    """Uniform draws from an ellipsoid (or from a batch of them).

    Called as ``sample_uniform(ellipsoid, rng)`` for one point,
    ``sample_uniform(ellipsoid, rng, size)`` for ``size`` points, or
    ``sample_uniform(centers, rng, size, semiaxes=...)`` with centers of shape
    ``(B, n)`` for ``size`` points inside each of ``B`` ellipsoids, giving
    shape ``(B, size, n)``.
    """
    if isinstance(e_or_center, Ellipsoid):
        center, axes = e_or_center.center, e_or_center.semiaxes
    else:
        center, axes = np.asarray(e_or_center, dtype=float), np.asarray(semiaxes, dtype=float)
    n = center.shape[-1]
    if center.ndim == 1:
        shape = () if size is None else (size,)
    else:
        shape = (center.shape[0], 1 if size is None else size)
    g = rng.standard_normal(shape + (n,))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    r = rng.uniform(size=shape + (1,)) ** (1.0 / n)
    if center.ndim == 1:
        return center + axes * g * r
    return center[:, None, :] + axes[:, None, :] * g * r
