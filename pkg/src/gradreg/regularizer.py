"""Two-point gradient-norm regularization and its sharpness-aware special case.

Penalizing the gradient norm on top of a loss can be trained without second
derivatives: evaluate the gradient g1 at theta, nudge the parameters a
distance r along g1's direction, and mix in the gradient at the nudged point,

    g = (1 - lam/r) * g1 + (lam/r) * grad(theta + r * g1/||g1||).

``lam`` is the regularization degree, ``r`` the perturbation radius.  With
lam = r only the perturbed gradient survives, which is exactly the SAM update.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import l2_norm

__all__ = [
    "GrConfig",
    "perturbation",
    "gr_gradient",
    "gr_gradient_parts",
    "sam_gradient",
    "PenalizedObjective",
]


@dataclass(frozen=True)
class GrConfig:
    """Regularization degree lambda0 >= 0 and perturbation radius r0 > 0."""

    lambda0: float
    r0: float

    def __post_init__(self):
        if not np.isfinite(self.lambda0) or self.lambda0 < 0:
            raise ValueError(f"lambda0 must be finite and >= 0, got {self.lambda0}")
        if not np.isfinite(self.r0) or self.r0 <= 0:
            raise ValueError(f"r0 must be finite and > 0, got {self.r0}")
        if self.lambda0 > self.r0:
            warnings.warn(
                f"lambda0/r0 = {self.lambda0 / self.r0:.3g} > 1 extrapolates the "
                "two-point mixing beyond its usual range",
                stacklevel=2,
            )

    @property
    def ratio(self) -> float:
        return self.lambda0 / self.r0


def perturbation(g, r: float) -> np.ndarray:
    """Radius-r step along g's direction: r * g / ||g||.

    Returns the zero vector when g vanishes (the direction is undefined
    there, and training must not crash at critical points).
    """
    if r < 0:
        raise ValueError(f"perturbation radius must be nonnegative, got {r}")
    g = np.asarray(g, dtype=np.float64)
    norm = l2_norm(g)
    if r == 0.0 or norm == 0.0:
        return np.zeros_like(g)
    return (r / norm) * g


def gr_gradient_parts(obj, theta, batch, lam: float, r: float):
    """Loss, base gradient g1, and the mixed regularized gradient.

    Both gradient evaluations use the same batch.  lam = 0 short-circuits:
    the perturbed-point evaluation is skipped entirely and g1 is returned
    as the mixed gradient.  A vanished g1 also falls back to g1.
    """
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    loss, g1 = obj.loss_grad(theta, batch)
    if lam == 0.0:
        return loss, g1, g1
    if r <= 0:
        raise ValueError(f"r must be positive when lam > 0, got r={r}")
    if lam > r:
        # constant message so the warnings filter collapses per-step repeats
        warnings.warn("lam/r > 1 extrapolates the two-point mixing", stacklevel=2)
    eps = perturbation(g1, r)
    if not np.any(eps):
        return loss, g1, g1
    _, g2 = obj.loss_grad(np.asarray(theta, dtype=np.float64) + eps, batch)
    ratio = lam / r
    return loss, g1, (1.0 - ratio) * g1 + ratio * g2


def gr_gradient(obj, theta, batch, lam: float, r: float) -> np.ndarray:
    """The mixed regularized gradient (see :func:`gr_gradient_parts`)."""
    return gr_gradient_parts(obj, theta, batch, lam, r)[2]


def sam_gradient(obj, theta, batch, r: float) -> np.ndarray:
    """Sharpness-aware gradient: the lam = r configuration, i.e. the
    gradient evaluated only at the perturbed point."""
    if r <= 0:
        raise ValueError(f"r must be positive, got {r}")
    return gr_gradient(obj, theta, batch, r, r)


class PenalizedObjective:
    """Loss plus lam * ||analytic gradient||, for finite-difference checks.

    Only ``loss`` is provided; pair it with the central-difference oracle to
    probe the true gradient of the penalized loss.
    """

    def __init__(self, base, lam: float):
        if lam < 0:
            raise ValueError(f"lam must be nonnegative, got {lam}")
        self.base = base
        self.lam = lam

    def loss(self, theta, batch) -> float:
        loss, grad = self.base.loss_grad(theta, batch)
        return loss + self.lam * l2_norm(grad)
