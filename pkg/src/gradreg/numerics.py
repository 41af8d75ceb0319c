"""Deterministic scalar/vector primitives shared by the rest of the package.

Randomness comes from numpy's Philox 4x64 bit generator, a counter-based
generator keyed by (seed, stream): the same key yields a bitwise-identical
draw sequence on every platform.  Normal variates use numpy's ziggurat
sampler and are parameterized by *variance*, not standard deviation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NonFiniteError",
    "RngState",
    "as_vector",
    "l2_norm",
    "gaussian_sample",
    "finite_diff_grad",
]


class NonFiniteError(ArithmeticError):
    """A numeric evaluation produced NaN or infinity."""


def as_vector(values) -> np.ndarray:
    """Convert to a 1-D float64 vector, rejecting NaN/Inf entries."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return v


def l2_norm(v) -> float:
    """Euclidean norm sqrt(sum_i v_i^2) of a nonempty vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("l2_norm of an empty vector is undefined")
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))


class RngState:
    """Seeded random stream with reproducible output.

    Two states built from the same (seed, stream) key produce identical
    sequences.  ``child(k)`` derives an independent stream from the same
    seed; callers that fan work out across streams must reduce results in
    a fixed stream order to stay deterministic.
    """

    def __init__(self, seed: int, stream: int = 0):
        seed = int(seed)
        stream = int(stream)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not 0 <= stream < 2**64:
            raise ValueError("stream index must be an unsigned 64-bit integer")
        self.seed = seed
        self.stream = stream
        self._gen = np.random.Generator(np.random.Philox(key=[seed, stream]))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream})"

    def child(self, stream: int) -> "RngState":
        """Independent stream derived from the same seed."""
        return RngState(self.seed, stream)

    def gaussian(self, mean: float, variance: float) -> float:
        """One draw from N(mean, variance); variance = 0 returns the mean."""
        if variance < 0:
            raise ValueError(f"variance must be nonnegative, got {variance}")
        if variance == 0:
            return float(mean)
        return float(mean + np.sqrt(variance) * self._gen.standard_normal())

    def gaussians(self, shape, mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
        """Array of independent N(mean, variance) draws."""
        if variance < 0:
            raise ValueError(f"variance must be nonnegative, got {variance}")
        if variance == 0:
            return np.full(shape, float(mean))
        return mean + np.sqrt(variance) * self._gen.standard_normal(shape)

    def standard_normals(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n) (Fisher-Yates)."""
        return self._gen.permutation(n)


def gaussian_sample(rng: RngState, mean: float, variance: float) -> float:
    """Draw one normal variate with the given mean and variance, advancing rng."""
    return rng.gaussian(mean, variance)


def finite_diff_grad(obj, theta, batch, h: float) -> np.ndarray:
    """Central-difference gradient oracle.

    Component i is (L(theta + h e_i) - L(theta - h e_i)) / (2h), where L is
    ``obj.loss``.  Used to cross-check analytic gradients; truncation error
    is O(h^2) for smooth objectives.
    """
    if h <= 0:
        raise ValueError(f"step size h must be positive, got {h}")
    theta = as_vector(theta)
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + h
        loss_plus = obj.loss(probe, batch)
        probe[i] = theta[i] - h
        loss_minus = obj.loss(probe, batch)
        probe[i] = theta[i]
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise NonFiniteError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (loss_plus - loss_minus) / (2.0 * h)
    return grad
