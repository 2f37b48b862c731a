"""L2 potential difference and the exponential energy kernel.

The pair potential between two features is ``exp(beta * d) - 1`` where ``d``
is their Euclidean distance. The exponent ``beta * d`` is clamped to
``cfg.clamp`` (30 by default) so that desk-scale training never overflows;
the derivative through a clamped exponent is zero. The gradient of the
distance itself is defined as zero when ``d < ZERO_DISTANCE``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import InvalidArgumentError

ZERO_DISTANCE = 1e-12


@dataclass(frozen=True)
class EnergyConfig:
    beta: float = 1.0
    clamp: float = 30.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise InvalidArgumentError(f"beta must be finite and >= 0, got {self.beta}")
        if not self.clamp > 0:
            raise InvalidArgumentError(f"clamp must be > 0, got {self.clamp}")


def as_vector(a, name: str = "feature") -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise InvalidArgumentError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return v


def as_batch(batch, name: str = "batch") -> np.ndarray:
    try:
        f = np.asarray(batch, dtype=np.float64)
    except ValueError as exc:  # ragged nested sequences
        raise InvalidArgumentError(f"{name} is ragged: {exc}") from None
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise InvalidArgumentError(f"{name} must have shape (B>=1, m>=1), got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return f


def _pair(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.size} vs {b.size}")
    return a, b


def potential_difference(a, b) -> float:
    """Euclidean distance between two feature vectors."""
    a, b = _pair(a, b)
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def kernel(d, cfg: EnergyConfig = EnergyConfig()):
    """Map distances to pair potentials; returns ``(energy, dEnergy/dd)``.

    Works elementwise on scalars or arrays.
    """
    z = cfg.beta * np.asarray(d, dtype=np.float64)
    clamped = z > cfg.clamp
    ez = np.exp(np.minimum(z, cfg.clamp))
    energy = np.expm1(np.minimum(z, cfg.clamp))
    slope = np.where(clamped, 0.0, cfg.beta * ez)
    return energy, slope


def pair_potential(a, b, cfg: EnergyConfig = EnergyConfig()) -> float:
    """Pair potential ``exp(beta * d(a, b)) - 1`` with the exponent clamped."""
    energy, _ = kernel(potential_difference(a, b), cfg)
    return float(energy)


def potential_difference_grad(a, b) -> np.ndarray:
    """Gradient of ``d(a, b)`` with respect to ``a``."""
    a, b = _pair(a, b)
    diff = a - b
    d = np.sqrt(np.dot(diff, diff))
    if d < ZERO_DISTANCE:
        return np.zeros_like(a)
    return diff / d


def pair_potential_grad(a, b, cfg: EnergyConfig = EnergyConfig()) -> np.ndarray:
    """Gradient of the pair potential with respect to ``a``."""
    _, slope = kernel(potential_difference(a, b), cfg)
    return float(slope) * potential_difference_grad(a, b)


def distance_matrix(features: np.ndarray) -> np.ndarray:
    """Unchecked pairwise distances of a validated ``(B, m)`` array.

    Each entry is summed from explicit coordinate differences (not the Gram
    expansion), so coincident rows give exactly zero and the value of an
    entry does not depend on where the pair sits in the batch.
    """
    return cdist(features, features, "euclidean")


def pairwise_distances(features) -> np.ndarray:
    """Symmetric ``(B, B)`` distance matrix with an exactly zero diagonal."""
    return distance_matrix(as_batch(features))


def pairwise_energy_matrix(features, cfg: EnergyConfig = EnergyConfig()) -> np.ndarray:
    """Pair potentials between every pair of rows of ``features``."""
    energy, _ = kernel(pairwise_distances(features), cfg)
    return energy


def energy_matrix_backward(features: np.ndarray, dist: np.ndarray, grad_energy: np.ndarray,
                           cfg: EnergyConfig = EnergyConfig()) -> np.ndarray:
    """Backpropagate ``dL/dE`` for a pairwise energy matrix to the features.

    ``grad_energy[i, j]`` is the derivative of the loss with respect to
    ``E(f_i, f_j)``. Both ``E_ij`` and ``E_ji`` depend on the same distance,
    so their gradients are pooled before the chain rule through ``d_ij``.
    """
    _, slope = kernel(dist, cfg)
    pooled = (grad_energy + grad_energy.T) * slope
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(dist < ZERO_DISTANCE, 0.0, pooled / dist)
    return s.sum(axis=1)[:, None] * features - s @ features
