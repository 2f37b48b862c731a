"""Learnable prototype bank and distance-based classification.

A bank has shape ``(k, n, m)``: ``k`` classes, ``n`` prototypes per class,
``m`` feature dimensions. A feature's distance to class ``i`` is its distance
to the nearest prototype of that class, and class probabilities are the
softmax of the negated class distances.
"""

from __future__ import annotations

import numpy as np

from .energy import ZERO_DISTANCE, as_batch, as_vector
from .exceptions import InvalidArgumentError

PROBABILITY_FLOOR = 1e-300
DEFAULT_PROTOTYPES_PER_CLASS = 3


def check_bank(bank) -> np.ndarray:
    m = np.asarray(bank, dtype=np.float64)
    if m.ndim != 3 or min(m.shape) < 1:
        raise InvalidArgumentError(f"prototype bank must have shape (k, n, m) with all >= 1, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError("prototype bank contains non-finite entries")
    return m


def init_prototypes(n_classes: int, per_class: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian prototypes with standard deviation ``1/sqrt(dim)``."""
    if n_classes < 2 or per_class < 1 or dim < 1:
        raise InvalidArgumentError(
            f"need k >= 2, n >= 1, m >= 1; got k={n_classes}, n={per_class}, m={dim}")
    return rng.standard_normal((n_classes, per_class, dim)) / np.sqrt(dim)


def prototype_distances(f, bank) -> np.ndarray:
    """``(k, n)`` matrix of distances between ``f`` and every prototype."""
    f = as_vector(f)
    m = check_bank(bank)
    if f.size != m.shape[2]:
        raise InvalidArgumentError(f"feature has {f.size} dims, prototypes have {m.shape[2]}")
    diff = f - m
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def min_class_distance(distmat) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise minimum and its argmin (lowest index on ties)."""
    dm = np.asarray(distmat, dtype=np.float64)
    if dm.ndim != 2 or dm.size == 0:
        raise InvalidArgumentError(f"distance matrix must be non-empty 2-D, got shape {dm.shape}")
    idx = np.argmin(dm, axis=1)
    return dm[np.arange(dm.shape[0]), idx], idx


def class_probabilities(d) -> np.ndarray:
    """Softmax over negated class distances, shifted by the minimum for stability."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise InvalidArgumentError(f"class distances must be a non-empty vector, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise InvalidArgumentError("class distances contain non-finite entries")
    w = np.exp(-(d - d.min()))
    return w / w.sum()


def classification_loss(p, y: int) -> float:
    """Negative log-probability of the true class."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= int(y) < p.size:
        raise InvalidArgumentError(f"label {y} out of range for {p.size} classes")
    return float(-np.log(max(p[int(y)], PROBABILITY_FLOOR)))


def total_loss(cls: float, poer: float, alpha: float) -> float:
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    return cls + alpha * poer


def predict(f, bank) -> int:
    d, _ = min_class_distance(prototype_distances(f, bank))
    return int(np.argmin(d))


def batch_distances(features, bank) -> np.ndarray:
    """``(B, k, n)`` distances from every feature row to every prototype."""
    f = as_batch(features, "features")
    m = check_bank(bank)
    if f.shape[1] != m.shape[2]:
        raise InvalidArgumentError(f"features have {f.shape[1]} dims, prototypes have {m.shape[2]}")
    diff = f[:, None, None, :] - m[None]
    return np.sqrt(np.einsum("bijk,bijk->bij", diff, diff))


def predict_batch(features, bank) -> np.ndarray:
    dist = batch_distances(features, bank)
    return np.argmin(dist.min(axis=2), axis=1)


def classification_loss_and_grads(features, labels, bank):
    """Batch-mean cross-entropy and its gradients.

    Returns ``(loss, dloss/dfeatures, dloss/dbank, kink_margin)``. The min over
    each class's prototypes routes the gradient to the selected prototype
    only. ``kink_margin`` is the smallest gap between the nearest and second
    nearest prototype of any class (infinite when ``n == 1``) or the smallest
    feature-prototype distance, whichever is smaller.
    """
    f = as_batch(features, "features")
    m = check_bank(bank)
    y = np.asarray(labels, dtype=np.int64)
    k, n, dim = m.shape
    if y.shape != (f.shape[0],):
        raise InvalidArgumentError(f"expected {f.shape[0]} labels, got shape {y.shape}")
    if np.any((y < 0) | (y >= k)):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    batch = f.shape[0]
    diff = f[:, None, None, :] - m[None]  # (B, k, n, m)
    dist = np.sqrt(np.einsum("bijk,bijk->bij", diff, diff))
    idx = np.argmin(dist, axis=2)
    rows = np.arange(batch)[:, None]
    cols = np.arange(k)[None, :]
    d = dist[rows, cols, idx]  # (B, k)

    shifted = d - d.min(axis=1, keepdims=True)
    log_norm = np.log(np.exp(-shifted).sum(axis=1))
    nll = shifted[np.arange(batch), y] + log_norm
    nll = np.minimum(nll, -np.log(PROBABILITY_FLOOR))
    loss = float(nll.mean())

    p = np.exp(-shifted - log_norm[:, None])
    onehot = np.zeros_like(p)
    onehot[np.arange(batch), y] = 1.0
    g_d = (onehot - p) / batch  # dL/dd
    sel_diff = diff[rows, cols, idx]  # (B, k, m)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d[..., None] < ZERO_DISTANCE, 0.0, sel_diff / d[..., None])
    contrib = g_d[..., None] * unit
    g_f = contrib.sum(axis=1)
    g_m = np.zeros_like(m)
    np.add.at(g_m, (np.broadcast_to(cols, idx.shape), idx), -contrib)

    margin = float(d.min())
    if n > 1:
        part = np.partition(dist, 1, axis=2)
        margin = min(margin, float((part[..., 1] - part[..., 0]).min()))
    return loss, g_f, g_m, margin
