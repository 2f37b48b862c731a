"""Relation groups and the energy ranking / cluster regularizers.

For an anchor ``x`` with category ``i`` and domain ``j`` every other batch
member falls into exactly one relation group:

* ``SS`` same category, same domain
* ``SD`` same category, different domain
* ``DS`` different category, same domain
* ``DD`` different category, different domain

The ranking loss asks for mean energies ordered ``SS < SD < DS < DD`` around
each anchor; the cluster loss asks for same-category energies to be lower
than different-category ones regardless of domain. Group energies are means
over the whole group and anchor losses are averaged over valid anchors.

Every reduction sums values in ascending order of value, which makes the
forward results bit-identical under any permutation of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyConfig, as_batch, distance_matrix, energy_matrix_backward, kernel
from .exceptions import ConfigurationError, DegenerateBatchError, InvalidArgumentError

GROUP_NAMES = ("SS", "SD", "DS", "DD")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.0
    beta: float = 1.0
    rank_blocks: tuple[int, ...] = (0, 1, 2)
    cluster_blocks: tuple[int, ...] = (3, 4, 5)
    clamp: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "rank_blocks", tuple(int(b) for b in self.rank_blocks))
        object.__setattr__(self, "cluster_blocks", tuple(int(b) for b in self.cluster_blocks))
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")
        if not self.rank_blocks or not self.cluster_blocks:
            raise ConfigurationError("rank_blocks and cluster_blocks must both be non-empty")
        if set(self.rank_blocks) & set(self.cluster_blocks):
            raise ConfigurationError(
                f"rank_blocks {self.rank_blocks} and cluster_blocks {self.cluster_blocks} overlap")
        if len(set(self.rank_blocks)) != len(self.rank_blocks) or \
                len(set(self.cluster_blocks)) != len(self.cluster_blocks):
            raise ConfigurationError("block indices must not repeat")
        if any(b < 0 for b in self.rank_blocks + self.cluster_blocks):
            raise ConfigurationError("block indices must be non-negative")
        EnergyConfig(self.beta, self.clamp)

    @property
    def energy(self) -> EnergyConfig:
        return EnergyConfig(beta=self.beta, clamp=self.clamp)


@dataclass(frozen=True)
class RelationGroups:
    """Boolean ``(B, B)`` membership masks; row = anchor, column = partner."""

    ss: np.ndarray
    sd: np.ndarray
    ds: np.ndarray
    dd: np.ndarray
    categories: np.ndarray = field(repr=False)
    domains: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.ss.shape[0]

    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.ss, self.sd, self.ds, self.dd

    def members(self, anchor: int) -> dict[str, np.ndarray]:
        """Index arrays of the four groups around ``anchor``."""
        return {name: np.flatnonzero(mask[anchor]) for name, mask in zip(GROUP_NAMES, self.masks())}

    def rank_valid(self) -> np.ndarray:
        return np.all([m.any(axis=1) for m in self.masks()], axis=0)

    def cluster_valid(self) -> np.ndarray:
        same = (self.ss | self.sd).any(axis=1)
        diff = (self.ds | self.dd).any(axis=1)
        return same & diff


def _labels(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise InvalidArgumentError(f"{name} must contain integers")
    arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise InvalidArgumentError(f"{name} must be non-negative")
    return arr


def relation_groups(categories, domains) -> RelationGroups:
    """Partition every non-anchor index into SS / SD / DS / DD for each anchor."""
    y = _labels(categories, "categories")
    d = _labels(domains, "domains")
    if y.shape != d.shape:
        raise InvalidArgumentError(f"label length mismatch: {y.size} vs {d.size}")
    if y.size < 2:
        raise InvalidArgumentError(f"need at least 2 samples, got {y.size}")
    same_cat = y[:, None] == y[None, :]
    same_dom = d[:, None] == d[None, :]
    not_self = ~np.eye(y.size, dtype=bool)
    return RelationGroups(
        ss=same_cat & same_dom & not_self,
        sd=same_cat & ~same_dom,
        ds=~same_cat & same_dom,
        dd=~same_cat & ~same_dom,
        categories=y,
        domains=d,
    )


def sorted_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum after sorting by value; order-independent to the last bit."""
    return np.sort(values, axis=axis).sum(axis=axis)


def group_means(energy: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor mean energy over a group mask; NaN where the group is empty."""
    counts = mask.sum(axis=1)
    totals = sorted_sum(np.where(mask, energy, 0.0), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = totals / counts
    return means, counts


def _check_aligned(features, groups: RelationGroups) -> np.ndarray:
    f = as_batch(features, "features")
    if f.shape[0] != groups.size:
        raise InvalidArgumentError(f"features have {f.shape[0]} rows but groups cover {groups.size}")
    return f


def _energy(f: np.ndarray, cfg: LossConfig):
    dist = distance_matrix(f)
    energy, _ = kernel(dist, cfg.energy)
    return dist, energy


def _rank_terms(energy: np.ndarray, groups: RelationGroups, margin: float):
    valid = groups.rank_valid()
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("no anchor has all four relation groups (SS, SD, DS, DD)")
    stats = [group_means(energy, m) for m in groups.masks()]
    means = np.stack([s[0] for s in stats])
    counts = np.stack([s[1] for s in stats])
    args = means[:-1] - means[1:] + margin  # (3, B): SS-SD, SD-DS, DS-DD
    hinge = np.maximum(args, 0.0)
    per_anchor = hinge[0] + hinge[1] + hinge[2]
    loss = sorted_sum(per_anchor[valid]) / n_valid

    active = np.where(valid, (args > 0).astype(np.float64), 0.0)
    coef = np.zeros((4, energy.shape[0]))
    coef[:-1] += active
    coef[1:] -= active
    grad_energy = np.zeros_like(energy)
    for g, mask in enumerate(groups.masks()):
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(valid, coef[g] / counts[g], 0.0)
        grad_energy += np.where(mask, scale[:, None], 0.0)
    grad_energy /= n_valid
    kinks = np.abs(args[:, valid]).ravel()
    return loss, grad_energy, kinks


def _cluster_terms(energy: np.ndarray, groups: RelationGroups, clamp: float):
    valid = groups.cluster_valid()
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("no anchor has both same-category and different-category partners")
    same_mask = groups.ss | groups.sd
    diff_mask = groups.ds | groups.dd
    same, n_same = group_means(energy, same_mask)
    diff, n_diff = group_means(energy, diff_mask)
    gap = same - diff
    # two-sided so the exponential neither overflows nor underflows to 0
    clipped = np.abs(gap) > clamp
    per_anchor = np.exp(np.clip(gap, -clamp, clamp))
    loss = sorted_sum(per_anchor[valid]) / n_valid

    weight = np.where(valid & ~clipped, per_anchor, 0.0) / n_valid
    with np.errstate(invalid="ignore", divide="ignore"):
        w_same = np.where(valid, weight / n_same, 0.0)
        w_diff = np.where(valid, weight / n_diff, 0.0)
    grad_energy = np.where(same_mask, w_same[:, None], 0.0) - np.where(diff_mask, w_diff[:, None], 0.0)
    kinks = clamp - np.abs(gap[valid])
    return loss, grad_energy, np.abs(kinks)


def rank_loss(features, groups: RelationGroups, cfg: LossConfig = LossConfig()) -> float:
    """Mean over valid anchors of the three chained hinge losses."""
    f = _check_aligned(features, groups)
    _, energy = _energy(f, cfg)
    return float(_rank_terms(energy, groups, cfg.margin)[0])


def cluster_loss(features, groups: RelationGroups, cfg: LossConfig = LossConfig()) -> float:
    """Mean over valid anchors of ``exp(mean same-category energy - mean other-category energy)``."""
    f = _check_aligned(features, groups)
    _, energy = _energy(f, cfg)
    return float(_cluster_terms(energy, groups, cfg.clamp)[0])


def rank_loss_and_grad(features, groups: RelationGroups, cfg: LossConfig = LossConfig()):
    """Return ``(loss, dloss/dfeatures, kink_margin)``.

    ``kink_margin`` is the smallest distance of any hinge argument from zero,
    useful for deciding whether finite differences are trustworthy.
    """
    f = _check_aligned(features, groups)
    dist, energy = _energy(f, cfg)
    loss, g_e, kinks = _rank_terms(energy, groups, cfg.margin)
    grad = energy_matrix_backward(f, dist, g_e, cfg.energy)
    margin = min(float(kinks.min()), _kernel_kink(dist, cfg))
    return float(loss), grad, margin


def cluster_loss_and_grad(features, groups: RelationGroups, cfg: LossConfig = LossConfig()):
    """Return ``(loss, dloss/dfeatures, kink_margin)``."""
    f = _check_aligned(features, groups)
    dist, energy = _energy(f, cfg)
    loss, g_e, kinks = _cluster_terms(energy, groups, cfg.clamp)
    grad = energy_matrix_backward(f, dist, g_e, cfg.energy)
    margin = min(float(kinks.min()), _kernel_kink(dist, cfg))
    return float(loss), grad, margin


def _kernel_kink(dist: np.ndarray, cfg: LossConfig) -> float:
    off = dist[~np.eye(dist.shape[0], dtype=bool)]
    if off.size == 0:
        return np.inf
    # the distance is non-smooth at 0 and the kernel at beta * d = clamp
    return float(min(off.min(), np.abs(cfg.beta * off - cfg.clamp).min()))


def _check_blocks(n_blocks: int, cfg: LossConfig):
    for b in cfg.rank_blocks + cfg.cluster_blocks:
        if b >= n_blocks:
            raise InvalidArgumentError(f"block index {b} out of range for {n_blocks} blocks")


def poer_loss(block_features, categories, domains, cfg: LossConfig = LossConfig(),
              use_rank: bool = True, use_cluster: bool = True):
    """Sum of ranking losses on the rank blocks and cluster losses on the cluster blocks.

    Returns ``(total, breakdown)`` with ``breakdown = {"rank": {b: value}, "cluster": {b: value}}``.
    ``use_rank`` / ``use_cluster`` switch a whole family of terms off, which
    is how the single-regularizer ablations are run.
    """
    total, breakdown, _, _ = _poer(block_features, categories, domains, cfg, use_rank, use_cluster, False)
    return total, breakdown


def poer_loss_and_grads(block_features, categories, domains, cfg: LossConfig = LossConfig(),
                        use_rank: bool = True, use_cluster: bool = True):
    """Like :func:`poer_loss` and also returns per-block feature gradients and the kink margin.

    Blocks that carry no term get a ``None`` gradient.
    """
    return _poer(block_features, categories, domains, cfg, use_rank, use_cluster, True)


def _poer(block_features, categories, domains, cfg, use_rank, use_cluster, with_grad):
    blocks = list(block_features)
    _check_blocks(len(blocks), cfg)
    groups = relation_groups(categories, domains)
    grads: list[np.ndarray | None] = [None] * len(blocks)
    breakdown: dict[str, dict[int, float]] = {"rank": {}, "cluster": {}}
    margin = np.inf
    plan = []
    if use_rank:
        plan += [("rank", b) for b in cfg.rank_blocks]
    if use_cluster:
        plan += [("cluster", b) for b in cfg.cluster_blocks]
    for kind, b in plan:
        if with_grad:
            fn = rank_loss_and_grad if kind == "rank" else cluster_loss_and_grad
            value, g, m = fn(blocks[b], groups, cfg)
            grads[b] = g if grads[b] is None else grads[b] + g
            margin = min(margin, m)
        else:
            fn = rank_loss if kind == "rank" else cluster_loss
            value = fn(blocks[b], groups, cfg)
        breakdown[kind][b] = value
    total = sum(breakdown["rank"][b] for b in sorted(breakdown["rank"])) + \
        sum(breakdown["cluster"][b] for b in sorted(breakdown["cluster"]))
    return float(total), breakdown, grads, margin
