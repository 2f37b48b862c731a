"""Walk through the energy kernel and the two PoER losses on hand-built features.

Four samples sit on the corners of a unit square: rows are categories,
columns are domains. Moving the domain axis together, so that the domains
collapse, lowers both losses. That is the behaviour the regularizer rewards.

Run: python3 demos/01_energy_and_losses.py
"""

import numpy as np

from poer import LossConfig, cluster_loss, pair_potential, rank_loss, relation_groups
from poer.energy import pairwise_energy_matrix


def show(title, features, groups, cfg):
    print(f"\n{title}")
    print("energy matrix:\n", np.round(pairwise_energy_matrix(features, cfg.energy), 3))
    print(f"rank loss    {rank_loss(features, groups, cfg):.4f}")
    print(f"cluster loss {cluster_loss(features, groups, cfg):.4f}")


def main():
    # the kernel is exp(beta * d) - 1, so it is zero only at coincidence
    a, b = np.zeros(2), np.array([3.0, 4.0])
    print(f"E(a, b) = exp(5) - 1 = {pair_potential(a, b):.4f}")
    print(f"E(a, a) = {pair_potential(a, a)}")

    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    d = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    groups = relation_groups(y, d)
    cfg = LossConfig(margin=0.1)
    print("\nrelation groups of anchor 0 (SS, SD, DS, DD):")
    for name in ("ss", "sd", "ds", "dd"):
        print(f"  {name.upper()}: {np.flatnonzero(getattr(groups, name)[0]).tolist()}")

    jitter = np.random.default_rng(0).normal(scale=0.01, size=(8, 2))
    square = np.stack([y, d], axis=1).astype(float) + jitter
    show("categories and domains both spread (unit square)", square, groups, cfg)

    collapsed = np.stack([y, 0.1 * d], axis=1).astype(float) + jitter
    show("domain axis shrunk by 10x", collapsed, groups, cfg)


if __name__ == "__main__":
    main()
