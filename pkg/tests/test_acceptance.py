"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (value, runtime, limit) that pytest
prints in an "acceptance criteria" section at the end of the run.
"""

import math
import time

import numpy as np
import pytest

import oracles
from poer.energy import pair_potential
from poer.losses import cluster_loss, rank_loss, relation_groups
from poer.netcore import grad_check, gradcheck_problem, objective_fn
from poer.prototypes import class_probabilities
from poer.synthgen import DatasetSpec, generate, leave_one_domain_out, target_rho
from poer.trainer import (
    TrainConfig, checkpoint_from_json, checkpoint_to_json, confidence_interval, initial_checkpoint,
    metrics_to_json, nearest_mean_probe, rank_violation_audit, train,
)

SEEDS = range(5)
TARGETS = range(4)


def random_labelled_batch(rng, max_size=16):
    """Labels with a 2 x 2 core of doubled cells (so some anchor is valid) plus random extras."""
    size = int(rng.integers(8, max_size + 1))
    y = [0, 0, 0, 0, 1, 1, 1, 1]
    d = [0, 0, 1, 1, 0, 0, 1, 1]
    while len(y) < size:
        y.append(int(rng.integers(0, 4)))
        d.append(int(rng.integers(0, 3)))
    perm = rng.permutation(size)
    f = rng.standard_normal((size, int(rng.integers(1, 9)))) * rng.uniform(0.05, 0.4)
    return f[perm], np.array(y)[perm], np.array(d)[perm]


def test_criterion_1_oracle_equivalence(record):
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(200):
        f, y, d = random_labelled_batch(rng)
        g = relation_groups(y, d)
        fl, yl, dl = f.tolist(), y.tolist(), d.tolist()
        worst = max(worst, abs(rank_loss(f, g) - oracles.rank_loss(fl, yl, dl)),
                    abs(cluster_loss(f, g) - oracles.cluster_loss(fl, yl, dl)))
    ok = record(1, "loss oracle equivalence, 200 batches", worst <= 1e-10,
                f"max abs diff {worst:.2e} (tol 1e-10)", time.perf_counter() - start, 10)
    assert ok


def test_criterion_2_gradient_suite(record):
    start = time.perf_counter()
    errors, paths = [], []
    for seed in range(20):
        prob = gradcheck_problem(seed)
        fn, loss_fn = objective_fn(prob.x, prob.y, prob.d, prob.cfg, alpha=0.2)
        rep = grad_check(fn, prob.params, loss_fn=loss_fn, seed=seed)
        errors.append(rep.max_rel_error)
        paths.append(rep.worst_path)
    worst = int(np.argmax(errors))
    ok = record(2, "full-objective grad check, 20 seeds", max(errors) <= 1e-4,
                f"max rel err {errors[worst]:.2e} at seed {worst} {paths[worst]} (tol 1e-4)",
                time.perf_counter() - start, 60)
    assert ok


def test_criterion_3_invariants(record):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    failures = []
    for i in range(1000):
        d = rng.uniform(0, 50, int(rng.integers(2, 12)))
        if abs(class_probabilities(d).sum() - 1.0) > 1e-9:
            failures.append(f"probabilities {i}")
        a, b = rng.standard_normal((2, int(rng.integers(1, 8)))) * rng.uniform(0.1, 5)
        e_ab, e_ba = pair_potential(a, b), pair_potential(b, a)
        if e_ab != e_ba or e_ab < 0 or pair_potential(a, a) != 0.0:
            failures.append(f"potential {i}")
        f, y, dom = random_labelled_batch(rng)
        f = f * rng.uniform(0.5, 20)
        g = relation_groups(y, dom)
        if not rank_loss(f, g) >= 0:
            failures.append(f"rank {i}")
        if not cluster_loss(f, g) > 0:
            failures.append(f"cluster {i}")
    ok = record(3, "probability/energy/loss invariants, 1000 inputs each", not failures,
                f"{len(failures)} violations {failures[:5]}", time.perf_counter() - start, 10)
    assert ok


def _loo(seed, target):
    data = generate(DatasetSpec(seed=seed, rho=target_rho(4, target)))
    return leave_one_domain_out(data, target, 0.1, seed)


def test_criterion_4_dg_trend(record):
    start = time.perf_counter()
    base, poer = [], []
    for seed in SEEDS:
        for target in TARGETS:
            splits = _loo(seed, target)
            base.append(train(TrainConfig(seed=seed, alpha_early=0.0, alpha_late=0.0), splits)[1].target_mean)
            poer.append(train(TrainConfig(seed=seed), splits)[1].target_mean)
    mb, hb = confidence_interval(base)
    mp, hp = confidence_interval(poer)
    gain = mp - mb
    ok = record(4, "DG trend, 5 seeds x 4 targets", gain >= 0.02,
                f"PoER {mp:.4f} +/- {hp:.4f} vs baseline {mb:.4f} +/- {hb:.4f}, gain {100 * gain:+.2f} pts (need +2)",
                time.perf_counter() - start, 600)
    assert ok


def test_criterion_5_ablations(record):
    start = time.perf_counter()
    arms = {
        "alpha=0": dict(alpha_early=0.0, alpha_late=0.0),
        "alpha=0.2": dict(alpha_early=0.2, alpha_late=0.2),
        "alpha=0.9": dict(alpha_early=0.9, alpha_late=0.9),
        "cls+rank": dict(use_cluster=False),
        "cls+cluster": dict(use_rank=False),
        "full": dict(),
    }
    acc = {name: [] for name in arms}
    for seed in SEEDS:
        splits = leave_one_domain_out(generate(DatasetSpec(seed=seed)), 3, 0.1, seed)
        for name, kw in arms.items():
            acc[name].append(train(TrainConfig(seed=seed, **kw), splits)[1].target_mean)
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    checks = {
        "alpha0.2>=alpha0": mean["alpha=0.2"] >= mean["alpha=0"],
        "rank>=cls": mean["cls+rank"] >= mean["alpha=0"],
        "cluster>=cls": mean["cls+cluster"] >= mean["alpha=0"],
        "full>=rank": mean["full"] >= mean["cls+rank"],
        "full>=cluster": mean["full"] >= mean["cls+cluster"],
    }
    detail = ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
    failed = [k for k, v in checks.items() if not v]
    ok = record(5, "ablation directions, 5 seeds", not failed,
                f"{detail}; failed: {failed or 'none'}", time.perf_counter() - start, 1200)
    assert ok


def test_criterion_6_progressive_filtering(record):
    start = time.perf_counter()
    splits = leave_one_domain_out(generate(DatasetSpec(seed=0)), 3, 0.1, 0)
    config = TrainConfig(seed=0)
    ckpt, _ = train(config, splits)
    init = initial_checkpoint(config, splits, 5)
    audit_init = rank_violation_audit(init, splits.val, 0)
    audit_trained = rank_violation_audit(ckpt, splits.val, 0)
    tr, va = ckpt.features(splits.train.x), ckpt.features(splits.val.x)
    chance = 1 / 3
    probe = [nearest_mean_probe(tr[b], splits.train.d, va[b], splits.val.d) for b in (0, -1)]
    closer = abs(probe[0] - chance) - abs(probe[1] - chance)
    ok = record(6, "progressive filtering",
                audit_trained < audit_init and closer >= 0.15,
                f"block-0 audit {audit_init:.4f} -> {audit_trained:.4f}; domain probe block 0 {probe[0]:.3f}, "
                f"last {probe[1]:.3f}, {100 * closer:.1f} pts closer to chance (need 15)",
                time.perf_counter() - start, 300)
    assert ok


def test_criterion_7_determinism_round_trip(record):
    start = time.perf_counter()
    splits = leave_one_domain_out(generate(DatasetSpec(seed=3, per_cell=60)), 3, 0.1, 3)
    config = TrainConfig(seed=3, epochs=6, alpha_switch_epoch=3)
    c1, m1 = train(config, splits)
    c2, m2 = train(config, splits)
    text = checkpoint_to_json(c1)
    same_runs = text == checkpoint_to_json(c2) and metrics_to_json(m1) == metrics_to_json(m2)
    round_trip = checkpoint_to_json(checkpoint_from_json(text)) == text
    ok = record(7, "determinism and checkpoint round trip", same_runs and round_trip,
                f"identical runs {same_runs}, save-load-save identical {round_trip}",
                time.perf_counter() - start, 120)
    assert ok


@pytest.mark.parametrize("values", [[0.8, 0.9], [0.61, 0.72, 0.65, 0.7, 0.69], [1.0, 1.0, 1.0, 0.5]])
def test_criterion_8_confidence_interval(record, values):
    start = time.perf_counter()
    k = len(values)
    mu = math.fsum(values) / k
    sigma = math.sqrt(math.fsum((v - mu) ** 2 for v in values) / (k - 1))
    got = confidence_interval(values)
    err = max(abs(got[0] - mu), abs(got[1] - 1.96 * sigma / math.sqrt(k)))
    ok = record(8, f"CI formula on {values}", err <= 1e-12, f"max diff {err:.1e} (tol 1e-12)",
                time.perf_counter() - start, 1)
    assert ok
