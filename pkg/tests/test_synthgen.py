import json

import numpy as np
import pytest

from poer.exceptions import ConfigurationError, InvalidArgumentError
from poer.losses import relation_groups, rank_loss
from poer.synthgen import (
    BatchSampler, DatasetSpec, generate, leave_one_domain_out, read_dataset, target_rho, write_dataset,
)

SMALL = DatasetSpec(n_categories=3, n_domains=3, per_cell=20, rho=(0.9, 0.9, 0.0), seed=4)


def test_cardinality_and_balance():
    ds = generate(DatasetSpec())
    assert len(ds) == 5 * 4 * 200
    cells, counts = np.unique(np.stack([ds.y, ds.d]), axis=1, return_counts=True)
    assert cells.shape[1] == 20 and np.all(counts == 200)
    assert ds.x.shape == (4000, 32) and np.all(np.isfinite(ds.x))


def test_noise_free_cells_are_constant():
    ds = generate(DatasetSpec(noise_std=0.0, rho=0.0, per_cell=5))
    for c in range(5):
        for dm in range(4):
            rows = ds.x[(ds.y == c) & (ds.d == dm)]
            assert np.all(rows == rows[0])


def test_identity_mixing_reconstructs_templates():
    spec = DatasetSpec(observed_dim=16, noise_std=0.0, rho=0.0, per_cell=2)
    ds = generate(spec, mixing=np.eye(16))
    for i in range(len(ds)):
        want = np.concatenate([ds.signal[ds.y[i]], ds.domains[ds.d[i]]])
        np.testing.assert_array_equal(ds.x[i], want)
    assert np.linalg.norm(ds.signal, axis=1) == pytest.approx(3.0)


def test_spurious_offset_present_when_rho_one():
    spec = DatasetSpec(observed_dim=16, noise_std=0.0, rho=1.0, per_cell=2)
    ds = generate(spec, mixing=np.eye(16))
    np.testing.assert_allclose(ds.x[:, 8:], ds.domains[ds.d] + ds.offsets[ds.y], atol=1e-15)


def test_generation_is_bit_identical():
    a, b = generate(SMALL), generate(SMALL)
    assert a.x.tobytes() == b.x.tobytes()
    assert generate(DatasetSpec(seed=5, per_cell=20)).x.tobytes() != generate(DatasetSpec(seed=6, per_cell=20)).x.tobytes()


def test_rho_zero_nuisance_independent_of_category():
    spec = DatasetSpec(n_categories=2, n_domains=3, per_cell=1000, rho=0.0, seed=2)
    ds = generate(spec)
    z = np.linalg.lstsq(ds.mixing, ds.x.T, rcond=None)[0].T
    for dm in range(3):
        sel = ds.d == dm
        for k in range(8, 16):
            assert abs(np.corrcoef(z[sel, k], ds.y[sel])[0, 1]) < 0.05


@pytest.mark.parametrize("field,value,needle", [
    ("n_categories", 1, "n_categories (K)"),
    ("n_domains", 2, "n_domains (D)"),
    ("observed_dim", 10, "observed_dim (p)"),
    ("per_cell", 1, "per_cell (N)"),
    ("rho", (0.5, 1.5, 0.0, 0.0), "rho"),
])
def test_spec_invariants_named(field, value, needle):
    with pytest.raises(ConfigurationError, match=needle.replace("(", r"\(").replace(")", r"\)")):
        DatasetSpec(**{field: value})


def test_target_rho():
    assert target_rho(4, 1) == (0.9, 0.0, 0.9, 0.9)
    with pytest.raises(InvalidArgumentError):
        target_rho(4, 4)


def test_split_partition():
    ds = generate(DatasetSpec())
    sp = leave_one_domain_out(ds, 2)
    idx = [sp.train.indices, sp.val.indices, sp.test.indices]
    joined = np.concatenate(idx)
    assert np.array_equal(np.sort(joined), np.arange(len(ds)))
    assert np.all(sp.test.d == 2) and not np.any(sp.train.d == 2) and not np.any(sp.val.d == 2)
    for c in range(5):
        for dm in (0, 1, 3):
            assert np.sum((sp.train.y == c) & (sp.train.d == dm)) == 180
            assert np.sum((sp.val.y == c) & (sp.val.d == dm)) == 20


def test_split_errors():
    ds = generate(SMALL)
    with pytest.raises(InvalidArgumentError):
        leave_one_domain_out(ds, 7)
    with pytest.raises(InvalidArgumentError):
        leave_one_domain_out(ds, 0, val_fraction=1.0)


def test_minimal_batch_has_all_groups():
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    d = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    batches = BatchSampler(y, d, 8, seed=0).epoch(0)
    assert len(batches) == 1 and batches[0].size == 8
    g = relation_groups(y[batches[0]], d[batches[0]])
    assert g.rank_valid().all() and g.cluster_valid().all()


def test_sampler_never_degenerate_and_covers_epoch():
    ds = generate(DatasetSpec(per_cell=40))
    sp = leave_one_domain_out(ds, 3)
    sampler = BatchSampler(sp.train.y, sp.train.d, 64, seed=1)
    seen = 0
    for e in range(112):
        batches = sampler.epoch(e)
        assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(len(sp.train)))
        for b in batches:
            g = relation_groups(sp.train.y[b], sp.train.d[b])
            assert g.rank_valid().all()
            rank_loss(np.zeros((b.size, 1)), g)
            seen += 1
    assert seen >= 1000


def test_sampler_deterministic():
    ds = generate(SMALL)
    a = BatchSampler(ds.y, ds.d, 32, seed=3)
    b = BatchSampler(ds.y, ds.d, 32, seed=3)
    for e in range(3):
        for u, v in zip(a.epoch(e), b.epoch(e)):
            assert np.array_equal(u, v)


@pytest.mark.parametrize("y,d,bs", [
    ([0, 0, 1, 1], [0, 1, 0, 1], 8),          # singleton cells
    ([0] * 8, [0, 1] * 4, 8),                  # one category
    ([0, 0, 1, 1] * 2, [0] * 8, 8),            # one domain
    ([0, 0, 0, 0, 1, 1, 1, 1], [0, 0, 1, 1] * 2, 4),  # batch too small
    ([0] * 4 + [1] * 4 + [2] * 4, [0, 0, 1, 1] * 3, 8),  # 6 cells need 12 slots
])
def test_sampler_impossible_constraints(y, d, bs):
    with pytest.raises(ConfigurationError):
        BatchSampler(np.array(y), np.array(d), bs)


def test_dataset_file_round_trip(tmp_path):
    ds = generate(SMALL)
    n = write_dataset(ds, tmp_path / "data.jsonl", tmp_path / "meta.json")
    assert n == 3 * 3 * 20
    first = json.loads((tmp_path / "data.jsonl").read_text().splitlines()[0])
    assert set(first) == {"x", "y", "d"} and len(first["x"]) == 32
    back = read_dataset(tmp_path / "data.jsonl", tmp_path / "meta.json")
    assert back.x.tobytes() == ds.x.tobytes()
    assert back.spec == ds.spec
    np.testing.assert_array_equal(back.mixing, ds.mixing)
    write_dataset(back, tmp_path / "again.jsonl", tmp_path / "again.json")
    assert (tmp_path / "again.jsonl").read_bytes() == (tmp_path / "data.jsonl").read_bytes()
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "meta.json").read_bytes()
