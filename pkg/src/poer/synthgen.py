"""Synthetic multi-domain data with a controllable spurious correlation.

Each sample has a category ``y`` and a domain ``d``. Its latent vector is::

    z = [ s_y + e_s ,  t_d + c * u_y + e_t ]

where ``s_y`` is the category's signal template, ``t_d`` the domain's
embedding, ``u_y`` a category-specific nuisance offset and ``e`` isotropic
Gaussian noise. ``c`` is 1 with probability ``rho[d]``, so in domains with a
high ``rho`` the nuisance block leaks the category and in domains with
``rho = 0`` it carries only domain information. Observations are ``x = W z``
for a fixed random mixing matrix ``W``.

Random draws come from :func:`poer.rng.stream` with these labels:
``("templates", "signal")``, ``("templates", "offset")``, ``("domains",)``,
``("mixing",)`` and ``("samples", y, d)`` for each cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .exceptions import ConfigurationError, InvalidArgumentError
from .rng import stream

DATASET_FORMAT = "poer-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    n_categories: int = 5
    n_domains: int = 4
    signal_dim: int = 8
    nuisance_dim: int = 8
    observed_dim: int = 32
    noise_std: float = 0.5
    rho: Optional[tuple[float, ...]] = None
    per_cell: int = 200
    seed: int = 0
    signal_norm: float = 3.0
    offset_norm: float = 3.0
    domain_norm: float = 3.0

    def __post_init__(self):
        rho = self.rho
        if rho is None:  # 0.9 in every source domain, 0 in the last one
            rho = tuple(0.0 if d == self.n_domains - 1 else 0.9 for d in range(int(self.n_domains)))
        elif np.isscalar(rho):
            rho = (float(rho),) * int(self.n_domains)
        object.__setattr__(self, "rho", tuple(float(r) for r in rho))
        self.validate()

    def validate(self):
        checks = [
            (self.n_categories >= 2, f"n_categories (K) must be >= 2, got {self.n_categories}"),
            (self.n_domains >= 3, f"n_domains (D) must be >= 3, got {self.n_domains}"),
            (self.signal_dim >= 1, f"signal_dim (q) must be >= 1, got {self.signal_dim}"),
            (self.nuisance_dim >= 1, f"nuisance_dim (r) must be >= 1, got {self.nuisance_dim}"),
            (self.observed_dim >= self.signal_dim + self.nuisance_dim,
             f"observed_dim (p) must be >= signal_dim + nuisance_dim, got {self.observed_dim}"),
            (self.per_cell >= 2, f"per_cell (N) must be >= 2, got {self.per_cell}"),
            (self.noise_std >= 0, f"noise_std (sigma) must be >= 0, got {self.noise_std}"),
            (len(self.rho) == self.n_domains,
             f"rho must have one entry per domain ({self.n_domains}), got {len(self.rho)}"),
            (all(0.0 <= r <= 1.0 for r in self.rho), f"rho entries must lie in [0, 1], got {self.rho}"),
            (min(self.signal_norm, self.offset_norm, self.domain_norm) >= 0, "template norms must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)

    @property
    def latent_dim(self) -> int:
        return self.signal_dim + self.nuisance_dim

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rho"] = list(self.rho)
        return out


def target_rho(n_domains: int, target: int, source: float = 0.9) -> tuple[float, ...]:
    """Per-domain ``rho`` with ``source`` everywhere except 0 at ``target``."""
    if not 0 <= target < n_domains:
        raise InvalidArgumentError(f"target domain {target} out of range for {n_domains} domains")
    return tuple(0.0 if d == target else float(source) for d in range(n_domains))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    spec: DatasetSpec
    signal: np.ndarray
    offsets: np.ndarray
    domains: np.ndarray
    mixing: np.ndarray

    def __len__(self) -> int:
        return self.y.size

    def metadata(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "spec": self.spec.to_dict(),
            "templates": {
                "signal": self.signal.tolist(),
                "offsets": self.offsets.tolist(),
                "domains": self.domains.tolist(),
            },
            "mixing": self.mixing.tolist(),
        }


def _scaled_rows(rng: np.random.Generator, rows: int, dim: int, norm: float) -> np.ndarray:
    v = rng.standard_normal((rows, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * norm


def generate(spec: DatasetSpec, mixing: np.ndarray | None = None) -> Dataset:
    """Draw ``K * D * N`` samples, ordered by category, then domain, then draw.

    ``mixing`` replaces the random ``W`` (shape ``(p, q + r)``); tests use it
    to pin ``W`` to the identity.
    """
    spec.validate()
    k, n_dom, q, r = spec.n_categories, spec.n_domains, spec.signal_dim, spec.nuisance_dim
    signal = _scaled_rows(stream(spec.seed, "templates", "signal"), k, q, spec.signal_norm)
    offsets = _scaled_rows(stream(spec.seed, "templates", "offset"), k, r, spec.offset_norm)
    domains = _scaled_rows(stream(spec.seed, "domains"), n_dom, r, spec.domain_norm)
    if mixing is None:
        w = stream(spec.seed, "mixing").standard_normal((spec.observed_dim, spec.latent_dim))
        w /= math.sqrt(spec.latent_dim)
    else:
        w = np.array(mixing, dtype=np.float64)
        if w.shape != (spec.observed_dim, spec.latent_dim):
            raise InvalidArgumentError(f"mixing must have shape {(spec.observed_dim, spec.latent_dim)}, got {w.shape}")

    latents, ys, ds = [], [], []
    for y in range(k):
        for d in range(n_dom):
            rng = stream(spec.seed, "samples", y, d)
            noise = rng.standard_normal((spec.per_cell, spec.latent_dim)) * spec.noise_std
            spurious = (rng.random(spec.per_cell) < spec.rho[d]).astype(np.float64)
            z = noise
            z[:, :q] += signal[y]
            z[:, q:] += domains[d] + spurious[:, None] * offsets[y]
            latents.append(z)
            ys.append(np.full(spec.per_cell, y))
            ds.append(np.full(spec.per_cell, d))
    z = np.concatenate(latents)
    return Dataset(
        x=z @ w.T,
        y=np.concatenate(ys).astype(np.int64),
        d=np.concatenate(ds).astype(np.int64),
        spec=spec, signal=signal, offsets=offsets, domains=domains, mixing=w,
    )


@dataclass
class Split:
    """A subset of a dataset; ``indices`` point into the parent dataset."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.y.size

    def subset(self, rows) -> "Split":
        rows = np.asarray(rows, dtype=np.int64)
        return Split(self.x[rows], self.y[rows], self.d[rows], self.indices[rows])


def dataset_split(dataset: Dataset, indices) -> Split:
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    return Split(dataset.x[idx], dataset.y[idx], dataset.d[idx], idx)


@dataclass
class DomainSplits:
    train: Split
    val: Split
    test: Split
    target_domain: int

    def __getitem__(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


def leave_one_domain_out(dataset: Dataset, target_domain: int, val_fraction: float = 0.1,
                         seed: int = 0) -> DomainSplits:
    """Hold out one domain for testing; split every source cell into train/val.

    Each source (category, domain) cell is shuffled with its own stream and
    ``round(val_fraction * cell_size)`` of its samples go to validation.
    """
    if not 0 < val_fraction < 1:
        raise InvalidArgumentError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    present = np.unique(dataset.d)
    if target_domain not in present:
        raise InvalidArgumentError(f"target domain {target_domain} not present; domains are {present.tolist()}")
    test = np.flatnonzero(dataset.d == target_domain)
    train, val = [], []
    for y in np.unique(dataset.y):
        for d in present:
            if d == target_domain:
                continue
            cell = np.flatnonzero((dataset.y == y) & (dataset.d == d))
            if cell.size == 0:
                continue
            cell = stream(seed, "split", int(y), int(d)).permutation(cell)
            n_val = int(math.floor(val_fraction * cell.size + 0.5))
            val.append(cell[:n_val])
            train.append(cell[n_val:])
    return DomainSplits(
        train=dataset_split(dataset, np.concatenate(train)),
        val=dataset_split(dataset, np.concatenate(val)),
        test=dataset_split(dataset, test),
        target_domain=int(target_domain),
    )


@dataclass
class BatchSampler:
    """Stratified batches in which every relation group exists for every anchor.

    Each epoch shuffles every (category, domain) cell and deals it into
    ``n_batches`` nearly equal chunks, one per batch, so every batch holds at
    least two samples of every cell and every sample appears exactly once per
    epoch. ``n_batches = ceil(len / batch_size)``, capped so chunks never drop
    below two samples; batch sizes are therefore close to, not exactly,
    ``batch_size``. Indices in a batch are sorted ascending.
    """

    labels: np.ndarray
    domains: np.ndarray
    batch_size: int
    seed: int = 0
    cells: dict = field(init=False, repr=False)
    n_batches: int = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        d = np.asarray(self.domains, dtype=np.int64)
        if self.batch_size < 8:
            raise ConfigurationError(f"batch_size must be >= 8, got {self.batch_size}")
        cats, doms = np.unique(y), np.unique(d)
        if cats.size < 2 or doms.size < 2:
            raise ConfigurationError(
                f"need at least 2 categories and 2 domains, got {cats.size} and {doms.size}")
        self.cells = {}
        for c in cats:
            for dm in doms:
                idx = np.flatnonzero((y == c) & (d == dm))
                if idx.size:
                    self.cells[(int(c), int(dm))] = idx
        for (c, dm), idx in self.cells.items():
            if idx.size < 2:
                raise ConfigurationError(f"cell (category {c}, domain {dm}) has fewer than 2 samples")
            keys = self.cells.keys()
            if not any(k[0] == c and k[1] != dm for k in keys) or \
                    not any(k[0] != c and k[1] == dm for k in keys) or \
                    not any(k[0] != c and k[1] != dm for k in keys):
                raise ConfigurationError(f"cell (category {c}, domain {dm}) lacks partner cells for some relation group")
        if self.batch_size < 2 * len(self.cells):
            raise ConfigurationError(
                f"batch_size {self.batch_size} cannot hold 2 samples from each of {len(self.cells)} cells")
        smallest = min(idx.size for idx in self.cells.values())
        self.n_batches = max(1, min(math.ceil(y.size / self.batch_size), smallest // 2))

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = stream(self.seed, "sampler", epoch)
        chunks = [np.array_split(rng.permutation(idx), self.n_batches) for idx in self.cells.values()]
        return [np.sort(np.concatenate([c[t] for c in chunks])) for t in range(self.n_batches)]

    def __iter__(self) -> Iterator[np.ndarray]:
        epoch = 0
        while True:
            yield from self.epoch(epoch)
            epoch += 1


def write_dataset(dataset: Dataset, data_path, meta_path) -> int:
    """Write JSON-lines records and the metadata document; returns the record count."""
    lines = [json.dumps({"x": row.tolist(), "y": int(y), "d": int(d)})
             for row, y, d in zip(dataset.x, dataset.y, dataset.d)]
    Path(data_path).write_text("\n".join(lines) + "\n")
    Path(meta_path).write_text(json.dumps(dataset.metadata(), indent=1, sort_keys=True) + "\n")
    return len(lines)


def read_dataset(data_path, meta_path) -> Dataset:
    meta = json.loads(Path(meta_path).read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise InvalidArgumentError(f"{meta_path} is not a {DATASET_FORMAT} metadata file")
    xs, ys, ds = [], [], []
    with open(data_path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                xs.append(rec["x"])
                ys.append(rec["y"])
                ds.append(rec["d"])
    t = meta["templates"]
    return Dataset(
        x=np.array(xs, dtype=np.float64), y=np.array(ys, dtype=np.int64), d=np.array(ds, dtype=np.int64),
        spec=DatasetSpec(**meta["spec"]),
        signal=np.array(t["signal"]), offsets=np.array(t["offsets"]), domains=np.array(t["domains"]),
        mixing=np.array(meta["mixing"]),
    )
