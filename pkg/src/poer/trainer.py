"""Training loop, model selection, evaluation and analysis tools.

One training run follows the usual recipe: stratified batches, forward
through every block, ranking loss on the shallow blocks, cluster loss on the
deep blocks, prototype cross-entropy on the last block, ``cls + alpha * poer``
with ``alpha`` stepping from ``alpha_early`` to ``alpha_late`` at
``alpha_switch_epoch``, AdamW with a halving learning rate, and selection of
the epoch with the best validation accuracy after a burn-in.

Inputs are standardized with train-split statistics and divided by
``sqrt(input_dim)`` so that rows have roughly unit norm; this keeps the
exponential energy kernel away from its clamp at initialization.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configio import from_dict, to_dict
from .energy import kernel, pairwise_distances
from .exceptions import (
    ConfigurationError, DivergenceError, InvalidArgumentError, VersionMismatchError,
)
from .losses import LossConfig
from .netcore import (
    Extractor, ExtractorConfig, ExtractorState, OptimizerHyper, lr_schedule, new_state, objective,
    optimizer_step,
)
from .prototypes import DEFAULT_PROTOTYPES_PER_CLASS, predict_batch
from .rng import stream
from .synthgen import BatchSampler, DomainSplits, Split

CHECKPOINT_FORMAT = "poer-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    alpha_early: float = 0.1
    alpha_late: float = 0.2
    alpha_switch_epoch: int = 20
    seed: int = 0
    prototypes_per_class: int = DEFAULT_PROTOTYPES_PER_CLASS
    use_rank: bool = True
    use_cluster: bool = True
    burn_in_fraction: float = 0.1
    extractor: ExtractorConfig = ExtractorConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerHyper = OptimizerHyper(lr=1e-3, half_life=20)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.alpha_early < 0 or self.alpha_late < 0:
            raise ConfigurationError("alpha values must be >= 0")
        if self.alpha_switch_epoch < 0:
            raise ConfigurationError("alpha_switch_epoch must be >= 0")
        if self.prototypes_per_class < 1:
            raise ConfigurationError("prototypes_per_class must be >= 1")
        if not 0 <= self.burn_in_fraction < 1:
            raise ConfigurationError("burn_in_fraction must lie in [0, 1)")
        n = self.extractor.n_blocks
        for b in self.loss.rank_blocks + self.loss.cluster_blocks:
            if b >= n:
                raise ConfigurationError(f"loss block index {b} out of range for {n} extractor blocks")

    def alpha(self, epoch: int) -> float:
        return self.alpha_early if epoch < self.alpha_switch_epoch else self.alpha_late

    @property
    def burn_in(self) -> int:
        return int(math.floor(self.burn_in_fraction * self.epochs))

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return from_dict(cls, data)


@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(x.mean(axis=0), std * math.sqrt(x.shape[1]))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


@dataclass
class Checkpoint:
    config: TrainConfig
    state: ExtractorState
    normalizer: Normalizer
    n_classes: int
    target_domain: int = -1
    val_fraction: float = 0.1
    split_seed: int = 0
    best_val: float = float("nan")
    selected_epoch: int = -1
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def features(self, x) -> list[np.ndarray]:
        net = Extractor(self.config.extractor, self.state.params)
        return net.forward(self.normalizer(x))


@dataclass
class MetricsReport:
    target_accuracy: dict[int, float]
    target_mean: float
    val_accuracy: float
    selected_epoch: int
    curves: dict
    poer_grad_applications: int
    seed: int
    config: dict
    target_domain: int
    val_history: list[float] = field(default_factory=list)
    batch_totals: list[float] = field(default_factory=list)
    target_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": "poer-metrics/1",
            "seed": self.seed,
            "target_domain": self.target_domain,
            "target_accuracy": {str(k): v for k, v in sorted(self.target_accuracy.items())},
            "target_mean": self.target_mean,
            "val_accuracy": _json_number(self.val_accuracy),
            "selected_epoch": self.selected_epoch,
            "val_history": self.val_history,
            "target_history": self.target_history,
            "poer_grad_applications": self.poer_grad_applications,
            "curves": {k: [_json_number(v) for v in series] for k, series in self.curves.items()},
            "batch_totals": self.batch_totals,
            "config": self.config,
        }


def _json_number(v: float):
    """NaN marks epochs where a term was not evaluated; JSON spells that null."""
    return None if isinstance(v, float) and math.isnan(v) else v


def _term_names(result) -> list[tuple[str, float]]:
    terms = [("cls", result.cls)]
    terms += [(f"rank[block {b}]", v) for b, v in sorted(result.breakdown["rank"].items())]
    terms += [(f"cluster[block {b}]", v) for b, v in sorted(result.breakdown["cluster"].items())]
    return terms


def initial_checkpoint(config: TrainConfig, splits: DomainSplits, n_classes: int | None = None,
                       val_fraction: float = 0.1, split_seed: int = 0) -> Checkpoint:
    """The untrained model that :func:`train` starts from (same seed, same normalizer)."""
    if n_classes is None:
        n_classes = int(max(splits.train.y.max(), splits.val.y.max(),
                            splits.test.y.max() if len(splits.test) else 0)) + 1
    state = new_state(config.extractor, n_classes, config.seed, config.prototypes_per_class)
    return Checkpoint(config, state, Normalizer.fit(splits.train.x), n_classes, splits.target_domain,
                      val_fraction, split_seed, rng={"seed": config.seed, "next_epoch": 0})


def train(config: TrainConfig, splits: DomainSplits, n_classes: int | None = None,
          val_fraction: float = 0.1, split_seed: int = 0,
          monitor_target: bool = False) -> tuple[Checkpoint, MetricsReport]:
    """Run one training job and return the best-validation checkpoint plus metrics.

    With ``monitor_target`` the target-domain accuracy of every epoch is
    recorded in ``report.target_history``; it never influences selection.
    """
    train_split, val_split = splits.train, splits.val
    if len(train_split) == 0 or len(val_split) == 0:
        raise InvalidArgumentError("train and validation splits must be non-empty")
    if train_split.x.shape[1] != config.extractor.input_dim:
        raise ConfigurationError(
            f"extractor input_dim {config.extractor.input_dim} does not match data width {train_split.x.shape[1]}")
    init = initial_checkpoint(config, splits, n_classes, val_fraction, split_seed)
    n_classes, normalizer, state = init.n_classes, init.normalizer, init.state
    x_train = normalizer(train_split.x)
    sampler = BatchSampler(train_split.y, train_split.d, config.batch_size, config.seed)
    hyper = config.optimizer

    def snapshot(epoch_next, best_val, selected):
        return Checkpoint(config, state.copy(), normalizer, n_classes, splits.target_domain, val_fraction,
                          split_seed, best_val, selected, {"seed": config.seed, "next_epoch": epoch_next})

    best = None
    curves: dict[str, list[float]] = {"total": [], "cls": [], "lr": [], "alpha": []}
    val_history, batch_totals, target_history = [], [], []
    applied = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, hyper)
        alpha = config.alpha(epoch)
        sums: dict[str, float] = {}
        batches = sampler.epoch(epoch)
        for bi, idx in enumerate(batches):
            res = objective(state.params, x_train[idx], train_split.y[idx], train_split.d[idx],
                            config.extractor, config.loss, alpha, config.use_rank, config.use_cluster)
            if not math.isfinite(res.total):
                bad = [name for name, v in _term_names(res) if not math.isfinite(v)] or ["total"]
                raise DivergenceError(f"non-finite loss term {', '.join(bad)} at epoch {epoch}, batch {bi}")
            try:
                optimizer_step(state, res.grads, hyper, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (epoch {epoch}, batch {bi})") from None
            applied += int(res.poer_evaluated)
            batch_totals.append(res.total)
            for name, v in [("total", res.total)] + _term_names(res):
                sums[name] = sums.get(name, 0.0) + v
        for name in sorted(set(curves) | set(sums)):
            if name in ("lr", "alpha"):
                continue
            series = curves.setdefault(name, [float("nan")] * epoch)
            series.append(sums[name] / len(batches) if name in sums else float("nan"))
        curves["lr"].append(lr)
        curves["alpha"].append(alpha)

        current = snapshot(epoch + 1, float("nan"), epoch)
        val_acc = evaluate(current, val_split)["overall"]
        val_history.append(val_acc)
        if monitor_target and len(splits.test):
            target_history.append(evaluate(current, splits.test)["overall"])
        if epoch >= config.burn_in and (best is None or val_acc > best.best_val):
            current.best_val = val_acc
            best = current

    test_acc = evaluate(best, splits.test) if len(splits.test) else {"per_domain": {}, "overall": float("nan")}
    report = MetricsReport(
        target_accuracy=test_acc["per_domain"],
        target_mean=test_acc["overall"],
        val_accuracy=best.best_val,
        selected_epoch=best.selected_epoch,
        curves=curves,
        poer_grad_applications=applied,
        seed=config.seed,
        config=config.to_dict(),
        target_domain=splits.target_domain,
        val_history=val_history,
        batch_totals=batch_totals,
        target_history=target_history,
    )
    return best, report


def evaluate(checkpoint: Checkpoint, split: Split) -> dict:
    """Top-1 accuracy of prototype classification, per domain and overall."""
    if len(split) == 0:
        raise InvalidArgumentError("cannot evaluate an empty split")
    pred = predict_batch(checkpoint.features(split.x)[-1], checkpoint.state.params["prototypes"])
    correct = pred == split.y
    per_domain = {int(d): float(correct[split.d == d].mean()) for d in np.unique(split.d)}
    return {"per_domain": per_domain, "overall": float(correct.mean()), "predictions": pred}


def confidence_interval(values) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * s / sqrt(k)`` with the ``k - 1`` standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise InvalidArgumentError(f"need at least 2 runs, got {v.size}")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------------------
# ranking-order audit

def _cell_table(y: np.ndarray, d: np.ndarray):
    cells: dict[tuple[int, int], np.ndarray] = {}
    for c in np.unique(y):
        for dm in np.unique(d):
            idx = np.flatnonzero((y == c) & (d == dm))
            if idx.size:
                cells[(int(c), int(dm))] = idx
    return cells


def _quad_weights(cells, i, j):
    """Partner-cell choices ``(q, p)`` and their tuple counts for an anchor in cell ``(i, j)``."""
    n_ss = cells[(i, j)].size - 1
    choices, weights = [], []
    for (c, q), idx in cells.items():
        if c != i or q == j:
            continue
        for (p, dm), idx2 in cells.items():
            if p == i or dm != j or (p, q) not in cells:
                continue
            choices.append((q, p))
            weights.append(n_ss * idx.size * idx2.size * cells[(p, q)].size)
    return choices, np.array(weights, dtype=np.float64)


def quadruple_count(y, d) -> int:
    """Number of ``(x, SS, SD, DS, DD)`` tuples with the DD partner in the DS partner's
    category and the SD partner's domain."""
    y = np.asarray(y)
    d = np.asarray(d)
    cells = _cell_table(y, d)
    total = 0
    for (i, j), idx in cells.items():
        _, w = _quad_weights(cells, i, j)
        total += int(idx.size * w.sum())
    return total


def _violates(e: np.ndarray, x, a, b, c, dd) -> np.ndarray:
    e1, e2, e3, e4 = e[x, a], e[x, b], e[x, c], e[x, dd]
    return ~((e1 < e2) & (e2 < e3) & (e3 < e4))


def exhaustive_violation_rate(features, y, d, beta: float = 1.0) -> float:
    """Violation rate of the strict energy ordering over every quadruple."""
    from .energy import EnergyConfig

    y = np.asarray(y)
    d = np.asarray(d)
    energy, _ = kernel(pairwise_distances(features), EnergyConfig(beta))
    cells = _cell_table(y, d)
    bad = total = 0
    for (i, j), idx in cells.items():
        for x in idx:
            ss = idx[idx != x]
            for q, p in _quad_weights(cells, i, j)[0]:
                a, b, c, dd = np.meshgrid(ss, cells[(i, q)], cells[(p, j)], cells[(p, q)], indexing="ij")
                v = _violates(energy, x, a.ravel(), b.ravel(), c.ravel(), dd.ravel())
                bad += int(v.sum())
                total += v.size
    if total == 0:
        raise ConfigurationError("split lacks the label diversity needed for ranking quadruples")
    return bad / total


def violation_rate(features, y, d, budget: int, seed: int = 0, beta: float = 1.0) -> float:
    """Fraction of quadruples breaking ``E(SS) < E(SD) < E(DS) < E(DD)``.

    Quadruples are drawn uniformly (with replacement) from the full set; when
    ``budget`` covers the whole set the exact enumeration is used instead.
    """
    from .energy import EnergyConfig

    y = np.asarray(y)
    d = np.asarray(d)
    total = quadruple_count(y, d)
    if total == 0:
        raise ConfigurationError("split lacks the label diversity needed for ranking quadruples")
    if budget >= total:
        return exhaustive_violation_rate(features, y, d, beta)
    if budget < 1:
        raise InvalidArgumentError(f"budget must be >= 1, got {budget}")
    rng = stream(seed, "audit")
    cells = _cell_table(y, d)
    keys = list(cells)
    anchor_cell_w = []
    per_cell = {}
    for key in keys:
        choices, w = _quad_weights(cells, *key)
        per_cell[key] = (choices, w)
        anchor_cell_w.append(cells[key].size * w.sum())
    anchor_cell_w = np.array(anchor_cell_w) / np.sum(anchor_cell_w)
    cell_draw = rng.choice(len(keys), size=budget, p=anchor_cell_w)
    quads = np.empty((budget, 5), dtype=np.int64)
    for n, ci in enumerate(cell_draw):
        i, j = keys[ci]
        idx = cells[(i, j)]
        choices, w = per_cell[(i, j)]
        x = rng.choice(idx)
        a = rng.choice(idx[idx != x])
        q, p = choices[rng.choice(len(choices), p=w / w.sum())]
        quads[n] = (x, a, rng.choice(cells[(i, q)]), rng.choice(cells[(p, j)]), rng.choice(cells[(p, q)]))
    f = np.asarray(features, dtype=np.float64)
    used = np.unique(quads)
    pos = np.full(f.shape[0], -1)
    pos[used] = np.arange(used.size)
    energy, _ = kernel(pairwise_distances(f[used]), EnergyConfig(beta))
    q = pos[quads]
    return float(_violates(energy, q[:, 0], q[:, 1], q[:, 2], q[:, 3], q[:, 4]).mean())


def rank_violation_audit(checkpoint: Checkpoint, split: Split, block: int, budget: int = 20000,
                         seed: int = 0) -> float:
    """Ranking-order violation rate of one block's features on ``split``."""
    if not 0 <= block < checkpoint.config.extractor.n_blocks:
        raise InvalidArgumentError(f"block {block} out of range")
    feats = checkpoint.features(split.x)[block]
    return violation_rate(feats, split.y, split.d, budget, seed, checkpoint.config.loss.beta)


# ---------------------------------------------------------------------------
# embeddings and probes

def principal_projection(features, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows onto the top covariance eigenvectors.

    Each eigenvector's sign is fixed so that its first non-zero coordinate is
    positive. Returns ``(projection, eigenvalues)``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 3:
        raise InvalidArgumentError(f"need at least 3 samples, got shape {f.shape}")
    centred = f - f.mean(axis=0)
    cov = centred.T @ centred / (f.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = vals[order], vecs[:, order]
    for k in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, k]) > 1e-12)
        if nz.size and vecs[nz[0], k] < 0:
            vecs[:, k] = -vecs[:, k]
    proj = centred @ vecs
    if proj.shape[1] < n_components:
        proj = np.hstack([proj, np.zeros((proj.shape[0], n_components - proj.shape[1]))])
        vals = np.concatenate([vals, np.zeros(n_components - vals.size)])
    return proj, vals


def export_embeddings(checkpoint: Checkpoint, split: Split, block: int) -> np.ndarray:
    """Rows of ``(pc1, pc2, category, domain)`` for one block's features."""
    if len(split) < 3:
        raise InvalidArgumentError(f"need at least 3 samples, got {len(split)}")
    if not 0 <= block < checkpoint.config.extractor.n_blocks:
        raise InvalidArgumentError(f"block {block} out of range")
    proj, _ = principal_projection(checkpoint.features(split.x)[block])
    return np.column_stack([proj, split.y, split.d])


def write_embeddings_csv(table: np.ndarray, path) -> None:
    lines = ["pc1,pc2,category,domain"]
    lines += [f"{r[0]!r},{r[1]!r},{int(r[2])},{int(r[3])}" for r in table.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def nearest_mean_probe(train_features, train_labels, test_features, test_labels) -> float:
    """Accuracy of a nearest-class-mean classifier fit on frozen features."""
    tf = np.asarray(train_features, dtype=np.float64)
    labels = np.unique(train_labels)
    means = np.stack([tf[np.asarray(train_labels) == c].mean(axis=0) for c in labels])
    dist = pairwise_cross(np.asarray(test_features, dtype=np.float64), means)
    pred = labels[np.argmin(dist, axis=1)]
    return float((pred == np.asarray(test_labels)).mean())


def pairwise_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


# ---------------------------------------------------------------------------
# checkpoint and metrics files

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    st = ckpt.state
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "n_classes": ckpt.n_classes,
        "target_domain": ckpt.target_domain,
        "val_fraction": ckpt.val_fraction,
        "split_seed": ckpt.split_seed,
        "best_val": ckpt.best_val,
        "selected_epoch": ckpt.selected_epoch,
        "rng": ckpt.rng,
        "normalizer": {"mean": _encode(ckpt.normalizer.mean), "scale": _encode(ckpt.normalizer.scale)},
        "state": {
            "step": st.step,
            "params": {k: _encode(v) for k, v in st.params.items()},
            "exp_avg": {k: _encode(v) for k, v in st.exp_avg.items()},
            "exp_avg_sq": {k: _encode(v) for k, v in st.exp_avg_sq.items()},
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def checkpoint_from_json(text: str) -> Checkpoint:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError("not a poer checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {doc.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    s = doc["state"]
    names = list(s["params"])
    state = ExtractorState(
        params={k: _decode(s["params"][k]) for k in names},
        exp_avg={k: _decode(s["exp_avg"][k]) for k in names},
        exp_avg_sq={k: _decode(s["exp_avg_sq"][k]) for k in names},
        step=s["step"],
    )
    return Checkpoint(
        config=TrainConfig.from_dict(doc["config"]),
        state=state,
        normalizer=Normalizer(_decode(doc["normalizer"]["mean"]), _decode(doc["normalizer"]["scale"])),
        n_classes=doc["n_classes"],
        target_domain=doc["target_domain"],
        val_fraction=doc["val_fraction"],
        split_seed=doc["split_seed"],
        best_val=doc["best_val"],
        selected_epoch=doc["selected_epoch"],
        rng=doc["rng"],
        version=doc["version"],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(checkpoint_to_json(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_json(Path(path).read_text())


def metrics_to_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
