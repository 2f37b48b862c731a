"""Command-line entry point: ``poer {gen,train,eval,audit,embed,gradcheck}``.

Every command reads an optional experiment file (JSON mirroring
:class:`ExperimentConfig`), applies command-line flags on top of it, and
writes a JSON or CSV report. Exit codes: 0 success, 1 failed gradient check,
2 configuration or usage error, 3 I/O error, 4 numeric divergence,
5 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .configio import from_dict, to_dict
from .exceptions import ConfigurationError, DivergenceError, InvalidArgumentError, VersionMismatchError
from .netcore import grad_check, gradcheck_problem, objective_fn
from .synthgen import DatasetSpec, generate, leave_one_domain_out, read_dataset, target_rho, write_dataset
from .trainer import (
    TrainConfig, evaluate, export_embeddings, load_checkpoint, metrics_to_json, quadruple_count,
    rank_violation_audit, save_checkpoint, train, write_embeddings_csv,
)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_VERSION = 0, 1, 2, 3, 4, 5


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; the JSON file mirrors these fields."""

    dataset: DatasetSpec = DatasetSpec()
    train: TrainConfig = TrainConfig()
    target_domain: int = 3
    val_fraction: float = 0.1
    data: str = "data.jsonl"
    meta: str = "meta.json"
    checkpoint: str = "checkpoint.json"
    metrics: str = "metrics.json"


def load_experiment(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(ExperimentConfig, doc, "experiment")


def _override(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Apply flags on top of the file; flags win."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    top = {}
    for name in ("data", "meta", "checkpoint", "metrics"):
        if get(name) is not None:
            top[name] = get(name)
    if get("target_domain") is not None:
        top["target_domain"] = get("target_domain")
    ds = to_dict(cfg.dataset)
    tr = to_dict(cfg.train)
    if get("seed") is not None:
        ds["seed"] = tr["seed"] = get("seed")
    if get("alpha") is not None:
        tr["alpha_early"] = tr["alpha_late"] = get("alpha")
    if get("epochs") is not None:
        tr["epochs"] = get("epochs")
    if get("prototypes") is not None:
        tr["prototypes_per_class"] = get("prototypes")
    if get("gen_target") is not None:
        ds["rho"] = list(target_rho(ds["n_domains"], get("gen_target")))
    merged = to_dict(cfg)
    merged.update(top, dataset=ds, train=tr)
    return from_dict(ExperimentConfig, merged, "experiment")


def _splits(cfg: ExperimentConfig, target: int, val_fraction: float, seed: int):
    dataset = read_dataset(cfg.data, cfg.meta)
    return leave_one_domain_out(dataset, target, val_fraction, seed)


def _write(path: str, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    Path(cfg.data).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.meta).parent.mkdir(parents=True, exist_ok=True)
    count = write_dataset(generate(cfg.dataset), cfg.data, cfg.meta)
    print(count)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    splits = _splits(cfg, cfg.target_domain, cfg.val_fraction, cfg.train.seed)
    ckpt, report = train(cfg.train, splits, n_classes=cfg.dataset.n_categories, val_fraction=cfg.val_fraction,
                         split_seed=cfg.train.seed)
    Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, cfg.checkpoint)
    _write(cfg.metrics, metrics_to_json(report))
    print(f"target accuracy {report.target_mean:.4f} (domain {cfg.target_domain}), "
          f"selected epoch {report.selected_epoch}")
    return EXIT_OK


def _checkpoint_split(cfg: ExperimentConfig, args):
    ckpt = load_checkpoint(cfg.checkpoint)
    splits = _splits(cfg, ckpt.target_domain, ckpt.val_fraction, ckpt.split_seed)
    return ckpt, splits[args.split]


def _check_block(ckpt, block: int) -> None:
    n = ckpt.config.extractor.n_blocks
    if not 0 <= block < n:
        raise ConfigurationError(f"--block must lie in [0, {n}), got {block}")


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ckpt, split = _checkpoint_split(cfg, args)
    res = evaluate(ckpt, split)
    report = {"split": args.split, "overall": res["overall"],
              "per_domain": {str(k): v for k, v in res["per_domain"].items()}, "n": len(split)}
    _write(args.out, _dump(report))
    print(f"{args.split} accuracy {res['overall']:.4f}")
    return EXIT_OK


def cmd_audit(cfg: ExperimentConfig, args) -> int:
    ckpt = load_checkpoint(cfg.checkpoint)
    _check_block(ckpt, args.block)
    splits = _splits(cfg, ckpt.target_domain, ckpt.val_fraction, ckpt.split_seed)
    split = splits[args.split]
    rate = rank_violation_audit(ckpt, split, args.block, args.budget, args.audit_seed)
    total = quadruple_count(split.y, split.d)
    report = {"split": args.split, "block": args.block, "budget": args.budget, "seed": args.audit_seed,
              "quadruples": total, "exhaustive": args.budget >= total, "violation_rate": rate}
    _write(args.out, _dump(report))
    print(f"block {args.block} violation rate {rate:.4f}")
    return EXIT_OK


def cmd_embed(cfg: ExperimentConfig, args) -> int:
    ckpt = load_checkpoint(cfg.checkpoint)
    _check_block(ckpt, args.block)
    splits = _splits(cfg, ckpt.target_domain, ckpt.val_fraction, ckpt.split_seed)
    table = export_embeddings(ckpt, splits[args.split], args.block)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_embeddings_csv(table, args.out)
    print(f"wrote {table.shape[0]} rows")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    seed = cfg.train.seed
    prob = gradcheck_problem(seed)
    fn, loss_fn = objective_fn(prob.x, prob.y, prob.d, prob.cfg, cfg.train.loss, alpha=args.check_alpha)
    rep = grad_check(fn, prob.params, args.eps, loss_fn=loss_fn, tol=args.tol, seed=seed)
    report = dataclasses.asdict(rep)
    report.update(seed=seed, eps=args.eps, tol=args.tol, passed=rep.passed(args.tol))
    _write(args.out, _dump(report))
    print(f"max relative error {rep.max_rel_error:.3e} at {rep.worst_path}")
    return EXIT_OK if rep.passed(args.tol) else EXIT_CHECK_FAILED


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "audit": cmd_audit,
            "embed": cmd_embed, "gradcheck": cmd_gradcheck}


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags whose default is resolved from the config file."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    parser = argparse.ArgumentParser(prog="poer", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, paths=("data", "meta")):
        p.add_argument("--config", default=None, help="experiment JSON file (flags override its fields)")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: from file, else 0)")
        for name in paths:
            p.add_argument(f"--{name}", default=None,
                           help=f"{name} path (default: from file, else {getattr(ExperimentConfig, name)})")

    p = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    common(p)
    p.add_argument("--target-domain", dest="gen_target", type=int, default=None,
                   help="domain given rho = 0 (others keep 0.9); default keeps the file's rho")

    p = sub.add_parser("train", help="train on source domains, test on the held-out one", formatter_class=fmt)
    common(p, ("data", "meta", "checkpoint", "metrics"))
    p.add_argument("--alpha", type=float, default=None, help="constant alpha for every epoch (0 = baseline)")
    p.add_argument("--target-domain", type=int, default=None, help="held-out domain (default: from file, else 3)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: from file, else 40)")
    p.add_argument("--prototypes", type=int, default=None, help="prototypes per class (default: from file, else 3)")

    for name, text in (("eval", "top-1 accuracy of a checkpoint"),
                       ("audit", "ranking-order violation rate of one block"),
                       ("embed", "2-D principal projection of one block as CSV")):
        p = sub.add_parser(name, help=text, formatter_class=fmt)
        common(p, ("data", "meta", "checkpoint"))
        # the audit needs several domains, so it defaults to the source validation split
        p.add_argument("--split", choices=("train", "val", "test"), default="val" if name == "audit" else "test",
                       help="which split to use")
        if name != "eval":
            p.add_argument("--block", type=int, default=0, help="block index")
        if name == "audit":
            p.add_argument("--budget", type=int, default=20000,
                           help="sampled quadruples; exhaustive when it covers every quadruple")
            p.add_argument("--audit-seed", type=int, default=0, help="seed of the quadruple sampler")
        p.add_argument("--out", default=f"{name}.{'csv' if name == 'embed' else 'json'}", help="report path")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective", formatter_class=fmt)
    p.add_argument("--config", default=None, help="experiment JSON file (loss settings are used)")
    p.add_argument("--seed", type=int, default=None, help="seed of the random check point (default 0)")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    p.add_argument("--alpha", dest="check_alpha", type=float, default=0.2, help="alpha of the checked objective")
    p.add_argument("--out", default="gradcheck.json", help="report path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _override(load_experiment(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except VersionMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
