"""Look at how domain information fades with depth after PoER training.

For every block this prints the ranking-order violation rate on the
validation split and a nearest-class-mean probe that tries to recover the
domain label (chance is 1/3 with three source domains). It also writes
2-D principal projections of the first and last blocks to CSV for plotting.

Run: python3 demos/03_progressive_filtering.py [out_dir]
"""

import sys
from pathlib import Path

from poer import DatasetSpec, TrainConfig, generate, leave_one_domain_out, rank_violation_audit, train
from poer.trainer import export_embeddings, initial_checkpoint, nearest_mean_probe, write_embeddings_csv


def main(out_dir: str = "embeddings"):
    splits = leave_one_domain_out(generate(DatasetSpec(seed=0)), 3, 0.1, 0)
    config = TrainConfig(seed=0)
    ckpt, report = train(config, splits)
    init = initial_checkpoint(config, splits)
    print(f"target accuracy {report.target_mean:.3f}\n")

    tr, va = ckpt.features(splits.train.x), ckpt.features(splits.val.x)
    print("block  audit@init  audit@trained  domain probe")
    for b in range(config.extractor.n_blocks):
        probe = nearest_mean_probe(tr[b], splits.train.d, va[b], splits.val.d)
        print(f"{b:5d}  {rank_violation_audit(init, splits.val, b):10.4f}  "
              f"{rank_violation_audit(ckpt, splits.val, b):13.4f}  {probe:12.3f}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in (0, config.extractor.n_blocks - 1):
        path = out / f"block{b}.csv"
        write_embeddings_csv(export_embeddings(ckpt, splits.val, b), path)
        print(f"wrote {path}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
