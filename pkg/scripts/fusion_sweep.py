"""Compare every fusion strategy (and both sub-path scopes) on one trained
model per seed; writes a summary CSV.

Usage:
    python scripts/fusion_sweep.py [--seeds 0 1 2] [--out runs/fusion_sweep.csv]
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from normaug import datagen, experiments, inference
from normaug.inference import FusionStrategy, SubpathScope


def sweep(seeds: list[int], out: Path) -> None:
    accs: dict[tuple[str, str], list[float]] = {}
    for seed in seeds:
        dataset, target_domain = experiments.make_benchmark(seed, shift_kappa=2.0)
        _, target = datagen.split_lodo(dataset, target_domain)
        cell = experiments.run_variant(dataset, target_domain, "on_aug", seed)
        for scope in SubpathScope:
            for strategy in FusionStrategy:
                rep = inference.evaluate(cell.result.model, target.features,
                                         target.labels, strategy, scope)
                accs.setdefault((strategy.value, scope.value), []).append(
                    rep.fused_accuracy)
        print(f"seed {seed} done")

    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "scope", "mean_tgt_acc", "std_tgt_acc"])
        for (strategy, scope), vals in sorted(accs.items()):
            arr = np.asarray(vals)
            w.writerow([strategy, scope, repr(arr.mean()), repr(arr.std())])
    print(f"wrote {out}")
    for (strategy, scope), vals in sorted(accs.items(), key=lambda kv: -np.mean(kv[1])):
        print(f"  {strategy:>12} / {scope:<16} {np.mean(vals):.4f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/fusion_sweep.csv"))
    args = ap.parse_args()
    sweep(args.seeds, args.out)
