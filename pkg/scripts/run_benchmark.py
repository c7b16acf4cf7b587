"""End-to-end benchmark run: generate data, train the full model, evaluate
every route, write diagnostics.

Usage:
    python scripts/run_benchmark.py [--seed 0] [--out runs/benchmark]
"""

import argparse
from pathlib import Path

from normaug.cli import main as cli


def run(seed: int, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    gen_cfg = out / "gen.txt"
    gen_cfg.write_text(f"shift_kappa = 2.0\nseed = {seed}\n")
    assert cli(["gen-data", "--config", str(gen_cfg), "--out", str(out)]) == 0

    train_cfg = out / "train.txt"
    train_cfg.write_text(
        f"dataset = {out / 'dataset.csv'}\n"
        f"seed = {seed}\n"
    )
    assert cli(["train", "--config", str(train_cfg), "--out", str(out)]) == 0

    eval_cfg = out / "eval.txt"
    eval_cfg.write_text(
        f"checkpoint = {out / 'model.ckpt'}\n"
        f"dataset = {out / 'dataset.csv'}\n"
    )
    assert cli(["eval", "--config", str(eval_cfg), "--out", str(out)]) == 0
    assert cli(["diagnose", "--config", str(eval_cfg), "--out", str(out),
                "--seed", str(seed)]) == 0
    print(f"artifacts in {out}/: dataset.csv, model.ckpt, metrics.csv, "
          f"accuracy.csv, diagnostics.csv")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    args = ap.parse_args()
    run(args.seed, args.out)
