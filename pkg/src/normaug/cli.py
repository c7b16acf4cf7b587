"""Command-line entry point.

Subcommands: gen-data, train, eval, diagnose, ablate. Runs are driven by a
flat key=value config file (UTF-8, `#` comments); `--seed` overrides the
config seed. Output files are written with a `.partial` suffix and renamed
into place only when complete. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, diagnostics, experiments, inference, training
from .inference import FusionStrategy, SubpathScope
from .model import ModelConfig, init_model, load_checkpoint
from .training import TrainConfig


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file


GEN_KEYS = {"num_classes", "num_domains", "per_cell", "feature_dim", "separation",
            "shift_kappa", "noise_sigma", "seed"}
MODEL_KEYS = {"hidden_sizes", "use_on", "use_aug", "classifier_mode", "backbone",
              "bn_momentum", "bn_eps"}
TRAIN_KEYS = {"dataset", "target_domain", "epochs", "iters_per_epoch",
              "batch_per_domain", "lr_backbone", "lr_classifier", "momentum",
              "weight_decay", "seed", "combination_mode", "aux_weight",
              "lr_step_epochs", "lr_step_gamma", "val_fraction"}
EVAL_KEYS = {"checkpoint", "dataset", "target_domain", "strategy", "scope"}
DIAGNOSE_KEYS = {"checkpoint", "dataset", "target_domain", "probe_rows", "seed"}
ABLATE_KEYS = {"seeds", "shift_kappa"} | GEN_KEYS | MODEL_KEYS | (TRAIN_KEYS - {"dataset"})
KNOWN_KEYS = GEN_KEYS | MODEL_KEYS | TRAIN_KEYS | EVAL_KEYS | DIAGNOSE_KEYS | ABLATE_KEYS


def parse_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out: dict[str, str] = {}
    for ln, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise UsageError(f"{p}:{ln}: expected key=value, got {raw!r}")
        key, value = key.strip(), value.strip()
        if key not in KNOWN_KEYS:
            raise UsageError(f"{p}:{ln}: unknown config key {key!r}")
        out[key] = value
    return out


def _as_bool(cfg: dict, key: str, default: bool) -> bool:
    raw = cfg.get(key)
    if raw is None:
        return default
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")


def _as_int(cfg: dict, key: str, default: int) -> int:
    raw = cfg.get(key)
    try:
        return default if raw is None else int(raw)
    except ValueError:
        raise UsageError(f"config key {key}: expected an integer, got {raw!r}") from None


def _as_float(cfg: dict, key: str, default: float) -> float:
    raw = cfg.get(key)
    try:
        return default if raw is None else float(raw)
    except ValueError:
        raise UsageError(f"config key {key}: expected a number, got {raw!r}") from None


def train_config_from(cfg: dict, seed_override: int | None) -> TrainConfig:
    tc = TrainConfig(
        epochs=_as_int(cfg, "epochs", TrainConfig.epochs),
        iters_per_epoch=_as_int(cfg, "iters_per_epoch", TrainConfig.iters_per_epoch),
        batch_per_domain=_as_int(cfg, "batch_per_domain", TrainConfig.batch_per_domain),
        lr_backbone=_as_float(cfg, "lr_backbone", TrainConfig.lr_backbone),
        lr_classifier=_as_float(cfg, "lr_classifier", TrainConfig.lr_classifier),
        momentum=_as_float(cfg, "momentum", TrainConfig.momentum),
        weight_decay=_as_float(cfg, "weight_decay", TrainConfig.weight_decay),
        seed=_as_int(cfg, "seed", TrainConfig.seed),
        combination_mode=cfg.get("combination_mode", TrainConfig.combination_mode),
        aux_weight=_as_float(cfg, "aux_weight", TrainConfig.aux_weight),
        lr_step_epochs=_as_int(cfg, "lr_step_epochs", TrainConfig.lr_step_epochs),
        lr_step_gamma=_as_float(cfg, "lr_step_gamma", TrainConfig.lr_step_gamma),
        val_fraction=_as_float(cfg, "val_fraction", TrainConfig.val_fraction),
    )
    if seed_override is not None:
        tc.seed = seed_override
    try:
        tc.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return tc


def model_config_from(cfg: dict, dataset: datagen.Dataset, target_domain: int) -> ModelConfig:
    n_sources = int(np.unique(dataset.domain_ids).size) - 1
    hidden_raw = cfg.get("hidden_sizes")
    hidden = (tuple(int(h) for h in hidden_raw.split(",")) if hidden_raw
              else ModelConfig.hidden_sizes)
    mc = ModelConfig(
        input_dim=dataset.feature_dim,
        hidden_sizes=hidden,
        num_classes=dataset.num_classes,
        num_domains=n_sources,
        use_on=_as_bool(cfg, "use_on", True),
        use_aug=_as_bool(cfg, "use_aug", True),
        classifier_mode=cfg.get("classifier_mode", "independent"),
        backbone=cfg.get("backbone", "mlp"),
        bn_momentum=_as_float(cfg, "bn_momentum", 0.1),
        bn_eps=_as_float(cfg, "bn_eps", 1e-5),
    )
    try:
        mc.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return mc


def _require(cfg: dict, key: str) -> str:
    if key not in cfg:
        raise UsageError(f"config key {key!r} is required for this command")
    return cfg[key]


def _target_domain(cfg: dict, dataset: datagen.Dataset) -> int:
    return _as_int(cfg, "target_domain", dataset.num_domains - 1)


# ---------------------------------------------------------------------------
# artifacts


def _atomic_path(path: Path):
    return path.with_name(path.name + ".partial")


def _finalize(partial: Path, final: Path) -> None:
    os.replace(partial, final)


def _write_csv_atomic(path: Path, header: list[str], rows: list[list]) -> None:
    partial = _atomic_path(path)
    with open(partial, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    _finalize(partial, path)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out: Path, seed_override: int | None) -> None:
    seed = seed_override if seed_override is not None else _as_int(cfg, "seed", 0)
    ds, _ = datagen.generate(
        num_classes=_as_int(cfg, "num_classes", datagen.DEFAULT_CLASSES),
        num_domains=_as_int(cfg, "num_domains", datagen.DEFAULT_DOMAINS),
        per_cell=_as_int(cfg, "per_cell", datagen.DEFAULT_PER_CELL),
        feature_dim=_as_int(cfg, "feature_dim", datagen.DEFAULT_FEATURE_DIM),
        separation=_as_float(cfg, "separation", datagen.DEFAULT_SEPARATION),
        shift_kappa=_as_float(cfg, "shift_kappa", 2.0),
        noise_sigma=_as_float(cfg, "noise_sigma", datagen.DEFAULT_NOISE_SIGMA),
        seed=seed,
    )
    path = out / "dataset.csv"
    partial = _atomic_path(path)
    datagen.save(ds, partial)
    _finalize(partial, path)
    print(f"wrote {path} ({len(ds)} rows, {ds.num_domains} domains)")


def cmd_train(cfg: dict, out: Path, seed_override: int | None) -> None:
    dataset = datagen.load(_require(cfg, "dataset"))
    target = _target_domain(cfg, dataset)
    tc = train_config_from(cfg, seed_override)
    mc = model_config_from(cfg, dataset, target)
    model = init_model(mc, seed=tc.seed)
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "model.ckpt"
    result = training.train(model, dataset, target, tc,
                            metrics_path=_atomic_path(metrics_path),
                            checkpoint_path=_atomic_path(ckpt_path))
    _finalize(_atomic_path(metrics_path), metrics_path)
    _finalize(_atomic_path(ckpt_path), ckpt_path)
    final = result.final
    print(f"wrote {ckpt_path} and {metrics_path}; "
          f"final target accuracy main={final['tgt_acc_main']:.4f} "
          f"ensemble={final['tgt_acc_ensemble']:.4f}")


def cmd_eval(cfg: dict, out: Path, seed_override: int | None,
             strategy_override: str | None, scope_override: str | None) -> None:
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    dataset = datagen.load(_require(cfg, "dataset"))
    target = _target_domain(cfg, dataset)
    _, target_set = datagen.split_lodo(dataset, target)
    try:
        strategy = FusionStrategy.from_name(
            strategy_override or cfg.get("strategy", FusionStrategy.MEAN_MEAN_IM.value))
        scope = SubpathScope.from_name(
            scope_override or cfg.get("scope", SubpathScope.INDEPENDENT_ONLY.value))
    except ValueError as e:
        raise UsageError(str(e)) from None
    report = inference.evaluate(model, target_set.features, target_set.labels,
                                strategy, scope)
    rows = [[name, _fmt(acc)] for name, acc in sorted(report.per_path.items())]
    rows.append(["fused", _fmt(report.fused_accuracy)])
    path = out / "accuracy.csv"
    _write_csv_atomic(path, ["path_name", "accuracy"], rows)
    print(f"wrote {path}; fused accuracy {report.fused_accuracy:.4f} "
          f"({strategy.value}, {scope.value})")


def cmd_diagnose(cfg: dict, out: Path, seed_override: int | None) -> None:
    model, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    dataset = datagen.load(_require(cfg, "dataset"))
    target = _target_domain(cfg, dataset)
    sources, target_set = datagen.split_lodo(dataset, target)
    seed = seed_override if seed_override is not None else _as_int(cfg, "seed", 0)
    rng = np.random.default_rng(seed)

    by_domain = {int(d): sources.features[sources.domain_ids == d]
                 for d in np.unique(sources.domain_ids)}
    report = diagnostics.divergence(model, by_domain, target_set.features)

    rows = [["divergence", "d_s2s", _fmt(report.d_s2s)],
            ["divergence", "d_s2t", _fmt(report.d_s2t)]]

    probe_rows = _as_int(cfg, "probe_rows", 64)
    domains = sorted(by_domain)
    probe_domain = domains[0]
    probe = _draw_rows(by_domain[probe_domain], probe_rows, rng)
    companions: list[tuple[str, np.ndarray]] = [("probe_copy", probe.copy())]
    for d in domains[1:]:
        companions.append((f"domain_{d}", _draw_rows(by_domain[d], probe_rows, rng)))
    if len(domains) > 2:
        merged = np.concatenate([by_domain[d] for d in domains[1:]])
        companions.append(("other_sources", _draw_rows(merged, probe_rows, rng)))
    companions.append(("target", _draw_rows(target_set.features, probe_rows, rng)))
    for name, disp in diagnostics.perturbation_probe(model, probe, companions):
        rows.append(["probe", name, _fmt(disp)])

    path = out / "diagnostics.csv"
    _write_csv_atomic(path, ["metric", "name", "value"], rows)
    print(f"wrote {path}; d_s2s={report.d_s2s:.4f} d_s2t={report.d_s2t:.4f}")


def _draw_rows(features: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    count = min(count, features.shape[0])
    return features[rng.choice(features.shape[0], size=count, replace=False)]


def cmd_ablate(cfg: dict, out: Path, seed_override: int | None) -> None:
    seeds_raw = cfg.get("seeds", "0,1,2,3,4")
    try:
        seeds = [int(s) for s in seeds_raw.split(",")]
    except ValueError:
        raise UsageError(f"config key seeds: expected comma-separated ints, got {seeds_raw!r}") from None
    if seed_override is not None:
        seeds = [seed_override + i for i in range(len(seeds))]
    tc = train_config_from(cfg, None)
    gen_kwargs = {
        "num_classes": _as_int(cfg, "num_classes", datagen.DEFAULT_CLASSES),
        "num_domains": _as_int(cfg, "num_domains", datagen.DEFAULT_DOMAINS),
        "per_cell": _as_int(cfg, "per_cell", datagen.DEFAULT_PER_CELL),
        "feature_dim": _as_int(cfg, "feature_dim", datagen.DEFAULT_FEATURE_DIM),
    }
    rows_out = experiments.ablation_grid(
        seeds, shift_kappa=_as_float(cfg, "shift_kappa", 2.0), train_config=tc,
        generate_kwargs=gen_kwargs)
    path = out / "ablation.csv"
    _write_csv_atomic(path, ["variant", "mean_tgt_acc", "std_tgt_acc"],
                      [[r["variant"], _fmt(r["mean_tgt_acc"]), _fmt(r["std_tgt_acc"])]
                       for r in rows_out])
    summary = ", ".join(f"{r['variant']}={r['mean_tgt_acc']:.4f}" for r in rows_out)
    print(f"wrote {path}; {summary}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normaug",
        description="Normalization-guided augmentation experiments on synthetic "
                    "multi-domain data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-data", "generate a synthetic multi-domain dataset CSV"),
        ("train", "train a model and write checkpoint + per-epoch metrics"),
        ("eval", "evaluate a checkpoint on the held-out domain"),
        ("diagnose", "write divergence and perturbation-probe diagnostics"),
        ("ablate", "run the ON/AUG/EP ablation grid over a seed list"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "eval":
            p.add_argument("--strategy", default=None,
                           help="fusion strategy (" +
                                ", ".join(m.value for m in FusionStrategy) + ")")
            p.add_argument("--scope", default=None,
                           help="sub-path scope (independent_only, all_units)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out, args.seed)
        elif args.command == "train":
            cmd_train(cfg, out, args.seed)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.seed, args.strategy, args.scope)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, out, args.seed)
        elif args.command == "ablate":
            cmd_ablate(cfg, out, args.seed)
        else:  # pragma: no cover - argparse enforces the choice
            raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"normaug {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"normaug {args.command}: failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
