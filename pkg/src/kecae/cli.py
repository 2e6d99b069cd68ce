"""Command-line entry point: the full pipeline as subcommands.

Every experiment is one invocation writing into its own output directory,
with the effective configuration echoed alongside the results. Settings come
from a flat key=value config file overlaid by explicit flags; unknown config
keys are rejected. Exit codes: 0 success, 1 usage/config error, 2 data
error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import datakit, evalkit
from .datakit import KL0, KL2, label_index
from .diffcore import gradcheck_suite
from .errors import ConfigError, DataError, DivergenceError, PgmParseError
from .lossfns import LossWeights
from .netlib import ArchConfig
from .rng import derive_seed
from .trainer import (
    TrainConfig,
    load_checkpoint,
    train,
    train_data_from_split,
    generate,
)

# key -> (default, help); the single source of documented defaults
CONFIG_KEYS: dict[str, tuple[str, str]] = {
    "preset": ("desk", "architecture preset: desk | paper"),
    "side": ("64", "synthetic image side in pixels"),
    "n_kl0": ("572", "class-0 pool size for gen-data"),
    "n_kl2": ("572", "class-2 pool size for gen-data"),
    "noise_sigma": ("0.02", "additive pixel noise of the generator"),
    "epochs": ("50", "training epochs"),
    "batch_size": ("30", "pairs per training batch"),
    "lr_gen": ("0.0001", "encoder/decoder Adam learning rate"),
    "lr_disc": ("1e-05", "discriminator Adam learning rate"),
    "lambda1": ("0.01", "weight of the exchanged-output CE term"),
    "lambda2": ("0.001", "weight of the latent separation term"),
    "seed": ("0", "master 64-bit seed"),
    "checkpoint_every": ("0", "extra checkpoint every N steps (0 = final only)"),
    "pair_sample_n": ("2000", "pairs drawn from the global-permutation index"),
    "lda_eps": ("1e-08", "denominator epsilon of the separation loss"),
    "augment": ("1", "augment discriminator training inputs (0/1)"),
    "budget_epochs": ("10", "per-cell epochs for grid / sizes"),
    "aug_pairs": ("400", "pairs synthesized for augmentation variants"),
    "classifier_epochs": ("8", "epochs for downstream classifiers"),
    "seeds": ("0,1,2", "seed replicates for evalkit protocols"),
    "n_list": ("500,1000,2000", "sample sizes for the sizes study"),
}


def load_run_config(path: str | None) -> dict[str, str]:
    cfg = {key: default for key, (default, _) in CONFIG_KEYS.items()}
    if path is None:
        return cfg
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in cfg:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        cfg[key] = value
    return cfg


def effective_config_text(cfg: dict[str, str]) -> str:
    return "".join(f"{key} = {cfg[key]}\n" for key in CONFIG_KEYS)


def _train_config(cfg: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        arch=ArchConfig.from_preset(cfg["preset"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr_gen=float(cfg["lr_gen"]),
        lr_disc=float(cfg["lr_disc"]),
        weights=LossWeights(float(cfg["lambda1"]), float(cfg["lambda2"])),
        seed=int(cfg["seed"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
        pair_sample_n=int(cfg["pair_sample_n"]),
        lda_eps=float(cfg["lda_eps"]),
        augment=cfg["augment"] == "1",
    )


def _overlay(cfg: dict[str, str], args: argparse.Namespace) -> dict[str, str]:
    """Explicit CLI flags win over the config file."""
    for flag, key in (
        ("seed", "seed"),
        ("preset", "preset"),
        ("epochs", "epochs"),
        ("lambda1", "lambda1"),
        ("lambda2", "lambda2"),
        ("side", "side"),
        ("budget_epochs", "budget_epochs"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = str(value)
    return cfg


def _echo_config(out_dir: Path, cfg: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(effective_config_text(cfg))


def _seeds(cfg: dict[str, str]) -> tuple[int, ...]:
    return tuple(int(s) for s in cfg["seeds"].split(",") if s.strip())


def _load_train(cfg, args):
    split = datakit.load_split(args.data, "train")
    pairs = datakit.read_pairs_csv(args.pairs)
    return split, train_data_from_split(split, pairs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out)
    n0 = args.n if args.n is not None else int(cfg["n_kl0"])
    n2 = args.n if args.n is not None else int(cfg["n_kl2"])
    pool = datakit.build_pool(
        n0, n2, int(cfg["side"]), int(cfg["seed"]), float(cfg["noise_sigma"])
    )
    datakit.write_pool(out, pool)
    _echo_config(out, cfg)
    print(f"wrote {n0}+{n2} images to {out}")
    return 0


def cmd_split(args, cfg) -> int:
    pool = datakit.read_pool(args.pool)
    ids_by_class = {
        KL0: [i.image_id for i in pool if i.kl_grade == KL0],
        KL2: [i.image_id for i in pool if i.kl_grade == KL2],
    }
    splits = datakit.split_oversample(ids_by_class, int(cfg["seed"]))
    datakit.write_dataset(args.out, splits, {i.image_id: i for i in pool})
    _echo_config(Path(args.out), cfg)
    for name in ("train", "val", "test"):
        print(f"{name}: {len(splits[name])} records")
    return 0


def cmd_pairs(args, cfg) -> int:
    split = datakit.load_split(args.data, "train")
    index = datakit.make_pairs(split.unique_ids(KL0), split.unique_ids(KL2))
    n = args.n if args.n is not None else int(cfg["pair_sample_n"])
    try:
        pairs = datakit.sample_pairs(index, n, int(cfg["seed"]))
    except ValueError as err:
        raise DataError(str(err)) from None
    datakit.write_pairs_csv(args.out, pairs)
    print(f"sampled {n} of {len(index)} pairs -> {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    _, data = _load_train(cfg, args)
    config = _train_config(cfg)
    out = Path(args.out)
    _echo_config(out, cfg)
    result = train(config, data, out, resume_from=args.resume)
    final = result.epoch_reports[-1] if result.epoch_reports else None
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_dir}")
    if final:
        print(f"final epoch losses: mse={final.j_mse:.6g} total={final.j_total:.6g}")
    return 0


def cmd_generate(args, cfg) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    split = datakit.load_split(args.data, "train")
    pairs = datakit.read_pairs_csv(args.pairs)
    if args.n is not None:
        pairs = pairs[: args.n]
    grades = {i: g for i, g in split.records}
    outputs = generate(model, pairs, split.images, grades)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["filename,kind,class,source_id,partner_id"]
    for idx, g in enumerate(outputs):
        fname = f"{g.kind}_{idx:06d}.pgm"
        datakit.write_pgm(out / fname, g.pixels)
        rows.append(f"{fname},{g.kind},{g.kl_grade},{g.source_id},{g.partner_id}")
    (out / "labels.csv").write_text("\n".join(rows) + "\n")
    _echo_config(out, cfg)
    print(f"wrote {len(outputs)} images ({len(pairs)} pairs) to {out}")
    return 0


def cmd_probe(args, cfg) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    train_split = datakit.load_split(args.data, "train")
    val_split = datakit.load_split(args.data, "val")
    train_ids = train_split.unique_ids(KL0) + train_split.unique_ids(KL2)
    val_ids = val_split.unique_ids(KL0) + val_split.unique_ids(KL2)
    tr_grades = dict(train_split.records)
    va_grades = dict(val_split.records)
    acc = evalkit.probe_latents(
        model,
        train_ids,
        [tr_grades[i] for i in train_ids],
        val_ids,
        [va_grades[i] for i in val_ids],
        {**train_split.images, **val_split.images},
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.csv").write_text(
        "latent,acc\nhK,{hK}\nhU,{hU}\n".format(**acc)
    )
    _echo_config(out, cfg)
    print(f"probe accuracy hK={acc['hK']:.4f} hU={acc['hU']:.4f}")
    return 0


def cmd_grid(args, cfg) -> int:
    _, data = _load_train(cfg, args)
    val_split = datakit.load_split(args.data, "val")
    val_ids = val_split.unique_ids(KL0) + val_split.unique_ids(KL2)
    va_grades = dict(val_split.records)
    out = Path(args.out)
    _echo_config(out, cfg)
    results = evalkit.grid_search(
        _train_config(cfg),
        data,
        val_ids,
        [va_grades[i] for i in val_ids],
        val_split.images,
        out / "cells",
        budget_epochs=int(cfg["budget_epochs"]),
    )
    evalkit.write_grid_csv(out / "grid.csv", results)
    best = next(r for r in results if r.best)
    print(
        f"best cell: lambda1={best.lambda1:g} lambda2={best.lambda2:g} "
        f"acc_hK={best.acc_hK:.4f}"
    )
    return 0


def cmd_sizes(args, cfg) -> int:
    split = datakit.load_split(args.data, "train")
    val_split = datakit.load_split(args.data, "val")
    index = datakit.make_pairs(split.unique_ids(KL0), split.unique_ids(KL2))
    val_ids = val_split.unique_ids(KL0) + val_split.unique_ids(KL2)
    va_grades = dict(val_split.records)
    grades = dict(split.records)
    n_list = [int(v) for v in cfg["n_list"].split(",") if v.strip()]
    out = Path(args.out)
    _echo_config(out, cfg)
    results = evalkit.sample_size_study(
        _train_config(cfg),
        split.images,
        grades,
        index,
        val_ids,
        [va_grades[i] for i in val_ids],
        val_split.images,
        n_list,
        out / "runs",
        seeds=_seeds(cfg),
        budget_epochs=int(cfg["budget_epochs"]),
    )
    evalkit.write_sizes_csv(out / "sizes.csv", results)
    for r in results:
        print(f"N={r.n}: final_loss={r.final_loss:.6g} acc={r.acc:.4f}")
    return 0


def cmd_augeval(args, cfg) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    train_split = datakit.load_split(args.data, "train")
    test_split = datakit.load_split(args.data, "test")
    grades = dict(train_split.records)
    train_items = [
        (train_split.images[i], label_index(g)) for i, g in train_split.records
    ]
    index = datakit.make_pairs(
        train_split.unique_ids(KL0), train_split.unique_ids(KL2)
    )
    n_aug = min(int(cfg["aug_pairs"]), len(index))
    pairs = datakit.sample_pairs(index, n_aug, derive_seed(int(cfg["seed"]), 0xA0))
    test_images = np.stack([test_split.images[i] for i, _ in test_split.records])
    test_labels = np.array([label_index(g) for _, g in test_split.records])
    out = Path(args.out)
    _echo_config(out, cfg)
    results = evalkit.augmentation_eval(
        model,
        train_items,
        pairs,
        train_split.images,
        grades,
        test_images,
        test_labels,
        seeds=_seeds(cfg),
        epochs=int(cfg["classifier_epochs"]),
    )
    evalkit.write_augment_csv(out / "augment.csv", results)
    base = evalkit.mean_accuracy(results, "siamese_gap", "x")
    for input_set in evalkit.INPUT_SETS:
        acc = evalkit.mean_accuracy(results, "siamese_gap", input_set)
        print(f"{input_set:14s} acc={acc:.4f} diff={acc - base:+.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    worst = 0.0
    for name, err in gradcheck_suite():
        print(f"{name:22s} max-rel-err {err:.3e}")
        worst = max(worst, err)
    if worst >= 1e-4:
        print(f"FAIL: worst error {worst:.3e} >= 1e-4", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(sub, config=True, seed=True, out=True):
    if config:
        sub.add_argument("--config", help="flat key=value config file")
    if seed:
        sub.add_argument("--seed", type=int, default=None, help="master 64-bit seed")
    if out:
        sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="kecae",
        description="key-exchange auto-encoder: data synthesis, training and evaluation",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = subs.add_parser("gen-data", help="generate the synthetic image pool", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--n", type=int, default=None, help="images per class (overrides n_kl0/n_kl2)")
    s.add_argument("--side", type=int, default=None, help="image side in pixels")
    s.set_defaults(fn=cmd_gen_data)

    s = subs.add_parser("split", help="balance classes and partition 7:1:2", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--pool", required=True, help="pool directory from gen-data")
    s.set_defaults(fn=cmd_split)

    s = subs.add_parser("pairs", help="sample training pairs from the global permutation", formatter_class=fmt)
    s.add_argument("--config", help="flat key=value config file")
    s.add_argument("--seed", type=int, default=None, help="master 64-bit seed")
    s.add_argument("--data", required=True, help="dataset root from split")
    s.add_argument("--n", type=int, default=None, help="number of pairs to sample")
    s.add_argument("--out", default="pairs.csv", help="output CSV path")
    s.set_defaults(fn=cmd_pairs)

    s = subs.add_parser("train", help="run the full training loop", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--pairs", required=True, help="pair CSV from the pairs subcommand")
    s.add_argument("--preset", choices=("desk", "paper"), default=None, help="architecture preset")
    s.add_argument("--epochs", type=int, default=None, help="training epochs")
    s.add_argument("--lambda1", type=float, default=None, help="exchanged-output CE weight")
    s.add_argument("--lambda2", type=float, default=None, help="latent separation weight")
    s.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    s.set_defaults(fn=cmd_train)

    s = subs.add_parser("generate", help="synthesize reconstructions and exchanged images", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--pairs", required=True, help="pair CSV")
    s.add_argument("--n", type=int, default=None, help="limit to the first N pairs")
    s.set_defaults(fn=cmd_generate)

    s = subs.add_parser("probe", help="SVM probe accuracy on the two latent vectors", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    s.add_argument("--data", required=True, help="dataset root")
    s.set_defaults(fn=cmd_probe)

    s = subs.add_parser("grid", help="grid-search the two loss weights", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--pairs", required=True, help="pair CSV")
    s.add_argument("--budget-epochs", dest="budget_epochs", type=int, default=None,
                   help="training epochs per grid cell")
    s.set_defaults(fn=cmd_grid)

    s = subs.add_parser("sizes", help="study the effect of the pair-sample size", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--budget-epochs", dest="budget_epochs", type=int, default=None,
                   help="training epochs per run")
    s.set_defaults(fn=cmd_sizes)

    s = subs.add_parser("augeval", help="classifier accuracy across augmentation variants", formatter_class=fmt)
    _add_common(s)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    s.add_argument("--data", required=True, help="dataset root")
    s.set_defaults(fn=cmd_augeval)

    s = subs.add_parser("gradcheck", help="finite-difference check of every layer primitive", formatter_class=fmt)
    s.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(getattr(args, "config", None))
        cfg = _overlay(cfg, args)
        return args.fn(args, cfg)
    except SystemExit as exc:  # argparse --help (0) and usage errors (1)
        return int(exc.code or 0)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (DataError, PgmParseError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
