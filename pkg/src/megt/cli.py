"""Command line interface.

Subcommands: synth (generate a bag corpus), train, eval, gradcheck, attend.
Exit codes: 0 success, 1 failed check, 2 usage/config/data problems,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import SynthSpec, generate_synthetic, load_manifest, write_bag
from .errors import (
    ConfigError,
    DataError,
    MegtError,
    NumericError,
    UndefinedMetricError,
)
from .gradcheck import SCOPES, run_gradcheck
from .metrics import auc_rank, confusion_metrics
from .model import (
    ModelConfig,
    build_model,
    fit,
    load_model,
    model_forward,
    parse_kv_text,
    predict_label,
    save_model,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _env_seed() -> int | None:
    raw = os.environ.get("MEGT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MEGT_SEED must be an integer, got {raw!r}") from None


def cmd_synth(args) -> int:
    kwargs = dict(task=args.task.replace("-", "_"), bags=args.bags)
    for key, value in (
        ("d", args.d), ("signal", args.signal), ("noise", args.noise),
        ("n_low_min", args.n_low_min), ("n_low_max", args.n_low_max),
        ("children_per_low", args.children_per_low),
    ):
        if value is not None:
            kwargs[key] = value
    seed = args.seed if args.seed is not None else _env_seed()
    kwargs["seed"] = 0 if seed is None else seed
    spec = SynthSpec(**kwargs)
    bags = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    n = len(bags)
    n_train = int(0.7 * n)
    n_val = int(0.1 * n)
    lines = [f"# task={spec.task} bags={n} seed={spec.seed} d={spec.d}"]
    counts = {"train": 0, "val": 0, "test": 0}
    for i, bag in enumerate(bags):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        counts[split] += 1
        fname = f"{bag.id}.megb"
        write_bag(bag, os.path.join(args.out, fname))
        lines.append(f"{fname}\t{bag.label}\t{split}")
    manifest = os.path.join(args.out, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {n} bags to {args.out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def _assemble_config(args, splits) -> ModelConfig:
    """Defaults, then config file, then --set pairs, then dedicated flags."""
    mapping: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            mapping.update(parse_kv_text(fh.read()))
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        mapping[key.strip()] = value.strip()
    for key, value in (
        ("lr", args.lr), ("max_epochs", args.max_epochs), ("patience", args.patience),
        ("arch", args.arch), ("resolution", args.resolution), ("seed", args.seed),
    ):
        if value is not None:
            mapping[key] = value
    if args.no_tpm:
        mapping["enable_tpm"] = False
    if args.no_gtl:
        mapping["enable_gtl"] = False
    if "seed" not in mapping:
        env = _env_seed()
        if env is not None:
            mapping["seed"] = env
    all_bags = [b for split in splits for b in split]
    if "d_in" not in mapping and all_bags:
        mapping["d_in"] = all_bags[0].low.cols
    if "n_classes" not in mapping and all_bags:
        mapping["n_classes"] = max(2, max(b.label for b in all_bags) + 1)
    return ModelConfig.from_mapping(mapping)


def _evaluate(model, bags) -> dict:
    preds = []
    labels = []
    scores = []
    for bag in bags:
        pred, row = predict_label(model, bag)
        preds.append(pred)
        labels.append(bag.label)
        if model.config.n_classes == 2:
            scores.append(float(row[1]))
    result = confusion_metrics(preds, labels, model.config.n_classes)
    auc = None
    if model.config.n_classes == 2:
        try:
            auc = auc_rank(scores, labels)
        except UndefinedMetricError:
            auc = None
    return {
        "accuracy": result.accuracy,
        "recall_macro": result.recall_macro,
        "f1_macro": result.f1_macro,
        "auc": auc,
        "n": len(bags),
    }


def cmd_train(args) -> int:
    splits = load_manifest(args.data)
    config = _assemble_config(args, splits)
    train, val, _ = splits
    model = build_model(config)
    model, history = fit(model, train, val, config)
    save_model(model, args.out)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            json.dump(history, fh, indent=2)
            fh.write("\n")
    summary = {
        "epochs": len(history),
        "best_val_loss": min(h["val_loss"] for h in history),
        "val": _evaluate(model, val),
        "checkpoint": args.out,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _pick_split(splits, name: str):
    by_name = dict(zip(("train", "val", "test"), splits))
    if name not in by_name:
        raise ConfigError(f"unknown split {name!r}")
    bags = by_name[name]
    if not bags:
        raise ConfigError(f"split {name!r} is empty")
    return bags


def cmd_eval(args) -> int:
    model = load_model(args.model)
    bags = _pick_split(load_manifest(args.data), args.split)
    text = json.dumps(_evaluate(model, bags), indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    results, total, passed = run_gradcheck(args.scope, seed, args.corrupt_grad)
    for r in results:
        status = "ok" if r.ok else f"FAIL at {r.worst_param}{r.worst_coord}"
        print(f"{r.scope:10s} {r.name:16s} {r.coords:3d} coords  "
              f"worst rel err {r.worst:.3e}  {status}")
    if passed:
        print(f"gradcheck PASS: {total} coordinates within tolerance")
        return EXIT_OK
    bad = [r for r in results if not r.ok]
    print(f"gradcheck FAIL: {', '.join(f'{r.worst_param} in {r.scope}/{r.name}' for r in bad)}")
    return EXIT_CHECK_FAILED


def cmd_attend(args) -> int:
    model = load_model(args.model)
    if model.config.arch != "megt":
        raise ConfigError("attend requires a dual-branch checkpoint")
    bags = _pick_split(load_manifest(args.data), args.split)
    if not 0 <= args.index < len(bags):
        raise ConfigError(f"--index {args.index} outside split of {len(bags)} bags")
    bag = bags[args.index]
    _, _, trace = model_forward(model, bag)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for i, block in enumerate(trace.blocks):
        for direction, row, opposite in (
            ("low", block.low_row, "high"),
            ("high", block.high_row, "low"),
        ):
            w = row.data[0]
            span = w.max() - w.min()
            norm = (w - w.min()) / span if span > 0 else w * 0.0
            path = os.path.join(args.out, f"attend_block{i}_{direction}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("token_index,resolution,raw_weight,minmax_normalized_weight\n")
                for j in range(len(w)):
                    res = direction if j == 0 else opposite
                    fh.write(f"{j},{res},{float(w[j])!r},{float(norm[j])!r}\n")
            written.append(path)
    print(f"wrote {len(written)} attention maps for bag {bag.id!r} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="megt",
        description="Dual-resolution bag classification with efficient graph-transformers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bag corpus with a manifest")
    p.add_argument("--task", choices=["witness", "cross-scale"], required=True)
    p.add_argument("--bags", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--signal", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-low-min", type=int)
    p.add_argument("--n-low-max", type=int)
    p.add_argument("--children-per-low", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--arch", choices=["megt", "egt", "mean_pool"])
    p.add_argument("--resolution", choices=["low", "high", "both"])
    p.add_argument("--seed", type=int)
    p.add_argument("--no-tpm", action="store_true", help="disable token pruning")
    p.add_argument("--no-gtl", action="store_true", help="disable the graph layer")
    p.add_argument("--history", help="write per-epoch losses as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients with finite differences")
    p.add_argument("--scope", default="all", choices=list(SCOPES))
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt-grad", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attend", help="export fusion-block attention maps as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MegtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
