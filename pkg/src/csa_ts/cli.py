"""``csa-ts`` command-line interface.

Exit codes: 0 on success, 1 on runtime errors (bad data, failed runs),
2 on usage errors (bad flags or configuration).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import load_dataset, make_example1, save_dataset, train_test_split, znormalize
from .errors import ConfigurationError, CsaError
from .evaluation import accuracy, export_feature_matrices, nn1_dtw_classify, write_feature_csvs
from .experiment import load_config, run_experiment
from .model import FcnModel, Variant

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed_list(text: str) -> tuple:
    try:
        seeds = tuple(int(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _add_experiment_flags(p: argparse.ArgumentParser, with_variant: bool) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--train", help="training split (.ts or .csv)")
    p.add_argument("--test", help="test split (.ts or .csv)")
    if with_variant:
        p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--fa", type=int, help="key/query width")
    p.add_argument("--seeds", type=_seed_list, help="e.g. 0,1,2,3,4")
    p.add_argument("--no-znorm", action="store_const", const=False, dest="znorm",
                   help="skip per-instance z-normalisation")
    p.add_argument("--attn-update", choices=["latest", "ema"], dest="attn_update")
    p.add_argument("--filters", type=_seed_list, help="three conv widths, e.g. 128,256,128")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csa-ts", description="FCN time-series classifiers with class-specific attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train and test one variant over several seeds")
    _add_experiment_flags(p, with_variant=True)
    p = sub.add_parser("compare", help="CSA against the plain FCN baseline")
    _add_experiment_flags(p, with_variant=False)
    p = sub.add_parser("ablate", help="CSA against CSA without class differentiation")
    _add_experiment_flags(p, with_variant=False)

    p = sub.add_parser("eval", help="label-free prediction with saved checkpoints")
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--test", required=True)
    p.add_argument("--no-znorm", action="store_false", dest="znorm")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-features", help="write time-pooled features before and after CSA")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split whose instances are exported")
    p.add_argument("--with-labels", action="store_true",
                   help="use each batch's own class attention instead of the stored one")
    p.add_argument("--no-znorm", action="store_false", dest="znorm")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-synthetic", help="write the three-class up/flat/down toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.3)

    p = sub.add_parser("nn-dtw", help="1-NN classifier under dependent DTW")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--no-znorm", action="store_false", dest="znorm")
    p.add_argument("--out", required=True)
    return parser


def _experiment(args, mode: str) -> int:
    keys = ("train", "test", "epochs", "batch_size", "lr", "fa", "seeds", "znorm",
            "attn_update", "filters", "out")
    overrides = {k: getattr(args, k) for k in keys}
    overrides["variant"] = getattr(args, "variant", None)
    config = load_config(args.config, overrides)
    if not config.test:
        raise ConfigurationError("a test file is required (--test or test = ... in the config)")
    result = run_experiment(config, mode)
    for row in result["summary"]:
        print(f"{row['dataset']} {row['variant']}: mean accuracy {row['mean_accuracy']:.4f} "
              f"over {row['n_runs']} seeds")
    if result["report"] is not None:
        r = result["report"]
        print(f"AI {r['ai_percent']:.3f}%  chi2 {r['chi2']:.3f}  p {r['p_value']:.4f}  {r['verdict']}")
    print(f"results written to {config.out}")
    return EXIT_OK


def _eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ckpt in args.checkpoint:
        model = FcnModel.load(ckpt)
        test = load_dataset(args.test, model.config.class_names)
        if args.znorm:
            test = znormalize(test)
        preds = model.predict(test.x)
        rows.append({
            "checkpoint": str(ckpt),
            "variant": model.variant.value,
            "dataset": test.name,
            "accuracy": accuracy(preds, test.labels),
            "predictions": [int(p) for p in preds],
        })
        print(f"{ckpt}: accuracy {rows[-1]['accuracy']:.4f}")
    with open(out / "eval.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return EXIT_OK


def _export(args) -> int:
    model = FcnModel.load(args.checkpoint)
    ds = load_dataset(args.data, model.config.class_names)
    if args.znorm:
        ds = znormalize(ds)
    labels = ds.labels if args.with_labels else None
    p_l, p_o = export_feature_matrices(model, ds.x, labels)
    paths = write_feature_csvs(args.out, p_l, p_o, ds.labels, model.config.class_names)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _gen_synthetic(args) -> int:
    if args.length < 4 or args.n_per_class < 1 or args.noise < 0 or not 0 < args.test_fraction < 1:
        raise ConfigurationError("need --length >= 4, --n-per-class >= 1, --noise >= 0, 0 < --test-fraction < 1")
    ds = make_example1(args.n_per_class, args.length, args.noise, args.seed)
    train, test = train_test_split(ds, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "Example1_TRAIN.ts")
    save_dataset(test, out / "Example1_TEST.ts")
    print(f"wrote {train.n_instances} training and {test.n_instances} test series to {out}")
    return EXIT_OK


def _nn_dtw(args) -> int:
    train = load_dataset(args.train)
    test = load_dataset(args.test, train.class_names)
    if args.znorm:
        train, test = znormalize(train), znormalize(test)
    preds = nn1_dtw_classify(train.x, train.labels, test.x)
    acc = accuracy(preds, test.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = {"dataset": train.name, "variant": "nn-dtw", "accuracy": acc, "predictions": [int(p) for p in preds]}
    (out / "nn_dtw.json").write_text(json.dumps(row, sort_keys=True) + "\n")
    print(f"{train.name} 1-NN DTW accuracy {acc:.4f}")
    return EXIT_OK


COMMANDS = {
    "train": lambda a: _experiment(a, "train"),
    "compare": lambda a: _experiment(a, "compare"),
    "ablate": lambda a: _experiment(a, "ablate"),
    "eval": _eval,
    "export-features": _export,
    "gen-synthetic": _gen_synthetic,
    "nn-dtw": _nn_dtw,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"csa-ts: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CsaError, OSError, ValueError, KeyError) as exc:
        print(f"csa-ts: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
