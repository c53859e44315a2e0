"""Seeded experiment runs: single variants, pairwise comparisons and reports.

Apart from the ``wall_ms`` field of ``runs.jsonl``, every result file is a
pure function of the configuration, so repeating a run reproduces it byte
for byte.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import TsDataset, load_dataset, znormalize
from .errors import ConfigurationError, DegenerateTableError
from .evaluation import (
    RunRecord,
    accuracy_improvement,
    chi_square_test,
    contingency_from_runs,
    significance_verdict,
)
from .model import Variant
from .training import run_seed


THREADS_ENV = "CSA_TS_THREADS"

# (model A, model B) for the two pairwise modes; AI is reported as A over B
COMPARE_PAIR = (Variant.CSA, Variant.BASELINE)
ABLATE_PAIR = (Variant.CSA, Variant.CSA_NOCD)


@dataclass
class ExperimentConfig:
    train: str = ""
    test: str = ""
    variant: str = "csa"
    epochs: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    fa: int = 64
    seeds: tuple = (0, 1, 2, 3, 4)
    znorm: bool = True
    attn_update: str = "latest"
    out: str = "results"
    filters: tuple = (128, 256, 128)

    def validate(self) -> "ExperimentConfig":
        if not self.train:
            raise ConfigurationError("a training file is required")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.fa < 1:
            raise ConfigurationError(f"attention width must be >= 1, got {self.fa}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"duplicate seeds in {list(self.seeds)}")
        if len(self.filters) != 3 or min(self.filters) < 1:
            raise ConfigurationError(f"filters must be three positive widths, got {list(self.filters)}")
        if self.attn_update not in ("latest", "ema"):
            raise ConfigurationError(f"unknown attention update policy {self.attn_update!r}")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigurationError(f"unknown variant {self.variant!r}") from None
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["filters"] = list(self.filters)
        return d


def _parse_int_list(text: str) -> tuple:
    try:
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise ConfigurationError(f"expected a list of integers, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


_FIELD_PARSERS = {
    "train": str,
    "test": str,
    "variant": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "fa": int,
    "seeds": _parse_int_list,
    "znorm": _parse_bool,
    "attn_update": str,
    "out": str,
    "filters": _parse_int_list,
}


def parse_config_text(text: str) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment, dashes in keys are allowed."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_PARSERS:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _FIELD_PARSERS[key](value)
        except ValueError as exc:
            raise ConfigurationError(f"config line {lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then ``overrides`` (``None`` values skipped)."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in values.items() if k in known}).validate()


# -- data ---------------------------------------------------------------------------


def load_split(config: ExperimentConfig) -> tuple:
    """``(train, test)`` with the test vocabulary pinned to the training one."""
    train = load_dataset(config.train)
    test = load_dataset(config.test, train.class_names) if config.test else None
    if config.znorm:
        train = znormalize(train)
        test = znormalize(test) if test is not None else None
    return train, test


# -- runs ---------------------------------------------------------------------------


def _run_job(args) -> tuple:
    variant, train, test, seed, config, ckpt_dir = args
    record, model = run_seed(
        variant, train, test, seed, config.epochs, config.batch_size, config.lr,
        config.fa, config.attn_update, config.filters,
    )
    if ckpt_dir is not None:
        model.save(Path(ckpt_dir) / f"{Variant(variant).value}-seed{seed}.npz", {"seed": seed})
    return record


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def run_variants(config: ExperimentConfig, variants: Sequence, train: TsDataset, test: TsDataset,
                 ckpt_dir=None) -> dict:
    """Train and test each variant for every seed; ``{variant: [RunRecord sorted by seed]}``."""
    if test is None:
        raise ConfigurationError("a test file is required to evaluate runs")
    jobs = [(Variant(v), train, test, s, config, ckpt_dir) for v in variants for s in config.seeds]
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_job, jobs))
    else:
        records = [_run_job(job) for job in jobs]
    out = {Variant(v).value: [] for v in variants}
    for r in records:
        out[r.variant].append(r)
    for runs in out.values():
        runs.sort(key=lambda r: r.seed)
    return out


def aggregate(runs: Sequence[RunRecord]) -> dict:
    accs = np.array([r.accuracy for r in runs])
    return {
        "dataset": runs[0].dataset,
        "variant": runs[0].variant,
        "epochs": runs[0].epochs,
        "seeds": [r.seed for r in runs],
        "n_runs": len(runs),
        "mean_accuracy": float(accs.mean()),
        "std_accuracy": float(accs.std()),
    }


def compare_runs(runs_a: Sequence[RunRecord], runs_b: Sequence[RunRecord]) -> dict:
    """AI of A over B on the mean accuracies, plus the pooled chi-square verdict."""
    acc_a = aggregate(runs_a)["mean_accuracy"]
    acc_b = aggregate(runs_b)["mean_accuracy"]
    table = contingency_from_runs(runs_a, runs_b)
    try:
        stat, p = chi_square_test(table)
    except DegenerateTableError:
        # an empty outcome column means both models got every instance right (or wrong)
        stat, p = 0.0, 1.0
    return {
        "dataset": runs_a[0].dataset,
        "model_a": runs_a[0].variant,
        "model_b": runs_b[0].variant,
        "acc_a": acc_a,
        "acc_b": acc_b,
        "ai_percent": accuracy_improvement(acc_a, acc_b),
        "contingency": [list(row) for row in table.counts],
        "chi2": stat,
        "p_value": p,
        "verdict": significance_verdict(p, acc_a, acc_b).value,
    }


def format_report(rows: Sequence[dict], label_b: str, label_a: str) -> str:
    """Plain-text table: dataset, accuracy without and with the change, AI, test outcome."""
    header = f"{'dataset':<24}{label_b:>10}{label_a:>10}{'AI(%)':>10}{'chi2':>10}{'p':>10}  verdict"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['dataset']:<24}{r['acc_b']:>10.3f}{r['acc_a']:>10.3f}{r['ai_percent']:>10.3f}"
            f"{r['chi2']:>10.3f}{r['p_value']:>10.4f}  {r['verdict']}"
        )
    return "\n".join(lines) + "\n"


# -- result files -----------------------------------------------------------------------


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_results(out_dir, config: ExperimentConfig, runs: dict, report: dict | None = None,
                  report_labels: tuple = ("w/o", "w")) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", config.to_dict())
    with open(out / "runs.jsonl", "w") as fh:
        for variant_runs in runs.values():
            for r in variant_runs:
                row = r.to_json()
                row.pop("labels")
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    _dump_json(out / "summary.json", [aggregate(v) for v in runs.values()])
    if report is not None:
        _dump_json(out / "report.json", [report])
        (out / "report.txt").write_text(format_report([report], *report_labels))
    return out


def run_experiment(config: ExperimentConfig, mode: str = "train") -> dict:
    """Run ``train`` (one variant), ``compare`` or ``ablate``; returns the in-memory results."""
    config.validate()
    pairs = {"compare": COMPARE_PAIR, "ablate": ABLATE_PAIR}
    if mode == "train":
        variants = (Variant(config.variant),)
    elif mode in pairs:
        variants = pairs[mode]
    else:
        raise ConfigurationError(f"unknown experiment mode {mode!r}")
    train, test = load_split(config)
    out = Path(config.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    runs = run_variants(config, variants, train, test, ckpt_dir)
    report = None
    labels = ("w/o", "w")
    if mode != "train":
        a, b = (v.value for v in variants)
        report = compare_runs(runs[a], runs[b])
        labels = ("w/o CSA", "w CSA") if mode == "compare" else ("w/o CD", "w CD")
    write_results(out, config, runs, report, labels)
    return {"runs": runs, "summary": [aggregate(v) for v in runs.values()], "report": report}
