"""Loading, preprocessing and batching of labelled time-series collections.

Supported inputs are the UEA/UCR ``.ts`` format (equal-length series only)
and a flat CSV layout ``label,v0_t0,...,v0_t{T-1},v1_t0,...``.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import EmptyEpochError, LabelError, TsFormatError, UnequalLengthError, VocabularyError


@dataclass(frozen=True)
class TsDataset:
    x: np.ndarray  # (N, V, T)
    labels: np.ndarray  # int (N,)
    class_names: tuple
    name: str = ""

    def __post_init__(self):
        if self.x.ndim != 3:
            raise ValueError(f"x must be (N, V, T), got shape {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise ValueError(f"labels shape {self.labels.shape} does not match N={self.x.shape[0]}")
        c = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise LabelError(f"labels must lie in [0, {c})")

    @property
    def n_instances(self) -> int:
        return self.x.shape[0]

    @property
    def n_vars(self) -> int:
        return self.x.shape[1]

    @property
    def n_steps(self) -> int:
        return self.x.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "TsDataset":
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], labels=self.labels[idx])


def check_training_split(ds: TsDataset) -> None:
    """Every class must occur at least once in a training split."""
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    missing = [ds.class_names[i] for i in np.flatnonzero(counts == 0)]
    if missing:
        raise VocabularyError(f"classes never seen in training split {ds.name!r}: {missing}")


# -- .ts format ---------------------------------------------------------------------

_TRUE = {"true"}


def _impute(values: list, lineno: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    missing = np.isnan(arr)
    if missing.all():
        raise TsFormatError("series has no observed values", lineno)
    if missing.any():
        arr[missing] = arr[~missing].mean()
    return arr


def _parse_value(tok: str, lineno: int) -> float:
    tok = tok.strip()
    if tok in ("?", "") or tok.lower() == "nan":
        return math.nan
    try:
        return float(tok)
    except ValueError:
        raise TsFormatError(f"bad value {tok!r}", lineno) from None


def parse_ts(text: str, class_names: Optional[Sequence[str]] = None, name: str = "") -> TsDataset:
    """Parse the contents of a ``.ts`` file.

    ``class_names`` overrides the declared vocabulary, which keeps label
    indices aligned between a TRAIN and a TEST file.  Missing values (``?``
    or ``NaN``) are replaced by the mean of the observed values of the same
    variable in the same instance.
    """
    header: dict = {}
    declared: Optional[list] = None
    rows, raw_labels = [], []
    in_data = False
    n_dims = None
    length = None
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if not line.startswith("@"):
                raise TsFormatError(f"expected a header directive, got {line[:40]!r}", lineno)
            key, _, rest = line[1:].partition(" ")
            key = key.lower()
            rest = rest.strip()
            if key == "data":
                in_data = True
                continue
            if key == "classlabel":
                parts = rest.split()
                if not parts or parts[0].lower() not in ("true", "false"):
                    raise TsFormatError("@classLabel must be followed by true/false", lineno)
                if parts[0].lower() in _TRUE:
                    if len(parts) < 2:
                        raise TsFormatError("@classLabel true needs a vocabulary", lineno)
                    declared = parts[1:]
                else:
                    raise TsFormatError("unlabelled files are not supported", lineno)
            elif key in ("equallength", "univariate", "timestamps", "missing", "targetlabel"):
                header[key] = rest.lower()
            else:
                header[key] = rest
            if key == "timestamps" and rest.lower() in _TRUE:
                raise TsFormatError("timestamped series are not supported", lineno)
            if key == "equallength" and rest.lower() not in _TRUE:
                raise UnequalLengthError("unequal-length datasets are not supported", lineno)
            continue
        fields = line.split(":")
        if len(fields) < 2:
            raise TsFormatError("data line needs at least one dimension and a label", lineno)
        dims = fields[:-1]
        if n_dims is None:
            n_dims = len(dims)
            if header.get("univariate") == "true" and n_dims != 1:
                raise TsFormatError(f"univariate file has {n_dims} dimensions", lineno)
            if "dimensions" in header and int(header["dimensions"]) != n_dims:
                raise TsFormatError(f"declared {header['dimensions']} dimensions, found {n_dims}", lineno)
        elif len(dims) != n_dims:
            raise TsFormatError(f"expected {n_dims} dimensions, found {len(dims)}", lineno)
        series = []
        for d in dims:
            values = [_parse_value(tok, lineno) for tok in d.split(",")]
            if length is None:
                length = len(values)
                if "serieslength" in header and int(header["serieslength"]) != length:
                    raise UnequalLengthError(f"declared length {header['serieslength']}, found {length}", lineno)
            elif len(values) != length:
                raise UnequalLengthError(f"series length {len(values)} differs from {length}", lineno)
            series.append(_impute(values, lineno))
        label = fields[-1].strip()
        if declared is not None and label not in declared:
            raise VocabularyError(f"label {label!r} not in declared classes {declared}", lineno)
        rows.append(series)
        raw_labels.append(label)
    if not in_data:
        raise TsFormatError("missing @data section")
    if declared is None:
        raise TsFormatError("missing @classLabel declaration")
    vocab = tuple(sorted(class_names if class_names is not None else set(declared)))
    index = {c: i for i, c in enumerate(vocab)}
    for i, lab in enumerate(raw_labels):
        if lab not in index:
            raise VocabularyError(f"label {lab!r} of instance {i} not in vocabulary {list(vocab)}")
    x = np.array(rows, dtype=np.float64) if rows else np.zeros((0, n_dims or 1, length or 0))
    labels = np.array([index[l] for l in raw_labels], dtype=np.int64)
    return TsDataset(x=x, labels=labels, class_names=vocab, name=name or header.get("problemname", ""))


def format_ts(ds: TsDataset) -> str:
    """Serialise to ``.ts`` text; ``repr`` floats make the round trip exact."""
    out = io.StringIO()
    out.write(f"@problemName {ds.name or 'unnamed'}\n")
    out.write("@timeStamps false\n@missing false\n")
    out.write(f"@univariate {'true' if ds.n_vars == 1 else 'false'}\n")
    if ds.n_vars > 1:
        out.write(f"@dimensions {ds.n_vars}\n")
    out.write(f"@equalLength true\n@seriesLength {ds.n_steps}\n")
    out.write("@classLabel true " + " ".join(ds.class_names) + "\n@data\n")
    for series, label in zip(ds.x, ds.labels):
        dims = [",".join(repr(float(v)) for v in var) for var in series]
        out.write(":".join(dims) + ":" + ds.class_names[label] + "\n")
    return out.getvalue()


# -- CSV fallback -------------------------------------------------------------------

_CSV_COL = re.compile(r"^v(\d+)_t(\d+)$")


def parse_csv(text: str, class_names: Optional[Sequence[str]] = None, name: str = "") -> TsDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TsFormatError("empty CSV file", 1) from None
    if not header or header[0].strip() != "label":
        raise TsFormatError("CSV header must start with 'label'", 1)
    coords = []
    for col in header[1:]:
        m = _CSV_COL.match(col.strip())
        if not m:
            raise TsFormatError(f"bad CSV column name {col!r}", 1)
        coords.append((int(m.group(1)), int(m.group(2))))
    n_vars = max(v for v, _ in coords) + 1
    n_steps = max(t for _, t in coords) + 1
    expected = [(v, t) for v in range(n_vars) for t in range(n_steps)]
    if coords != expected:
        raise TsFormatError("CSV columns must be v0_t0..v0_t{T-1},v1_t0,... in variable-major order", 1)
    rows, raw_labels = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise TsFormatError(f"expected {len(header)} fields, got {len(rec)}", lineno)
        values = np.array([_parse_value(v, lineno) for v in rec[1:]]).reshape(n_vars, n_steps)
        rows.append([_impute(list(var), lineno) for var in values])
        raw_labels.append(rec[0].strip())
    vocab = tuple(sorted(class_names if class_names is not None else set(raw_labels)))
    index = {c: i for i, c in enumerate(vocab)}
    for i, lab in enumerate(raw_labels):
        if lab not in index:
            raise VocabularyError(f"label {lab!r} of instance {i} not in vocabulary {list(vocab)}")
    x = np.array(rows, dtype=np.float64).reshape(len(rows), n_vars, n_steps)
    labels = np.array([index[l] for l in raw_labels], dtype=np.int64)
    return TsDataset(x=x, labels=labels, class_names=vocab, name=name)


def format_csv(ds: TsDataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label"] + [f"v{v}_t{t}" for v in range(ds.n_vars) for t in range(ds.n_steps)])
    for series, label in zip(ds.x, ds.labels):
        w.writerow([ds.class_names[label]] + [repr(float(v)) for v in series.reshape(-1)])
    return out.getvalue()


def load_dataset(path, class_names: Optional[Sequence[str]] = None) -> TsDataset:
    path = Path(path)
    text = path.read_text()
    name = re.sub(r"_(TRAIN|TEST)$", "", path.stem, flags=re.I)
    if path.suffix.lower() == ".csv":
        return parse_csv(text, class_names, name)
    return parse_ts(text, class_names, name)


def save_dataset(ds: TsDataset, path) -> None:
    path = Path(path)
    text = format_csv(ds) if path.suffix.lower() == ".csv" else format_ts(ds)
    path.write_text(text)


# -- preprocessing --------------------------------------------------------------------


def znormalize(ds: TsDataset, min_std: float = 1e-8) -> TsDataset:
    """Per-instance, per-variable standardisation (population std)."""
    mean = ds.x.mean(axis=2, keepdims=True)
    std = ds.x.std(axis=2, keepdims=True)
    flat = std < min_std
    x = np.where(flat, 0.0, (ds.x - mean) / np.where(flat, 1.0, std))
    return replace(ds, x=x)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 16
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True


def batch_iter(ds: TsDataset, plan: BatchPlan, epoch: int) -> Iterator[tuple]:
    """Yield ``(x, labels)`` batches; the order is a function of ``(seed, epoch)``."""
    if plan.batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = ds.n_instances
    if plan.drop_last and plan.batch_size > n:
        raise EmptyEpochError(f"batch size {plan.batch_size} > {n} instances with drop_last")
    order = np.random.default_rng([plan.seed, epoch]).permutation(n) if plan.shuffle else np.arange(n)
    for start in range(0, n, plan.batch_size):
        idx = order[start : start + plan.batch_size]
        if plan.drop_last and idx.size < plan.batch_size:
            break
        yield ds.x[idx], ds.labels[idx]


def train_test_split(ds: TsDataset, test_fraction: float = 0.3, seed: int = 0) -> tuple:
    """Stratified split; each class contributes ``round(n_c * test_fraction)`` test instances."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(idx.size * test_fraction))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


# -- synthetic data ------------------------------------------------------------------

EXAMPLE1_CLASSES = ("down", "flat", "up")


def example1_templates(t: int) -> np.ndarray:
    """Noise-free ``(3, t)`` templates in class order down, flat, up.

    ``down`` falls linearly from 1 to 0 over the first half and stays flat;
    ``up`` is flat at 0 over the first half then rises to 1; ``flat`` is 0.
    """
    if t < 4:
        raise ValueError("Example-1 series need t >= 4")
    half = t // 2
    down = np.zeros(t)
    down[:half] = np.linspace(1.0, 0.0, half, endpoint=False)
    up = np.zeros(t)
    up[half:] = np.linspace(0.0, 1.0, t - half + 1)[1:]
    return np.stack([down, np.zeros(t), up])


def make_example1(n_per_class: int, t: int = 10, noise_std: float = 0.1, seed: int = 0) -> TsDataset:
    """Three-class stock-price toy problem: flat, up-growth and down-growth."""
    rng = np.random.default_rng(seed)
    templates = example1_templates(t)
    labels = np.repeat(np.arange(3), n_per_class)
    x = templates[labels][:, None, :].copy()
    if noise_std > 0:
        x += rng.normal(0.0, noise_std, size=x.shape)
    return TsDataset(x=x, labels=labels.astype(np.int64), class_names=EXAMPLE1_CLASSES, name="Example1")
