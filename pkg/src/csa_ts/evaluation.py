"""Accuracy, improvement and significance metrics, the DTW 1-NN baseline,
and export of pooled feature matrices."""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateTableError, ShapeError, UndefinedImprovementError, UnsupportedVariantError


@dataclass
class RunRecord:
    dataset: str
    variant: str
    seed: int
    accuracy: float
    epochs: int
    wall_ms: int
    predictions: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f"predictions {preds.shape} and labels {labels.shape} differ in length")
    if preds.size == 0:
        raise ShapeError("accuracy of an empty prediction set is undefined")
    return int((preds == labels).sum()) / preds.size


def accuracy_improvement(acc_a: float, acc_b: float) -> float:
    """Relative improvement of ``acc_a`` over ``acc_b`` in percent."""
    if acc_b <= 0:
        raise UndefinedImprovementError(f"improvement over accuracy {acc_b} is undefined")
    return 100.0 * (acc_a - acc_b) / acc_b


# -- significance -------------------------------------------------------------------


@dataclass(frozen=True)
class Contingency2x2:
    """Rows: model A, model B.  Columns: correct, incorrect."""

    counts: tuple

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (2, 2) or (arr < 0).any():
            raise ValueError(f"need a 2x2 table of non-negative counts, got {self.counts}")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64)


def contingency_from_runs(runs_a: Sequence[RunRecord], runs_b: Sequence[RunRecord]) -> Contingency2x2:
    """Pool per-instance correct/incorrect outcomes over all runs of each model."""

    def pooled(runs):
        correct = total = 0
        for r in runs:
            p, y = np.asarray(r.predictions), np.asarray(r.labels)
            correct += int((p == y).sum())
            total += p.size
        return correct, total - correct

    return Contingency2x2((pooled(runs_a), pooled(runs_b)))


def chi2_sf_df1(statistic: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if statistic <= 0:
        return 1.0
    return math.erfc(math.sqrt(statistic / 2.0))


def chi_square_test(table: Contingency2x2) -> tuple:
    """Pearson statistic (no continuity correction) and its df=1 p-value."""
    obs = table.array
    rows, cols = obs.sum(axis=1), obs.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise DegenerateTableError(f"contingency table {table.counts} has a zero marginal")
    expected = np.outer(rows, cols) / obs.sum()
    stat = float(((obs - expected) ** 2 / expected).sum())
    return stat, chi2_sf_df1(stat)


class Verdict(str, enum.Enum):
    SIGNIFICANTLY_BETTER = "significantly-better"
    BETTER = "better"
    NOT_BETTER = "not-better"


def significance_verdict(p: float, acc_a: float, acc_b: float, threshold: float = 0.05) -> Verdict:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    if acc_a > acc_b:
        return Verdict.SIGNIFICANTLY_BETTER if p < threshold else Verdict.BETTER
    return Verdict.NOT_BETTER


@dataclass(frozen=True)
class VerdictTally:
    significantly: int
    not_significantly: int
    cases: int

    @property
    def total(self) -> int:
        return self.significantly + self.not_significantly

    def row(self) -> tuple:
        """``("3/28", "18/28", "21/28")`` style cells."""
        n = self.cases
        return (f"{self.significantly}/{n}", f"{self.not_significantly}/{n}", f"{self.total}/{n}")

    def __add__(self, other: "VerdictTally") -> "VerdictTally":
        return VerdictTally(self.significantly + other.significantly,
                            self.not_significantly + other.not_significantly,
                            self.cases + other.cases)


def tally_verdicts(verdicts: Iterable[Verdict]) -> VerdictTally:
    counts = Counter(Verdict(v) for v in verdicts)
    return VerdictTally(
        counts[Verdict.SIGNIFICANTLY_BETTER],
        counts[Verdict.BETTER],
        sum(counts.values()),
    )


# -- DTW ---------------------------------------------------------------------------


def _as_series(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def dtw_distance(a, b) -> float:
    """Dependent (multivariate) DTW with squared point costs and no window.

    ``a`` is ``(V, T1)`` and ``b`` is ``(V, T2)``; 1-d inputs are univariate.
    The cost is not square-rooted.
    """
    return float(dtw_to_many(a, _as_series(b)[None])[0])


def dtw_to_many(a, batch) -> np.ndarray:
    """DTW from one series ``(V, T1)`` to each of ``batch`` ``(M, V, T2)``."""
    a = _as_series(a)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1] != a.shape[0]:
        raise ShapeError(f"variable count mismatch: {a.shape} vs batch {batch.shape}")
    t1, t2 = a.shape[1], batch.shape[2]
    # cost[m, i, j] = sum_v (a[v, i] - b[m, v, j])^2
    cost = ((a[None, :, :, None] - batch[:, :, None, :]) ** 2).sum(axis=1)
    acc = np.full((batch.shape[0], t1 + 1, t2 + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for i in range(1, t1 + 1):
        diag_up = np.minimum(acc[:, i - 1, 1:], acc[:, i - 1, :-1])
        row = acc[:, i]
        for j in range(1, t2 + 1):
            row[:, j] = cost[:, i - 1, j - 1] + np.minimum(diag_up[:, j - 1], row[:, j - 1])
    return acc[:, t1, t2]


def nn1_dtw_classify(train_x, train_labels, test_x) -> np.ndarray:
    """1-NN under DTW; distance ties go to the lower training index."""
    train_x = np.asarray(train_x, dtype=np.float64)
    if train_x.shape[0] == 0:
        raise ValueError("1-NN needs a non-empty training set")
    train_labels = np.asarray(train_labels)
    out = np.empty(len(test_x), dtype=train_labels.dtype)
    for n, series in enumerate(np.asarray(test_x, dtype=np.float64)):
        out[n] = train_labels[int(np.argmin(dtw_to_many(series, train_x)))]
    return out


# -- feature export -------------------------------------------------------------------


def export_feature_matrices(model, x, labels=None) -> tuple:
    """Time-pooled features before (``P^L``, ``(B, F)``) and after (``P^O``, ``(B, C, F)``) CSA."""
    from .model import csa_features

    if not model.variant.uses_csa:
        raise UnsupportedVariantError("feature export needs a CSA variant")
    l, o = csa_features(model, x, labels)
    return l.data.mean(axis=1), o.data.mean(axis=2)


def write_feature_csvs(out_dir, p_l: np.ndarray, p_o: np.ndarray, labels=None, class_names=None) -> tuple:
    """``p_l.csv``: one row per instance; ``p_o.csv``: one row per (instance, class)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    f = p_l.shape[1]
    feat_cols = [f"f{i}" for i in range(f)]
    names = list(class_names) if class_names is not None else [str(c) for c in range(p_o.shape[1])]

    def label_of(b):
        return "" if labels is None else names[int(labels[b])]

    pl_path, po_path = out_dir / "p_l.csv", out_dir / "p_o.csv"
    with open(pl_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "label"] + feat_cols)
        for b, row in enumerate(p_l):
            w.writerow([b, label_of(b)] + [repr(float(v)) for v in row])
    with open(po_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "label", "class"] + feat_cols)
        for b in range(p_o.shape[0]):
            for c in range(p_o.shape[1]):
                w.writerow([b, label_of(b), names[c]] + [repr(float(v)) for v in p_o[b, c]])
    return pl_path, po_path
