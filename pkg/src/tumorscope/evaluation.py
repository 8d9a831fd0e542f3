"""Splits, class weights and every reported metric.

Conventions: confusion-matrix rows are true classes and columns predictions;
macro averages are unweighted means over classes; a metric whose denominator
is zero reports 0.0 and adds a flag instead of producing NaN.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from tumorscope.tensorcore import RngState


class EvaluationError(ValueError):
    pass


# ------------------------------------------------------------------ splitting

def _class_indices(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def stratified_split(labels, test_fraction: float, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    """Per class, shuffle and send round(n_c * test_fraction) samples to test.

    Rounding is half-up. Both index arrays are returned sorted.
    """
    labels = np.asarray(labels)
    if not 0 < test_fraction < 1:
        raise EvaluationError("test_fraction must lie in (0, 1)")
    train, test = [], []
    for c, idx in _class_indices(labels).items():
        if len(idx) < 2:
            raise EvaluationError(f"class {c} has {len(idx)} sample(s); need at least 2")
        idx = rng.split(c).generator().permutation(idx)
        n_test = math.floor(len(idx) * test_fraction + 0.5)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class FoldPlan:
    k: int
    folds: list[np.ndarray]
    n: int

    def train_indices(self, i: int) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[i]] = False
        return np.flatnonzero(mask)

    def split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.train_indices(i), self.folds[i]


def stratified_kfold(labels, k: int, rng: RngState) -> FoldPlan:
    """Deal each class's shuffled samples round-robin into ``k`` folds.

    The dealing position carries over from one class to the next, which keeps
    total fold sizes within one of each other as well.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise EvaluationError("k must be at least 2")
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for c, idx in _class_indices(labels).items():
        if len(idx) < k:
            raise EvaluationError(f"class {c} has {len(idx)} samples, fewer than k={k}")
        for i in rng.split(c).generator().permutation(idx):
            folds[pos % k].append(int(i))
            pos += 1
    return FoldPlan(k, [np.sort(np.array(f, dtype=np.int64)) for f in folds], len(labels))


def class_weights(labels, c: int) -> np.ndarray:
    """Balanced weights ``N / (C * n_c)``."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=c)[:c]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise EvaluationError(f"classes {missing.tolist()} have no samples")
    return len(labels) / (c * counts.astype(np.float64))


# ------------------------------------------------------------------ confusion matrix

@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(true, pred, c: int) -> ConfusionMatrix:
    true, pred = np.asarray(true), np.asarray(pred)
    if true.shape != pred.shape:
        raise EvaluationError(f"length mismatch: {true.shape} vs {pred.shape}")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise EvaluationError(f"{name} labels out of range [0, {c})")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


@dataclass
class Summary:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    flags: list[str] = field(default_factory=list)


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> Fraction:
    if den == 0:
        flags.append(flag)
        return Fraction(0)
    return Fraction(num, den)


def summarize(cm: ConfusionMatrix) -> Summary:
    """Per-class and macro precision/recall/F1 plus accuracy.

    Computed in exact rationals and rounded once, so values are the correctly
    rounded floats of the true ratios.
    """
    counts = cm.counts
    n = int(counts.sum())
    if n < 1:
        raise EvaluationError("empty confusion matrix")
    flags: list[str] = []
    c = cm.class_count
    diag = [int(counts[i, i]) for i in range(c)]
    col = [int(counts[:, i].sum()) for i in range(c)]
    row = [int(counts[i].sum()) for i in range(c)]
    prec = [_ratio(diag[i], col[i], f"precision_zero_division:{i}", flags) for i in range(c)]
    rec = [_ratio(diag[i], row[i], f"recall_zero_division:{i}", flags) for i in range(c)]
    # 2tp / (2tp + fp + fn) is the harmonic mean of precision and recall
    f1 = [_ratio(2 * diag[i], col[i] + row[i], f"f1_zero_division:{i}", flags) for i in range(c)]
    return Summary(float(Fraction(sum(diag), n)),
                   [float(v) for v in prec], [float(v) for v in rec], [float(v) for v in f1],
                   float(sum(prec) / c), float(sum(rec) / c), float(sum(f1) / c), flags)


# ------------------------------------------------------------------ ROC / AUC

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray


def binary_roc(scores, positive) -> tuple[RocCurve, float | None]:
    """ROC of a one-vs-rest problem and its trapezoidal AUC.

    One point per distinct score (descending), so tied scores produce a
    diagonal segment and the AUC equals the Mann–Whitney statistic with ties
    counted as one half. Returns ``None`` for the AUC when either class is
    empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1] if len(s) else np.array([], dtype=int)
    tps = np.cumsum(y)[last] if len(s) else np.array([])
    fps = (last + 1) - tps
    tp = np.r_[0, tps].astype(np.float64)
    fp = np.r_[0, fps].astype(np.float64)
    if n_pos == 0 or n_neg == 0:
        tpr = tp / n_pos if n_pos else np.linspace(0, 1, len(tp))
        fpr = fp / n_neg if n_neg else np.linspace(0, 1, len(fp))
        return RocCurve(fpr, tpr), None
    # trapezoids in integer units: sum of dfp * (tp_prev + tp_next) / 2
    area = float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1]))) / 2.0
    return RocCurve(fp / n_neg, tp / n_pos), area / (n_pos * n_neg)


@dataclass
class RocResult:
    curves: list[RocCurve]
    auc: list[float | None]
    macro_auc: float | None
    flags: list[str]


def roc_auc(scores, true) -> RocResult:
    scores = np.asarray(scores, dtype=np.float64)
    true = np.asarray(true)
    if scores.ndim != 2 or scores.shape[0] != len(true):
        raise EvaluationError(f"scores shape {scores.shape} does not match {len(true)} labels")
    curves, aucs, flags = [], [], []
    for c in range(scores.shape[1]):
        curve, auc = binary_roc(scores[:, c], true == c)
        curves.append(curve)
        aucs.append(auc)
        if auc is None:
            flags.append(f"auc_undefined:{c}")
    defined = [a for a in aucs if a is not None]
    return RocResult(curves, aucs, float(np.mean(defined)) if defined else None, flags)


# ------------------------------------------------------------------ report

@dataclass
class MetricsReport:
    model: str
    dataset: str
    seed: int | None
    fold: int | None
    external: bool
    classes: list[str]
    confusion: ConfusionMatrix
    summary: Summary
    roc: RocResult

    def to_dict(self) -> dict:
        s = self.summary
        return {
            "model": self.model,
            "dataset": self.dataset,
            "seed": self.seed,
            "fold": self.fold,
            "external": self.external,
            "n": self.confusion.total,
            "classes": list(self.classes),
            "accuracy": s.accuracy,
            "macro_f1": s.macro_f1,
            "macro_recall": s.macro_recall,
            "macro_precision": s.macro_precision,
            "macro_auc": self.roc.macro_auc,
            "precision": s.precision,
            "recall": s.recall,
            "f1": s.f1,
            "auc": self.roc.auc,
            "confusion_matrix": self.confusion.counts.tolist(),
            "flags": s.flags + self.roc.flags,
        }

    def metrics_equal(self, other: MetricsReport) -> bool:
        skip = {"model", "dataset", "seed", "fold"}
        a = {k: v for k, v in self.to_dict().items() if k not in skip}
        b = {k: v for k, v in other.to_dict().items() if k not in skip}
        return a == b


def build_report(true, probs, classes, model: str = "", dataset: str = "", seed=None, fold=None,
                 external: bool = False) -> MetricsReport:
    probs = np.asarray(probs)
    c = len(classes)
    cm = confusion_matrix(true, probs.argmax(axis=1), c)
    return MetricsReport(model, dataset, seed, fold, external, list(classes), cm, summarize(cm),
                         roc_auc(probs, true))


def write_report(report: MetricsReport, out_dir) -> None:
    """Write ``report.json``, ``confusion_matrix.csv`` and ``roc.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(out / "confusion_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(report.classes))
        for name, row in zip(report.classes, report.confusion.counts.tolist()):
            w.writerow([name] + row)
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "fpr", "tpr"])
        for name, curve in zip(report.classes, report.roc.curves):
            for f, t in zip(curve.fpr.tolist(), curve.tpr.tolist()):
                w.writerow([name, repr(f), repr(t)])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return ConfusionMatrix(np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64))


def write_fold_table(reports: list[MetricsReport], path) -> dict[str, tuple[float, float]]:
    """Per-fold metrics CSV plus ``mean``/``sd`` rows; returns the summary."""
    keys = ["accuracy", "macro_precision", "macro_recall", "macro_f1", "macro_auc"]
    rows = [[r.fold] + [r.to_dict()[k] for k in keys] for r in reports]
    summary = {}
    for j, k in enumerate(keys):
        vals = np.array([row[j + 1] for row in rows if row[j + 1] is not None], dtype=np.float64)
        summary[k] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold"] + keys)
        w.writerows(rows)
        w.writerow(["mean"] + [summary[k][0] for k in keys])
        w.writerow(["sd"] + [summary[k][1] for k in keys])
    return summary


def cross_dataset_eval(model, records, external_classes: list[str], loader, class_map: dict[str, str] | None = None,
                       exclude=(), model_classes: list[str] | None = None, dataset: str = "external",
                       batch_size: int = 64) -> MetricsReport:
    """Evaluate ``model`` on an external labelled set.

    ``records`` are ``(path, label)`` pairs indexing ``external_classes``.
    Excluded class names are dropped first; every remaining external class
    must map (through ``class_map`` or by identical name) onto one of
    ``model_classes``. ``loader(paths)`` returns the image batch.
    """
    from tumorscope import models as _models

    model_classes = list(model_classes or model.meta.get("classes") or
                         [str(i) for i in range(model.class_count)])
    class_map = dict(class_map or {})
    exclude = set(exclude)
    unknown_excl = exclude - set(external_classes)
    if unknown_excl:
        raise EvaluationError(f"excluded classes not present in external set: {sorted(unknown_excl)}")
    mapping: dict[int, int] = {}
    unmapped = []
    for i, name in enumerate(external_classes):
        if name in exclude:
            continue
        target = class_map.get(name, name)
        if target in model_classes:
            mapping[i] = model_classes.index(target)
        elif str(target).isdigit() and int(target) < len(model_classes):
            mapping[i] = int(target)
        else:
            unmapped.append(name)
    if unmapped:
        raise EvaluationError(f"external classes with no mapping onto the model: {unmapped}")
    kept = [(p, mapping[lab]) for p, lab in records if lab in mapping]
    if not kept:
        raise EvaluationError("no samples left after exclusion")
    paths = [p for p, _ in kept]
    y = np.array([lab for _, lab in kept])
    probs = _models.predict_proba(model, loader(paths), batch_size)
    return build_report(y, probs, model_classes, model=model.name, dataset=dataset,
                        seed=model.meta.get("seed"), external=True)
