"""ROC/AUC (one-vs-all, micro, macro), threshold confusion metrics, slices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .ingest import CLASSES

AGE_GROUPS = ("age<=20", "20<age<=40", "40<age<=60", "60<age")
GENDER_GROUPS = ("male", "female")
DEFAULT_THRESHOLD = 0.9


class UndefinedAUCError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredExample:
    record_id: str
    true_label: int  # 1..3
    probs: tuple[float, float, float]
    age: int | None = None
    gender: str | None = None

    def __post_init__(self):
        if abs(sum(self.probs) - 1.0) > 1e-6:
            raise ValueError(f"{self.record_id}: probabilities sum to {sum(self.probs)}")


def roc_curve(scores: np.ndarray, positives: np.ndarray):
    """ROC points over distinct thresholds (tied scores move together).

    Returns ``(fpr, tpr, thresholds)`` starting at (0, 0) with threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(positives.sum()), int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positives[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, np.r_[np.inf, s[last_of_group]]


def trapezoid_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def binary_auc(scores, positives) -> float:
    fpr, tpr, _ = roc_curve(scores, positives)
    return trapezoid_auc(fpr, tpr)


def _arrays(examples: Sequence[ScoredExample]):
    probs = np.array([e.probs for e in examples], dtype=np.float64).reshape(-1, 3)
    labels = np.array([e.true_label for e in examples], dtype=int)
    return probs, labels


def roc_auc_one_vs_all(examples: Sequence[ScoredExample], target_class: int):
    """``((fpr, tpr, thresholds), auc)`` scoring ``target_class`` against the rest."""
    probs, labels = _arrays(examples)
    curve = roc_curve(probs[:, target_class - 1], labels == target_class)
    return curve, trapezoid_auc(curve[0], curve[1])


def micro_roc(examples: Sequence[ScoredExample]):
    probs, labels = _arrays(examples)
    onehot = labels[:, None] == np.arange(1, 4)[None, :]
    return roc_curve(probs.reshape(-1), onehot.reshape(-1))


def micro_average_auc(examples: Sequence[ScoredExample]) -> float:
    """AUC of the 3N pooled one-vs-all (score, indicator) pairs."""
    _require_all_classes(examples)
    fpr, tpr, _ = micro_roc(examples)
    return trapezoid_auc(fpr, tpr)


def macro_average_auc(examples: Sequence[ScoredExample]) -> float:
    """Unweighted mean of the three one-vs-all AUCs."""
    _require_all_classes(examples)
    return float(np.mean([roc_auc_one_vs_all(examples, int(c))[1] for c in CLASSES]))


def macro_roc(examples: Sequence[ScoredExample]):
    """Per-class TPR interpolated on the union of FPR points and averaged (for plots)."""
    curves = [roc_auc_one_vs_all(examples, int(c))[0] for c in CLASSES]
    grid = np.unique(np.concatenate([c[0] for c in curves]))
    tpr = np.mean([np.interp(grid, c[0], c[1]) for c in curves], axis=0)
    return grid, tpr


def _require_all_classes(examples):
    present = {e.true_label for e in examples}
    missing = [int(c) for c in CLASSES if int(c) not in present]
    if missing:
        raise UndefinedAUCError(f"classes {missing} absent; averaged AUC undefined")


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    @staticmethod
    def _ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    @property
    def sensitivity(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self):
        return self._ratio(self.tn, self.tn + self.fn)

    @property
    def prevalence(self):
        return self._ratio(self.tp + self.fn, self.tp + self.fn + self.tn + self.fp)

    def as_row(self) -> dict:
        return {
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "ppv": self.ppv, "npv": self.npv, "tp": self.tp, "fp": self.fp,
            "tn": self.tn, "fn": self.fn, "prevalence": self.prevalence,
            "threshold": self.threshold,
        }


def threshold_metrics(examples: Sequence[ScoredExample], target_class: int = 3,
                      threshold: float = DEFAULT_THRESHOLD) -> ConfusionMetrics:
    """Predicted positive iff ``prob(target_class) >= threshold``."""
    probs, labels = _arrays(examples)
    pred = probs[:, target_class - 1] >= threshold
    truth = labels == target_class
    return ConfusionMetrics(
        tp=int(np.sum(pred & truth)), fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)), fn=int(np.sum(~pred & truth)),
        threshold=threshold,
    )


def age_group(age: int | None) -> str | None:
    if age is None:
        return None
    if age <= 20:
        return AGE_GROUPS[0]
    if age <= 40:
        return AGE_GROUPS[1]
    if age <= 60:
        return AGE_GROUPS[2]
    return AGE_GROUPS[3]


def gender_group(gender: str | None) -> str | None:
    return gender if gender in GENDER_GROUPS else None


SLICERS: dict[str, tuple[Callable[[ScoredExample], str | None], tuple[str, ...]]] = {
    "age": (lambda e: age_group(e.age), AGE_GROUPS),
    "gender": (lambda e: gender_group(e.gender), GENDER_GROUPS),
}


def _safe(fn, *args) -> float | None:
    try:
        return fn(*args)
    except UndefinedAUCError:
        return None


@dataclass
class EvalResult:
    """Everything reported for one set of scored examples."""

    n: int
    class_auc: dict[int, float | None]
    micro_auc: float | None
    macro_auc: float | None
    confusion: ConfusionMetrics

    @classmethod
    def compute(cls, examples: Sequence[ScoredExample], threshold: float = DEFAULT_THRESHOLD) -> "EvalResult":
        aucs = {int(c): _safe(lambda ex, t: roc_auc_one_vs_all(ex, t)[1], examples, int(c)) for c in CLASSES}
        return cls(
            n=len(examples), class_auc=aucs,
            micro_auc=_safe(micro_average_auc, examples) if examples else None,
            macro_auc=_safe(macro_average_auc, examples) if examples else None,
            confusion=threshold_metrics(examples, 3, threshold),
        )


@dataclass
class SliceReport:
    slicer: str
    groups: dict[str, EvalResult] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    excluded: int = 0


def slice_analysis(examples: Iterable[ScoredExample], slicer: str,
                   threshold: float = DEFAULT_THRESHOLD) -> SliceReport:
    """Evaluate per age bin or per gender; examples lacking the field are excluded."""
    if slicer not in SLICERS:
        raise ValueError(f"slicer must be one of {sorted(SLICERS)}, got {slicer!r}")
    key, names = SLICERS[slicer]
    members: dict[str, list[ScoredExample]] = {name: [] for name in names}
    report = SliceReport(slicer)
    for e in examples:
        group = key(e)
        if group is None:
            report.excluded += 1
        else:
            members[group].append(e)
    for name in names:
        report.counts[name] = len(members[name])
        report.groups[name] = EvalResult.compute(members[name], threshold)
    return report


def fmt(value) -> str:
    """CSV cell: absent values stay empty, floats get fixed precision."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
