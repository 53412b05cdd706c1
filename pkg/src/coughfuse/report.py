"""Report files: metric CSVs, ROC and slice-count figures, run summary.

Column orders
-------------
``auc.csv``               target, <model>...    (rows class1, class2, class3, micro, macro)
``threshold_metrics.csv`` model, sensitivity, specificity, ppv, npv, tp, fp, tn, fn, prevalence, threshold
``slice_auc.csv``         slicer, group, n, class1, class2, class3, micro
``slice_threshold.csv``   slicer, group, sensitivity, specificity, ppv, npv, tp, fp, tn, fn, prevalence, threshold
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import (  # noqa: E402
    EvalResult, ScoredExample, SliceReport, UndefinedAUCError, fmt, macro_roc, micro_roc,
    roc_auc_one_vs_all,
)

CONFUSION_COLUMNS = ["sensitivity", "specificity", "ppv", "npv", "tp", "fp", "tn", "fn", "prevalence", "threshold"]
CLASS_NAMES = {1: "class1 (asymptomatic negative)", 2: "class2 (symptomatic negative)", 3: "class3 (COVID-19 positive)"}

_RC = {
    "svg.hashsalt": "coughfuse",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _writer(path: Path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def write_auc_table(path: Path, results: Mapping[str, EvalResult]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["target"] + list(results))
        for c in (1, 2, 3):
            w.writerow([f"class{c}"] + [fmt(r.class_auc[c]) for r in results.values()])
        w.writerow(["micro"] + [fmt(r.micro_auc) for r in results.values()])
        w.writerow(["macro"] + [fmt(r.macro_auc) for r in results.values()])


def write_threshold_table(path: Path, results: Mapping[str, EvalResult]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["model"] + CONFUSION_COLUMNS)
        for name, r in results.items():
            row = r.confusion.as_row()
            w.writerow([name] + [fmt(row[k]) for k in CONFUSION_COLUMNS])


def write_slice_tables(out_dir: Path, slices: Sequence[SliceReport]) -> None:
    fh, w = _writer(out_dir / "slice_auc.csv")
    with fh:
        w.writerow(["slicer", "group", "n", "class1", "class2", "class3", "micro"])
        for rep in slices:
            for group, r in rep.groups.items():
                w.writerow([rep.slicer, group, r.n] + [fmt(r.class_auc[c]) for c in (1, 2, 3)] + [fmt(r.micro_auc)])
            w.writerow([rep.slicer, "excluded", rep.excluded, "", "", "", ""])
    fh, w = _writer(out_dir / "slice_threshold.csv")
    with fh:
        w.writerow(["slicer", "group"] + CONFUSION_COLUMNS)
        for rep in slices:
            for group, r in rep.groups.items():
                row = r.confusion.as_row()
                w.writerow([rep.slicer, group] + [fmt(row[k]) for k in CONFUSION_COLUMNS])


def plot_roc(path: Path, examples: Sequence[ScoredExample], title: str = "ROC") -> None:
    """Per-class one-vs-all curves plus micro and macro averages; each line has
    an SVG id ``roc-<name>``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        for c in (1, 2, 3):
            try:
                (fpr, tpr, _), auc = roc_auc_one_vs_all(examples, c)
            except UndefinedAUCError:
                continue
            ax.plot(fpr, tpr, lw=1.2, gid=f"roc-class{c}", label=f"{CLASS_NAMES[c]}  AUC {auc:.3f}")
        fpr, tpr, _ = micro_roc(examples)
        ax.plot(fpr, tpr, ls="--", lw=1.5, color="k", gid="roc-micro", label="micro-average")
        fpr, tpr = macro_roc(examples)
        ax.plot(fpr, tpr, ls=":", lw=1.5, color="0.4", gid="roc-macro", label="macro-average")
        ax.plot([0, 1], [0, 1], lw=0.6, color="0.8")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right", fontsize=7, frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_slice_counts(path: Path, slices: Sequence[SliceReport]) -> None:
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(slices), figsize=(4 * len(slices), 3), squeeze=False)
        for ax, rep in zip(axes[0], slices):
            names = list(rep.counts)
            ax.bar(range(len(names)), [rep.counts[n] for n in names], color="0.45")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, fontsize=7)
            ax.set_ylabel("recordings")
            ax.set_title(f"test recordings by {rep.slicer}")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(results: Mapping[str, EvalResult], examples: Mapping[str, Sequence[ScoredExample]],
                slices: Sequence[SliceReport], out_dir: str | Path, summary: dict) -> list[Path]:
    """Write every report artifact under ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "auc.csv", out / "threshold_metrics.csv"]
    write_auc_table(written[0], results)
    write_threshold_table(written[1], results)
    for name, ex in examples.items():
        path = out / f"roc_{name}.svg"
        plot_roc(path, ex, title=f"ROC, {name.replace('_', ' ')}")
        written.append(path)
    if slices:
        write_slice_tables(out, slices)
        plot_slice_counts(out / "slice_counts.svg", slices)
        written += [out / "slice_auc.csv", out / "slice_threshold.csv", out / "slice_counts.svg"]
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
