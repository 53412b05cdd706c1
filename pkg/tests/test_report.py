import csv
import xml.etree.ElementTree as ET

import numpy as np

from coughfuse.metrics import EvalResult, ScoredExample, slice_analysis
from coughfuse.report import emit_report, plot_roc


def examples(seed=0, n=60):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = 1 + i % 3
        logits = rng.standard_normal(3)
        logits[label - 1] += 1.5
        p = np.exp(logits) / np.exp(logits).sum()
        out.append(ScoredExample(f"r{i}", label, tuple(p), int(rng.integers(10, 80)),
                                 ["male", "female", "other"][i % 3]))
    return out


def gids(path):
    return [el.get("id") for el in ET.parse(path).iter() if (el.get("id") or "").startswith("roc-")]


def test_roc_svg_is_well_formed_with_five_curves(tmp_path):
    plot_roc(tmp_path / "roc.svg", examples())
    assert sorted(gids(tmp_path / "roc.svg")) == ["roc-class1", "roc-class2", "roc-class3", "roc-macro", "roc-micro"]


def build(out, seed=0):
    ex = examples(seed)
    results = {"multi_branch": EvalResult.compute(ex), "ablation": EvalResult.compute(examples(seed + 1))}
    slices = [slice_analysis(ex, "age"), slice_analysis(ex, "gender")]
    return emit_report(results, {"multi_branch": ex}, slices, out, {"seed": seed})


def test_report_tables(tmp_path):
    written = build(tmp_path)
    assert {p.name for p in written} >= {"auc.csv", "threshold_metrics.csv", "roc_multi_branch.svg",
                                          "slice_auc.csv", "slice_threshold.csv", "slice_counts.svg",
                                          "summary.json"}
    rows = list(csv.reader(open(tmp_path / "auc.csv")))
    assert rows[0] == ["target", "multi_branch", "ablation"]
    assert [r[0] for r in rows[1:]] == ["class1", "class2", "class3", "micro", "macro"]
    thr = list(csv.DictReader(open(tmp_path / "threshold_metrics.csv")))
    assert [r["model"] for r in thr] == ["multi_branch", "ablation"] and float(thr[0]["threshold"]) == 0.9
    groups = [r["group"] for r in csv.DictReader(open(tmp_path / "slice_auc.csv"))]
    assert groups == ["age<=20", "20<age<=40", "40<age<=60", "60<age", "excluded", "male", "female", "excluded"]


def test_report_regeneration_is_byte_identical(tmp_path):
    a = build(tmp_path / "a")
    b = build(tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
