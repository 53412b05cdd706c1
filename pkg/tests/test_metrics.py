import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughfuse import oracles
from coughfuse.metrics import (
    AGE_GROUPS, ConfusionMetrics, EvalResult, ScoredExample, UndefinedAUCError, age_group,
    binary_auc, fmt, gender_group, macro_average_auc, macro_roc, micro_average_auc, roc_auc_one_vs_all,
    roc_curve, slice_analysis, threshold_metrics,
)
from coughfuse.selftest import check_auc, check_micro


def binary_examples(pos, neg, target=3):
    """Examples whose ``target`` probability is the given score."""
    other = 1 if target != 1 else 2
    out = []
    for i, s in enumerate(list(pos) + list(neg)):
        probs = [0.0, 0.0, 0.0]
        probs[target - 1] = s
        probs[other - 1] = 1 - s
        label = target if i < len(pos) else other
        out.append(ScoredExample(f"e{i}", label, tuple(probs)))
    return out


def random_examples(rng, n, levels=None):
    probs = rng.dirichlet(np.ones(3), size=n)
    if levels:
        probs = np.round(probs * levels) / levels
        probs[:, 2] = 1 - probs[:, 0] - probs[:, 1]
        probs = np.abs(probs)
        probs /= probs.sum(1, keepdims=True)
    labels = np.r_[1, 2, 3, rng.integers(1, 4, n - 3)]
    ages = rng.integers(5, 90, n)
    genders = rng.choice(["male", "female", "other", ""], n)
    return [ScoredExample(f"r{i}", int(y), tuple(p), int(a), g or None)
            for i, (p, y, a, g) in enumerate(zip(probs, labels, ages, genders))]


def test_auc_examples():
    assert binary_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert binary_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert np.isclose(binary_auc([0.8, 0.4, 0.6, 0.3, 0.1], [1, 1, 0, 0, 0]), 5 / 6)
    _, auc = roc_auc_one_vs_all(binary_examples([0.8, 0.4], [0.6, 0.3, 0.1]), 3)
    assert np.isclose(auc, 0.8333333333333334)


def test_single_class_auc_is_undefined():
    with pytest.raises(UndefinedAUCError):
        binary_auc([0.1, 0.2], [1, 1])
    ex = binary_examples([0.9, 0.8], [0.1])
    with pytest.raises(UndefinedAUCError):
        micro_average_auc(ex)


def test_roc_curve_groups_ties():
    fpr, tpr, thr = roc_curve([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0])
    assert np.allclose(fpr, [0, 0, 0.5, 1]) and np.allclose(tpr, [0, 0.5, 1, 1])
    assert thr[0] == np.inf and np.allclose(thr[1:], [0.9, 0.5, 0.1])


def test_trapezoid_matches_pair_count_oracle():
    assert check_auc(n_instances=2000, seed=1) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=20), st.lists(st.integers(0, 6), min_size=1, max_size=20))
def test_auc_equals_mann_whitney_with_ties(pos, neg):
    pos, neg = np.array(pos) / 6, np.array(neg) / 6
    auc = binary_auc(np.r_[pos, neg], np.r_[np.ones(len(pos)), np.zeros(len(neg))])
    assert abs(auc - oracles.pair_count_auc(pos, neg)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_auc_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(30)
    y = np.r_[1, 0, rng.integers(0, 2, 28)].astype(bool)
    assert abs(binary_auc(s, y) - binary_auc(np.exp(3 * s) - 7, y)) < 1e-12


def test_micro_and_macro_examples():
    perfect = [ScoredExample(f"p{c}", c, tuple(np.eye(3)[c - 1])) for c in (1, 2, 3, 1, 2)]
    assert micro_average_auc(perfect) == 1.0 and macro_average_auc(perfect) == 1.0
    uniform = [ScoredExample(f"u{c}", c, (1 / 3, 1 / 3, 1 / 3)) for c in (1, 2, 3, 3)]
    assert micro_average_auc(uniform) == 0.5


def test_micro_matches_pooled_pair_count():
    assert check_micro(n_sets=100, seed=2) < 1e-9


def test_macro_is_mean_of_class_aucs():
    ex = random_examples(np.random.default_rng(0), 40)
    per_class = [roc_auc_one_vs_all(ex, c)[1] for c in (1, 2, 3)]
    assert np.isclose(macro_average_auc(ex), np.mean(per_class))
    grid, tpr = macro_roc(ex)
    assert grid[0] == 0 and grid[-1] == 1 and tpr[-1] == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.permutations([0, 1, 2]))
def test_micro_is_invariant_under_class_permutation(seed, perm):
    ex = random_examples(np.random.default_rng(seed), 15)
    twin = [ScoredExample(e.record_id, perm[e.true_label - 1] + 1,
                          tuple(e.probs[perm.index(k)] for k in range(3))) for e in ex]
    assert abs(micro_average_auc(ex) - micro_average_auc(twin)) < 1e-12


def test_threshold_hand_count():
    ex = binary_examples([0.95, 0.92, 0.5], [0.1, 0.91, 0.2])
    m = threshold_metrics(ex, 3, 0.9)
    assert (m.tp, m.fn, m.fp, m.tn) == (2, 1, 1, 2)
    for v in (m.sensitivity, m.specificity, m.ppv, m.npv):
        assert np.isclose(v, 2 / 3)
    assert np.isclose(m.prevalence, 0.5)


def test_threshold_is_inclusive_and_perfect_case():
    m = threshold_metrics(binary_examples([0.9], [0.0]), 3, 0.9)
    assert m.tp == 1
    m = threshold_metrics(binary_examples([1.0, 1.0], [0.0, 0.0]), 3, 0.9)
    assert (m.sensitivity, m.specificity, m.ppv, m.npv) == (1.0, 1.0, 1.0, 1.0)


def test_no_predicted_positives_leaves_ppv_absent():
    m = threshold_metrics(binary_examples([0.5, 0.2], [0.1]), 3, 0.9)
    assert m.ppv is None and m.sensitivity == 0.0
    assert fmt(m.ppv) == "" and fmt(m.sensitivity) == "0.000000" and fmt(3) == "3"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 0.99))
def test_confusion_identities(seed, threshold):
    ex = random_examples(np.random.default_rng(seed), 20)
    m = threshold_metrics(ex, 3, threshold)
    positives = sum(e.true_label == 3 for e in ex)
    assert m.tp + m.fn == positives and m.tn + m.fp == len(ex) - positives
    assert threshold_metrics(ex, 3, 0.0).sensitivity == 1.0
    assert threshold_metrics(ex, 3, 1.01).sensitivity == 0.0


def test_scored_example_requires_simplex():
    with pytest.raises(ValueError):
        ScoredExample("x", 1, (0.5, 0.5, 0.5))


@pytest.mark.parametrize("age,group", [
    (0, "age<=20"), (20, "age<=20"), (21, "20<age<=40"), (40, "20<age<=40"), (41, "40<age<=60"),
    (60, "40<age<=60"), (61, "60<age"), (99, "60<age"), (None, None),
])
def test_age_boundaries(age, group):
    assert age_group(age) == group


def test_gender_groups():
    assert [gender_group(g) for g in ("male", "female", "other", None)] == ["male", "female", None, None]


@pytest.mark.parametrize("slicer", ["age", "gender"])
def test_slice_equals_filter_then_evaluate(slicer):
    ex = random_examples(np.random.default_rng(3), 120)
    rep = slice_analysis(ex, slicer, 0.6)
    key = (lambda e: age_group(e.age)) if slicer == "age" else (lambda e: gender_group(e.gender))
    assert rep.excluded == sum(key(e) is None for e in ex)
    for group, result in rep.groups.items():
        members = [e for e in ex if key(e) == group]
        ref = EvalResult.compute(members, 0.6)
        assert rep.counts[group] == len(members) == result.n
        assert result.class_auc == ref.class_auc and result.micro_auc == ref.micro_auc
        assert result.confusion == ref.confusion


def test_slice_counts_match_generation():
    ages = [10] * 4 + [30] * 7 + [50] * 2 + [70] * 5
    ex = [ScoredExample(f"s{i}", 1 + i % 3, (0.2, 0.3, 0.5), a, "female") for i, a in enumerate(ages)]
    ex.append(ScoredExample("nometa", 1, (0.2, 0.3, 0.5)))
    rep = slice_analysis(ex, "age")
    assert rep.counts == dict(zip(AGE_GROUPS, [4, 7, 2, 5])) and rep.excluded == 1


def test_single_class_group_marks_auc_undefined():
    ex = [ScoredExample("a", 3, (0.1, 0.1, 0.8), 10), ScoredExample("b", 3, (0.1, 0.2, 0.7), 12),
          ScoredExample("c", 1, (0.8, 0.1, 0.1), 30), ScoredExample("d", 2, (0.1, 0.8, 0.1), 35)]
    rep = slice_analysis(ex, "age")
    young = rep.groups["age<=20"]
    assert young.class_auc == {1: None, 2: None, 3: None} and young.micro_auc is None
    assert rep.groups["40<age<=60"].n == 0
    with pytest.raises(ValueError):
        slice_analysis(ex, "height")


def test_confusion_row_order():
    m = ConfusionMetrics(1, 2, 3, 4, 0.9)
    assert list(m.as_row()) == ["sensitivity", "specificity", "ppv", "npv", "tp", "fp", "tn", "fn",
                                "prevalence", "threshold"]
