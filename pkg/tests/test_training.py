import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coughfuse import nn
from coughfuse.features import FeatureTriple
from coughfuse.ingest import Record, RecordSet, Status, map_label
from coughfuse.model import FusionModel, make_batch, tiny_config
from coughfuse.training import (
    CannotSplitError, NumericalError, SplitPlan, TrainParams, assemble_balanced_splits, grid_search,
    leakage_violations, recording_examples, split_records, split_sizes, state_digest, train,
    write_grid_csv, write_split_csv,
)

STATUS = {1: Status.HEALTHY, 2: Status.SYMPTOMATIC, 3: Status.COVID_POSITIVE}


def originals(counts):
    return [Record(f"c{c}-{i}", f"c{c}-{i}.wav", 1.0, STATUS[c]) for c, n in counts.items() for i in range(n)]


@pytest.mark.parametrize("n,sizes", [(380, [304, 38, 38]), (10, [8, 1, 1]), (3, [1, 1, 1]), (4446, [3557, 445, 444])])
def test_split_sizes(n, sizes):
    assert split_sizes(n, (0.8, 0.1, 0.1)) == sizes


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 10_000))
def test_split_sizes_partition_and_nonempty(n):
    sizes = split_sizes(n, (0.8, 0.1, 0.1))
    assert sum(sizes) == n and min(sizes) >= 1
    assert all(abs(s - n * f) <= 1 for s, f in zip(sizes, (0.8, 0.1, 0.1))) or n < 10


def test_split_records_is_stratified_and_deterministic():
    recs = originals({1: 50, 2: 30, 3: 20})
    a = split_records(recs, SplitPlan(seed=3))
    b = split_records(recs, SplitPlan(seed=3))
    assert [(r.id, r.split) for r in a] == [(r.id, r.split) for r in b]
    for c, n in ((1, 50), (2, 30), (3, 20)):
        got = [sum(r.split == s and int(map_label(r)) == c for r in a) for s in ("train", "val", "test")]
        assert got == split_sizes(n, (0.8, 0.1, 0.1))
    other = split_records(recs, SplitPlan(seed=4))
    assert [r.split for r in other] != [r.split for r in a]


def test_split_needs_three_per_class():
    with pytest.raises(CannotSplitError, match="class3"):
        split_records(originals({1: 5, 2: 5, 3: 2}))
    with pytest.raises(ValueError):
        SplitPlan(fractions=(0.5, 0.5, 0.1))


def test_balanced_splits_have_no_leakage():
    recs = split_records(originals({1: 40, 2: 12, 3: 8}), SplitPlan(seed=1))
    splits = assemble_balanced_splits(recs, {"train": 20, "val": 4, "test": 4}, seed=1)
    assert leakage_violations(splits) == []
    for split, target in (("train", 20), ("val", 4), ("test", 4)):
        counts = [sum(int(map_label(r)) == c for r in splits[split]) for c in (1, 2, 3)]
        assert counts == [target] * 3


def test_leakage_is_detected_through_parents():
    parent = Record("p", "p.wav", 1.0, Status.COVID_POSITIVE, split="train")
    child = Record("p_aug000", "q.wav", 1.0, Status.COVID_POSITIVE, parent_id="p", split="test")
    grandchild = Record("p_aug000_aug000", "r.wav", 1.0, Status.COVID_POSITIVE, parent_id="p_aug000", split="val")
    assert leakage_violations({"train": [parent], "test": [child]}) == ["p"]
    assert leakage_violations({"train": [parent], "test": [child], "val": [grandchild]}) == ["p"]
    clean = Record("p_aug001", "s.wav", 1.0, Status.COVID_POSITIVE, parent_id="p", split="train")
    assert leakage_violations({"train": [parent, clean]}) == []


def test_split_csv(tmp_path):
    recs = split_records(originals({1: 3, 2: 3, 3: 3}))
    splits = {s: RecordSet(r for r in recs if r.split == s) for s in ("train", "val", "test")}
    write_split_csv(tmp_path / "s.csv", splits)
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 9 and set(rows[0]) == {"id", "class", "split", "parent_id"}


def toy_triples(n_per_class, seed, split="train", size=16):
    """Class-dependent image brightness and MFCC mean, so the task is learnable."""
    rng = np.random.default_rng(seed)
    out = []
    for c in (1, 2, 3):
        for i in range(n_per_class):
            img = np.clip(rng.random((size, size, 3)) * 0.5 + 0.2 * c, 0, 1).astype(np.float32)
            mfcc = rng.standard_normal(13) + 2.0 * c
            clinical = tuple(int(b) for b in rng.random(8) < 0.2 * c)
            out.append(FeatureTriple(f"{split}-{c}-{i}", 0, img, mfcc, clinical, c, split))
    return out


@pytest.fixture(scope="module")
def toy():
    return toy_triples(8, 0), toy_triples(3, 1, "val")


def test_zero_learning_rate_leaves_parameters_unchanged(toy):
    model = FusionModel(tiny_config(seed=0))
    before = {name: layer.params[k].copy() for name, layer, k in model.named_parameters()}
    train(model, *toy, TrainParams(batch_size=8, max_epochs=2, patience=5, lr=0.0))
    assert all(np.array_equal(layer.params[k], before[name]) for name, layer, k in model.named_parameters())


def test_loss_decreases_over_full_batch_steps(toy):
    train_set, _ = toy
    model = FusionModel(tiny_config(seed=0, dropout_rate=0.0))
    inputs, labels = make_batch(train_set, 16)
    onehot = np.eye(3)[labels]
    model.mfcc_scaler.fit(inputs[2][:, :, 0])
    opt = nn.Adam(model, lr=1e-3)
    losses = []
    for _ in range(5):
        logits = model.forward_logits(inputs, train=True, rng=np.random.default_rng(0))
        loss, dlogits = nn.softmax_cross_entropy(logits, onehot)
        model.backward_logits(dlogits)
        opt.step()
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_deterministic_per_seed(toy):
    params = TrainParams(batch_size=8, max_epochs=3, patience=3, seed=5)
    _, a = train(FusionModel(tiny_config(seed=0)), *toy, params)
    _, b = train(FusionModel(tiny_config(seed=0)), *toy, params)
    assert a.checkpoint_digest == b.checkpoint_digest and a.best_epoch == b.best_epoch
    assert [e["val_loss"] for e in a.epochs] == [e["val_loss"] for e in b.epochs]


def test_training_learns_toy_task_and_keeps_best_epoch(toy, tmp_path):
    model, rep = train(FusionModel(tiny_config(seed=0)), *toy, TrainParams(batch_size=8, max_epochs=15, patience=15, lr=1e-2))
    aucs = [e["val_micro_auc"] for e in rep.epochs]
    assert rep.best_val_auc == max(aucs) and aucs[rep.best_epoch] == rep.best_val_auc
    assert rep.best_val_auc > 0.9
    assert rep.checkpoint_digest == state_digest(model)
    rep.write_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("epoch,train_loss,train_micro_auc,val_loss,val_micro_auc\n") and "best_epoch" in text


def test_early_stopping_respects_patience(toy):
    _, rep = train(FusionModel(tiny_config(seed=0)), *toy, TrainParams(batch_size=8, max_epochs=20, patience=1))
    assert len(rep.epochs) <= rep.best_epoch + 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_blowup_names_epoch_and_batch(toy):
    model = FusionModel(tiny_config(seed=0))
    model.head.layers[-1].params["W"][:] = np.inf
    with pytest.raises(NumericalError, match="epoch 0, batch 0"):
        train(model, *toy, TrainParams(batch_size=8, max_epochs=1))


def test_recording_examples_average_chunks():
    base = toy_triples(1, 0)[0]
    chunks = [FeatureTriple("r", i, base.heatmap, base.mfcc, base.clinical, 3, "test") for i in range(2)]
    ex = recording_examples(chunks, np.array([[0.2, 0.3, 0.5], [0.4, 0.3, 0.3]]))
    assert len(ex) == 1 and np.allclose(ex[0].probs, [0.3, 0.3, 0.4]) and ex[0].true_label == 3


def test_grid_search(toy, tmp_path):
    params = TrainParams(batch_size=8, max_epochs=2, patience=2)
    one = tiny_config(seed=0)
    best, rows = grid_search([one], *toy, params)
    assert best == one and rows[0].status == "ok"
    bad = one.replace(widths=[4, 0, 8])
    other = one.replace(fusion_widths=[8])
    best, rows = grid_search([bad, one, other], *toy, params)
    assert [r.status for r in rows] == ["failed", "ok", "ok"] and "widths[1]" in rows[0].error
    ok = [r for r in rows if r.status == "ok"]
    top = max(r.val_micro_auc for r in ok)
    winners = [r for r in ok if r.val_micro_auc == top]
    assert best == min(winners, key=lambda r: (r.n_parameters, r.index)).config
    again, _ = grid_search([bad, one, other], *toy, params)
    assert again == best
    write_grid_csv(tmp_path / "g.csv", rows)
    assert len(list(csv.DictReader(open(tmp_path / "g.csv")))) == 3
    with pytest.raises(ValueError):
        grid_search([], *toy, params)
    with pytest.raises(ValueError):
        grid_search([bad], *toy, params)
