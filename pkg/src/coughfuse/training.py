"""Leakage-safe splitting, balanced split assembly, training loop, grid search."""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .augment import balance_with_augmentation
from .features import FeatureTriple
from .ingest import CLASSES, SPLITS, Record, RecordSet, map_label, with_split
from .metrics import ScoredExample, UndefinedAUCError, micro_average_auc
from .model import FusionModel, ModelConfig, aggregate_chunks, make_batch, predict_triples

log = logging.getLogger(__name__)

DEFAULT_TARGETS = {"train": 600, "val": 75, "test": 75}


class CannotSplitError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    targets: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9 or any(f <= 0 for f in self.fractions):
            raise ValueError(f"split fractions must be positive and sum to 1, got {self.fractions}")
        if any(self.targets.get(s, 0) <= 0 for s in SPLITS):
            raise ValueError(f"split targets must be positive for {SPLITS}, got {dict(self.targets)}")


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Floor each share, hand leftovers to the largest remainders (earlier split
    wins ties), then make sure no split is empty."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_records(originals: Iterable[Record], plan: SplitPlan = SplitPlan()) -> RecordSet:
    """Assign every original to train/val/test, stratified by class."""
    originals = list(originals)
    if any(not r.is_original for r in originals):
        raise ValueError("split_records expects original recordings only (no parent_id)")
    by_class: dict[int, list[int]] = {int(c): [] for c in CLASSES}
    for i, r in enumerate(originals):
        by_class[int(map_label(r))].append(i)
    assignment: dict[int, str] = {}
    for label, idx in by_class.items():
        if len(idx) < 3:
            raise CannotSplitError(f"class{label} has {len(idx)} originals; need at least 3")
        rng = np.random.default_rng([plan.seed, label])
        shuffled = [idx[j] for j in rng.permutation(len(idx))]
        start = 0
        for split, size in zip(SPLITS, split_sizes(len(idx), plan.fractions)):
            for i in shuffled[start:start + size]:
                assignment[i] = split
            start += size
    return RecordSet(with_split(r, assignment[i]) for i, r in enumerate(originals))


def assemble_balanced_splits(records: RecordSet, targets: Mapping[str, int] = DEFAULT_TARGETS,
                             seed: int = 0, audio_dir: str | Path | None = None) -> dict[str, RecordSet]:
    """Balance each split separately to ``targets[split]`` records per class."""
    out = {}
    for split in SPLITS:
        members = [r for r in records if r.split == split]
        out[split] = balance_with_augmentation(members, targets[split], seed, audio_dir)
    return out


def root_original(record: Record, records: RecordSet) -> str:
    return records.root_of(record)


def leakage_violations(splits: Mapping[str, Iterable[Record]]) -> list[str]:
    """Original ids reachable (directly or via parents) from more than one split."""
    everything = RecordSet(r for recs in splits.values() for r in recs)
    seen: dict[str, str] = {}
    bad = set()
    for r in everything:
        root = everything.root_of(r)
        if seen.setdefault(root, r.split) != r.split:
            bad.add(root)
    return sorted(bad)


def write_split_csv(path: str | Path, splits: Mapping[str, Iterable[Record]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "split", "parent_id"])
        for split in SPLITS:
            for r in splits.get(split, ()):
                w.writerow([r.id, int(map_label(r)), r.split, r.parent_id or ""])


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainParams:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    lr: float | None = None  # None -> model config lr
    seed: int = 0


@dataclass
class TrainRunReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    checkpoint_digest: str = ""
    wall_time: float = 0.0
    seed: int = 0
    config_digest: str = ""

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_micro_auc", "val_loss", "val_micro_auc"])
            for e in self.epochs:
                w.writerow([e["epoch"]] + [f"{e[k]:.6f}" for k in
                                           ("train_loss", "train_micro_auc", "val_loss", "val_micro_auc")])
            w.writerow([])
            w.writerow(["best_epoch", self.best_epoch])
            w.writerow(["seed", self.seed])
            w.writerow(["config_digest", self.config_digest])
            w.writerow(["checkpoint_digest", self.checkpoint_digest])
            w.writerow(["wall_time_s", f"{self.wall_time:.1f}"])


def recording_examples(triples: Sequence[FeatureTriple], chunk_probs: np.ndarray,
                       meta: Mapping[str, Record] | None = None) -> list[ScoredExample]:
    """Collapse chunk probabilities to one ScoredExample per recording (first-seen order)."""
    rows: dict[str, list[int]] = {}
    for i, t in enumerate(triples):
        rows.setdefault(t.record_id, []).append(i)
    out = []
    for rid, idx in rows.items():
        pred = aggregate_chunks(chunk_probs[idx])
        rec = meta.get(rid) if meta else None
        out.append(ScoredExample(rid, triples[idx[0]].label, tuple(float(p) for p in pred.probs),
                                 rec.age if rec else None, rec.gender if rec else None))
    return out


def chunk_examples(triples: Sequence[FeatureTriple], chunk_probs: np.ndarray) -> list[ScoredExample]:
    return [ScoredExample(t.key, t.label, tuple(float(p) for p in row)) for t, row in zip(triples, chunk_probs)]


def _micro(examples) -> float:
    try:
        return micro_average_auc(examples)
    except UndefinedAUCError:
        return float("nan")


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    batches = [perm[i:i + size] for i in range(0, n, size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        # a batch of one cannot be batch-normalised; fold it into the previous batch
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def evaluate_loss(model: FusionModel, triples: Sequence[FeatureTriple]) -> tuple[float, np.ndarray]:
    probs = predict_triples(model, triples)
    onehot = np.eye(3)[[t.label - 1 for t in triples]]
    return nn.cross_entropy(probs, onehot), probs


def state_digest(model: nn.Layer) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(nn.state_dict(model).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def train(model: FusionModel, train_set: Sequence[FeatureTriple], val_set: Sequence[FeatureTriple],
          params: TrainParams = TrainParams()) -> tuple[FusionModel, TrainRunReport]:
    """Mini-batch Adam on softmax cross-entropy with early stopping on the
    validation micro-average AUC (per recording). Returns the best-validation
    weights, restored into ``model``."""
    start = time.perf_counter()
    rng = np.random.default_rng(params.seed)
    lr = model.config.lr if params.lr is None else params.lr
    if len(train_set) < 2:
        raise ValueError("need at least two training chunks")
    if model.branch3 is not None:
        model.mfcc_scaler.fit(np.stack([t.mfcc for t in train_set]))
    inputs_all, labels_all = make_batch(train_set, model.config.image_size)
    onehot_all = np.eye(3)[labels_all]
    model.zero_grads()
    opt = nn.Adam(model, lr=lr)
    report = TrainRunReport(seed=params.seed, config_digest=model.digest())
    best_state, best_auc, stale = None, -np.inf, 0
    for epoch in range(params.max_epochs):
        losses, seen_probs, seen_idx = [], [], []
        for b, idx in enumerate(_batches(len(train_set), params.batch_size, rng)):
            batch = tuple(a[idx] for a in inputs_all)
            try:
                logits = model.forward_logits(batch, train=True, rng=rng)
                loss, dlogits = nn.softmax_cross_entropy(logits, onehot_all[idx])
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                model.backward_logits(dlogits)
            except FloatingPointError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b} (lr={lr})") from None
            opt.step()
            losses.append(loss * len(idx))
            seen_probs.append(nn.softmax(logits))
            seen_idx.append(idx)
        order = np.concatenate(seen_idx)
        train_examples = chunk_examples([train_set[i] for i in order], np.concatenate(seen_probs))
        val_loss, val_probs = evaluate_loss(model, val_set)
        val_auc = _micro(recording_examples(val_set, val_probs))
        entry = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(train_set)),
                 "train_micro_auc": _micro(train_examples), "val_loss": val_loss, "val_micro_auc": val_auc}
        report.epochs.append(entry)
        log.info("epoch %d: train loss %.4f, val loss %.4f, val micro AUC %.4f",
                 epoch, entry["train_loss"], val_loss, val_auc)
        if val_auc > best_auc:
            best_auc, best_state, stale = val_auc, {k: v.copy() for k, v in nn.state_dict(model).items()}, 0
            report.best_epoch = epoch
        else:
            stale += 1
            if stale >= params.patience:
                break
    if best_state is not None:
        nn.load_state_dict(model, best_state)
    report.best_val_auc = float(best_auc)
    report.checkpoint_digest = state_digest(model)
    report.wall_time = time.perf_counter() - start
    return model, report


@dataclass
class GridRow:
    index: int
    config: ModelConfig
    status: str
    n_parameters: int = 0
    val_micro_auc: float = float("nan")
    error: str = ""


def grid_search(configs: Sequence[ModelConfig], train_set, val_set,
                params: TrainParams = TrainParams()) -> tuple[ModelConfig, list[GridRow]]:
    """Train every config; pick the best validation micro-AUC, ties broken by fewer
    parameters then lower index. Configs that fail are recorded and skipped."""
    if not configs:
        raise ValueError("grid must contain at least one config")
    rows = []
    for i, cfg in enumerate(configs):
        try:
            model = FusionModel(cfg)
        except (nn.ConfigurationError, ValueError) as exc:
            rows.append(GridRow(i, cfg, "failed", error=str(exc)))
            continue
        _, rep = train(model, train_set, val_set, params)
        rows.append(GridRow(i, cfg, "ok", model.num_parameters(), rep.best_val_auc))
    ok = [r for r in rows if r.status == "ok" and np.isfinite(r.val_micro_auc)]
    if not ok:
        raise ValueError("no grid configuration trained successfully")
    best = min(ok, key=lambda r: (-r.val_micro_auc, r.n_parameters, r.index))
    return best.config, rows


def write_grid_csv(path: str | Path, rows: Sequence[GridRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "status", "n_parameters", "val_micro_auc", "config_digest", "error"])
        for r in rows:
            w.writerow([r.index, r.status, r.n_parameters,
                        "" if not np.isfinite(r.val_micro_auc) else f"{r.val_micro_auc:.6f}",
                        nn.config_digest(r.config.to_dict()), r.error])
