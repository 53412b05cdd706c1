"""``coughfuse`` command line: one subcommand per pipeline stage.

Every stage reads and writes inside a work directory (``--out``, or the
``COUGHFUSE_OUT`` environment variable):

    records.csv, skip_report.csv            ingest
    splits.csv, augment_ledger.csv,
    records_balanced.csv                    split
    features.store(.keys)                   featurize
    model.ckpt / model_ablation.ckpt,
    train_report*.csv, grid.csv             train
    eval/, report/                          eval, slice, report

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import augment, ingest, pipeline, selftest
from .audio import read_wav
from .config import RunConfig, override
from .features import FeatureTriple
from .ingest import RecordSet, class_counts, label_records
from .metrics import EvalResult, slice_analysis
from .model import FusionModel, load_model, predict_recording, predict_triples, save_model
from .nn import ConfigurationError, read_checkpoint
from .report import emit_report
from .store import FeatureStore
from .training import (
    NumericalError, SplitPlan, TrainParams, assemble_balanced_splits, chunk_examples,
    grid_search, leakage_violations, recording_examples, split_records, train,
    write_grid_csv, write_split_csv,
)

log = logging.getLogger("coughfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "COUGHFUSE_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _workdir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not _:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg = override(cfg, key, value)
    return cfg


def _stamp(out: Path, cfg: RunConfig) -> None:
    cfg.save(out / "run_config.json")


# --- stages -------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    manifest = pipeline.write_synthetic_corpus(args.n, args.seed, out, cfg)
    print(f"wrote {args.n} synthetic recordings and {manifest}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    records, skipped = ingest.parse_manifest(args.manifest, cfg.ingest.schema, cfg.ingest.column_map)
    filtered = ingest.filter_by_certainty(records, cfg.ingest.certainty_threshold)
    labelled, dropped = label_records(filtered)
    for rid in dropped:
        skipped.add(0, rid, "unlabelled: unknown status and no symptoms")
    ingest.write_records(out / "records.csv", labelled, cfg.ingest.schema)
    skipped.write_csv(out / "skip_report.csv")
    _stamp(out, cfg)
    counts = class_counts(labelled)
    print(f"{len(records)} parsed, {len(filtered)} at certainty >= {cfg.ingest.certainty_threshold}, "
          f"{len(labelled)} records: " + " ".join(f"{c.column}={n}" for c, n in counts.items()))
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    records = ingest.read_records(out / "records.csv", cfg.ingest.schema)
    plan = SplitPlan(tuple(cfg.split.fractions), dict(cfg.split.targets), cfg.seed)
    assigned = split_records(records, plan)
    aug_dir = out / "augmented"
    splits = assemble_balanced_splits(assigned, plan.targets, cfg.seed, audio_dir=aug_dir)
    bad = leakage_violations(splits)
    if bad:
        raise ValueError(f"leakage across splits for {len(bad)} originals, e.g. {bad[:3]}")
    balanced = RecordSet(r for s in ("train", "val", "test") for r in splits[s])
    n_aug = augment.write_augmented_audio(balanced)
    write_split_csv(out / "splits.csv", splits)
    augment.write_augment_ledger(out / "augment_ledger.csv", balanced)
    ingest.write_records(out / "records_balanced.csv", balanced, cfg.ingest.schema)
    _stamp(out, cfg)
    for s in ("train", "val", "test"):
        originals = sum(r.is_original for r in splits[s])
        print(f"{s}: {len(splits[s])} records ({originals} original)")
    print(f"{n_aug} augmented recordings written")
    return EXIT_OK


def cmd_featurize(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    records = ingest.read_records(out / "records_balanced.csv", cfg.ingest.schema)
    store = FeatureStore(out / "features.store", "w")
    n = pipeline.featurize_records(records, store, cfg, workers=args.workers or cfg.workers)
    _stamp(out, cfg)
    print(f"{n} feature triples from {len(records)} records")
    return EXIT_OK


def _load_triples(out: Path) -> dict[str, list[FeatureTriple]]:
    store = FeatureStore(out / "features.store", "r")
    by_split: dict[str, list[FeatureTriple]] = {"train": [], "val": [], "test": []}
    for t in store:
        by_split[t.split].append(t)
    return by_split


def _model_path(out: Path, ablation: bool) -> Path:
    return out / ("model_ablation.ckpt" if ablation else "model.ckpt")


def cmd_train(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    triples = _load_triples(out)
    params = TrainParams(cfg.train.batch_size, cfg.train.max_epochs, cfg.train.patience, None, cfg.seed)
    model_cfg = cfg.model.replace(seed=cfg.seed, ablation=args.ablation)
    if args.grid:
        grid = [model_cfg.replace(**g) for g in json.loads(Path(args.grid).read_text())]
        model_cfg, rows = grid_search(grid, triples["train"], triples["val"], params)
        write_grid_csv(out / "grid.csv", rows)
    model, report = train(FusionModel(model_cfg), triples["train"], triples["val"], params)
    path = _model_path(out, args.ablation)
    digest = save_model(path, model, {"run_config_digest": cfg.digest,
                                      "clinical_schema": list(cfg.ingest.schema)})
    report.checkpoint_digest = digest
    suffix = "_ablation" if args.ablation else ""
    report.write_csv(out / f"train_report{suffix}.csv")
    _stamp(out, cfg)
    print(f"trained {path.name}: best epoch {report.best_epoch}, val micro AUC {report.best_val_auc:.4f}, "
          f"sha256 {digest[:16]}")
    return EXIT_OK


def _evaluate(out: Path, ablation: bool, cfg: RunConfig, meta: RecordSet):
    model = load_model(_model_path(out, ablation))
    test = _load_triples(out)["test"]
    probs = predict_triples(model, test)
    if cfg.eval.level == "chunk":
        return chunk_examples(test, probs)
    return recording_examples(test, probs, {r.id: r for r in meta})


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    meta = ingest.read_records(out / "records_balanced.csv", cfg.ingest.schema)
    name = "resnet_only" if args.ablation else "multi_branch"
    examples = _evaluate(out, args.ablation, cfg, meta)
    result = EvalResult.compute(examples, cfg.eval.threshold)
    emit_report({name: result}, {name: examples}, [], out / "eval" / name,
                {"run_config_digest": cfg.digest, "seed": cfg.seed, "n_test": len(examples)})
    _print_result(name, result)
    return EXIT_OK


def cmd_slice(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    meta = ingest.read_records(out / "records_balanced.csv", cfg.ingest.schema)
    examples = _evaluate(out, False, cfg, meta)
    for slicer in ("age", "gender"):
        rep = slice_analysis(examples, slicer, cfg.eval.threshold)
        for group, r in rep.groups.items():
            micro = "undefined" if r.micro_auc is None else f"{r.micro_auc:.4f}"
            print(f"{slicer} {group}: n={r.n} micro AUC {micro}")
        print(f"{slicer}: {rep.excluded} excluded (field missing or outside groups)")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    out = _workdir(args)
    meta = ingest.read_records(out / "records_balanced.csv", cfg.ingest.schema)
    results, examples, digests = {}, {}, {}
    for name, ablation in (("multi_branch", False), ("resnet_only", True)):
        path = _model_path(out, ablation)
        if not path.exists():
            if not ablation:
                raise FileNotFoundError(f"{path} not found; run `train` first")
            continue
        ex = _evaluate(out, ablation, cfg, meta)
        examples[name] = ex
        results[name] = EvalResult.compute(ex, cfg.eval.threshold)
        digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    slices = [slice_analysis(examples["multi_branch"], s, cfg.eval.threshold) for s in ("age", "gender")]
    summary = {
        "run_config_digest": cfg.digest, "seed": cfg.seed, "level": cfg.eval.level,
        "threshold": cfg.eval.threshold, "checkpoint_sha256": digests,
        "n_test": {k: len(v) for k, v in examples.items()},
    }
    written = emit_report(results, examples, slices, out / "report", summary)
    for name, r in results.items():
        _print_result(name, r)
    print(f"wrote {len(written)} report files to {out / 'report'}")
    return EXIT_OK


def _print_result(name: str, r: EvalResult) -> None:
    def f(v):
        return "n/a" if v is None else f"{v:.4f}"
    c = r.confusion
    print(f"{name}: AUC class1 {f(r.class_auc[1])} class2 {f(r.class_auc[2])} class3 {f(r.class_auc[3])} "
          f"micro {f(r.micro_auc)} macro {f(r.macro_auc)} | sens {f(c.sensitivity)} spec {f(c.specificity)} "
          f"ppv {f(c.ppv)} npv {f(c.npv)}")


def _parse_clinical(text: str | None, schema) -> dict[str, bool]:
    symptoms = {}
    for item in filter(None, (text or "").split(",")):
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in schema:
            raise UsageError(f"unknown clinical field {key!r}; schema is {list(schema)}")
        symptoms[key] = value.strip().lower() in ("1", "true", "yes", "")
    return symptoms


def cmd_predict(args, cfg: RunConfig) -> int:
    _, ck = read_checkpoint(args.model)
    model = load_model(args.model)
    schema = tuple(ck.get("clinical_schema", cfg.ingest.schema))
    rec = ingest.Record(id=Path(args.wav).stem, audio_path=args.wav, cough_certainty=1.0,
                        status=ingest.Status.HEALTHY, symptoms=_parse_clinical(args.clinical, schema))
    run_cfg = cfg if cfg.model.image_size == model.config.image_size else \
        override(cfg, "model.image_size", model.config.image_size)
    run_cfg = override(run_cfg, "ingest.schema", list(schema))
    triples = pipeline.featurize_signal(rec, read_wav(args.wav), run_cfg)
    pred = predict_recording(model, triples)
    decision = "positive" if pred.positive_score >= cfg.eval.threshold else "negative"
    p = pred.probs
    print(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {decision}")
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    ok = True
    for name, passed, detail in selftest.run(quick=not args.full):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coughfuse", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.max_epochs=5")
    common.add_argument("--out", help=f"work directory (default ${OUT_ENV} or .)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="parse, filter and label a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="split originals and balance with augmentation")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("featurize", parents=[common], help="compute feature triples into the store")
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="train the fusion model (or the ablation)")
    p.add_argument("--ablation", action="store_true", help="spectrogram branch only")
    p.add_argument("--grid", help="JSON list of model-config overrides to grid-search")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model on the test split")
    p.add_argument("--ablation", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", parents=[common], help="age and gender slice analysis")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("predict", parents=[common], help="score one WAV file")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--clinical", help="comma list, e.g. fever=1,dry_cough=0")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="full + ablation + slice report files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", parents=[common], help="run the oracle checks")
    p.add_argument("--full", action="store_true", help="full-size oracle runs")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
