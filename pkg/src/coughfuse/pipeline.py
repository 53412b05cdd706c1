"""Glue from records to feature triples."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import Signal, SynthParams, chunk, downsample_half, read_wav, synth_cough, write_wav
from .config import RunConfig
from .features import FeatureTriple, MelConfig, featurize_chunks
from .ingest import CLASSES, ClassLabel, Record, encode_clinical, map_label
from .store import FeatureStore

log = logging.getLogger(__name__)


def mel_config(cfg: RunConfig) -> MelConfig:
    f = cfg.features
    return MelConfig(f.n_fft, f.hop, f.n_mels, f.fmin, f.fmax)


def prepare_signal(signal: Signal) -> Signal:
    return downsample_half(signal)


def featurize_record(record: Record, chunks, schema: Sequence[str], image_size: int,
                     config: MelConfig = MelConfig()) -> list[FeatureTriple]:
    return featurize_chunks(record.id, chunks, encode_clinical(record, schema), int(map_label(record)),
                            record.split, image_size, config)


def featurize_signal(record: Record, signal: Signal, cfg: RunConfig) -> list[FeatureTriple]:
    prepared = prepare_signal(signal)
    chunks = chunk(prepared, cfg.audio.chunk_seconds, cfg.audio.hop_seconds, record.id)
    return featurize_record(record, chunks, cfg.ingest.schema, cfg.model.image_size, mel_config(cfg))


def _featurize_path(args) -> list[FeatureTriple]:
    record, cfg = args
    return featurize_signal(record, read_wav(record.audio_path), cfg)


def featurize_records(records: Iterable[Record], store: FeatureStore, cfg: RunConfig,
                      workers: int = 1) -> int:
    """Featurize every record into ``store`` in record order; returns triples written."""
    jobs = [(r, cfg) for r in records]
    n = 0
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_featurize_path, jobs, chunksize=4)
            for triples in results:
                for t in triples:
                    store.put(t)
                    n += 1
    else:
        for job in jobs:
            for t in _featurize_path(job):
                store.put(t)
                n += 1
    log.info("stored %d feature triples", n)
    return n


def write_synthetic_corpus(n: int, seed: int, out_dir, cfg: RunConfig = RunConfig()) -> Path:
    """Write ``n`` synthetic recordings (classes as equal as possible) as 16-bit
    44.1 kHz WAVs plus a COUGHVID-style ``manifest.csv``; returns the manifest path.

    Clinical bits correlate with class: class 1 has none, class 2 at least one,
    class 3 a random subset.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    params = SynthParams(min_seconds=cfg.synth.min_seconds, max_seconds=cfg.synth.max_seconds,
                         negative_confusion=cfg.synth.negative_confusion)
    schema = list(cfg.ingest.schema)
    rng = np.random.default_rng([seed, 1])
    per_class = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    rows = []
    for label, count in zip(CLASSES, per_class):
        for i in range(count):
            rid = f"synth-c{int(label)}-{i:05d}"
            sig = synth_cough(label, seed * 100_003 + i, params)
            write_wav(out / "audio" / f"{rid}.wav", sig, "pcm16")
            if label is ClassLabel.ASYMPTOMATIC_NEGATIVE:
                bits = np.zeros(len(schema), dtype=int)
            elif label is ClassLabel.SYMPTOMATIC_NEGATIVE:
                bits = (rng.random(len(schema)) < 0.3).astype(int)
                if not bits.any():
                    bits[rng.integers(len(schema))] = 1
            else:
                bits = (rng.random(len(schema)) < 0.35).astype(int)
            u = rng.random()
            gender = "male" if u < 0.47 else "female" if u < 0.94 else "other" if u < 0.97 else ""
            age = "" if rng.random() < 0.03 else int(rng.integers(12, 86))
            rows.append([rid, f"audio/{rid}.wav", f"{rng.uniform(0.9, 1.0):.4f}", _SYNTH_STATUS[label],
                         age, gender] + ["True" if b else "False" for b in bits])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["uuid", "audio_path", "cough_detected", "status", "age", "gender"] + schema)
        w.writerows(rows)
    return manifest


_SYNTH_STATUS = {
    ClassLabel.ASYMPTOMATIC_NEGATIVE: "healthy",
    ClassLabel.SYMPTOMATIC_NEGATIVE: "symptomatic",
    ClassLabel.COVID_POSITIVE: "COVID-19",
}
