"""Audio augmentations and minority-class balancing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import resample

from .audio import Signal, read_wav, write_wav
from .features import istft, stft
from .ingest import CLASSES, Record, RecordSet, map_label

KINDS = ("gaussian_noise", "pitch_shift", "time_shift", "time_stretch")
# magnitudes drawn uniformly per child
MAGNITUDE_RANGES = {
    "gaussian_noise": (15.0, 30.0),  # SNR dB
    "pitch_shift": (-2.0, 2.0),  # semitones
    "time_shift": (-0.2, 0.2),  # fraction of length
    "time_stretch": (0.85, 1.15),  # rate
}
PV_N_FFT = 2048
PV_HOP = 512
MAX_SEMITONES = 12.0


class DegenerateSignalError(ValueError):
    pass


class CannotBalanceError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    magnitude: float
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")

    def apply(self, signal: Signal) -> Signal:
        if self.kind == "gaussian_noise":
            return add_gaussian_noise(signal, self.magnitude, self.seed)
        if self.kind == "pitch_shift":
            return pitch_shift(signal, self.magnitude)
        if self.kind == "time_shift":
            return time_shift(signal, self.magnitude, self.seed)
        return time_stretch(signal, self.magnitude)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def add_gaussian_noise(signal: Signal, snr_db: float, seed: int) -> Signal:
    """Add white noise rescaled so the empirical SNR equals ``snr_db`` exactly."""
    if math.isinf(snr_db) and snr_db > 0:
        return signal
    level = rms(signal.samples)
    if level == 0:
        raise DegenerateSignalError("cannot set an SNR against a zero-RMS signal")
    noise = np.random.default_rng(seed).standard_normal(len(signal))
    noise *= level * 10 ** (-snr_db / 20) / rms(noise)
    return Signal(signal.samples + noise, signal.sample_rate)


def phase_vocoder(spec: np.ndarray, rate: float, hop: int) -> np.ndarray:
    """Resample STFT frames at ``rate`` with phase propagation."""
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    padded = np.pad(spec, ((0, 0), (0, 2)))
    lo = steps.astype(int)
    alpha = (steps - lo)[None, :]
    a, b = padded[:, lo], padded[:, lo + 1]
    mag = (1 - alpha) * np.abs(a) + alpha * np.abs(b)
    advance = np.linspace(0, np.pi * hop, n_bins)[:, None]
    dphase = np.angle(b) - np.angle(a) - advance
    dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
    phase = np.angle(spec[:, :1]) + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(advance + dphase, axis=1)[:, :-1]], axis=1)
    return mag * np.exp(1j * phase)


def _stretch(x: np.ndarray, rate: float) -> np.ndarray:
    length = int(round(x.size / rate))
    spec = stft(x, PV_N_FFT, PV_HOP)
    return istft(phase_vocoder(spec, rate, PV_HOP), PV_HOP, length)


def time_stretch(signal: Signal, rate: float) -> Signal:
    """Change duration by ``1 / rate`` keeping pitch (phase vocoder)."""
    if not 0.8 <= rate <= 1.25:
        raise ValueError(f"stretch rate must be in [0.8, 1.25], got {rate}")
    return Signal(_stretch(signal.samples, rate), signal.sample_rate)


def pitch_shift(signal: Signal, semitones: float) -> Signal:
    """Shift pitch by stretching then resampling back to the original length."""
    if abs(semitones) > MAX_SEMITONES:
        raise ValueError(f"pitch shift limited to +/-{MAX_SEMITONES} semitones, got {semitones}")
    rate = 2.0 ** (-semitones / 12.0)
    stretched = _stretch(signal.samples, rate)
    return Signal(resample(stretched, len(signal)), signal.sample_rate)


def time_shift(signal: Signal, shift_fraction: float, seed: int = 0) -> Signal:
    """Circular rotation by ``round(shift_fraction * length)`` samples.

    ``seed`` is accepted for a uniform augmentation signature; the rotation is
    fully determined by the fraction.
    """
    if abs(shift_fraction) > 0.25:
        raise ValueError(f"|shift_fraction| must be <= 0.25, got {shift_fraction}")
    k = int(round(shift_fraction * len(signal)))
    return Signal(np.roll(signal.samples, k), signal.sample_rate)


def draw_spec(rng: np.random.Generator) -> AugmentSpec:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    lo, hi = MAGNITUDE_RANGES[kind]
    return AugmentSpec(kind, float(rng.uniform(lo, hi)), int(rng.integers(2**31 - 1)))


def _group_rng(seed: int, split: str | None, label: int) -> np.random.Generator:
    split_code = {"train": 0, "val": 1, "test": 2, None: 3}[split]
    return np.random.default_rng([seed, split_code, label])


def balance_with_augmentation(records: Iterable[Record], target_per_class: int, seed: int,
                              audio_dir: str | Path | None = None) -> RecordSet:
    """Bring every (split, class) group to exactly ``target_per_class`` records.

    Larger groups are subsampled without replacement (original order kept);
    smaller groups keep every original and gain augmented children, parents
    taken round-robin. Children inherit split and metadata from the parent.
    Child audio paths point next to the parent's audio (or into ``audio_dir``).
    """
    records = list(records)
    if any(r.split is None for r in records):
        raise ValueError("records must be split before balancing")
    if any(not r.is_original for r in records):
        raise ValueError("balancing expects original records only")
    groups: dict[tuple[str, int], list[Record]] = {}
    for r in records:
        groups.setdefault((r.split, int(map_label(r))), []).append(r)
    splits = sorted({r.split for r in records}, key=["train", "val", "test"].index)
    out: list[Record] = []
    for split in splits:
        for label in CLASSES:
            members = groups.get((split, int(label)), [])
            if not members:
                raise CannotBalanceError(f"class {label.column} has no originals in split {split}")
            rng = _group_rng(seed, split, int(label))
            if len(members) >= target_per_class:
                keep = np.sort(rng.choice(len(members), size=target_per_class, replace=False))
                out.extend(members[i] for i in keep)
                continue
            out.extend(members)
            for j in range(target_per_class - len(members)):
                parent = members[j % len(members)]
                spec = draw_spec(rng)
                child_id = f"{parent.id}_aug{j // len(members):03d}"
                base = Path(audio_dir) if audio_dir is not None else Path(parent.audio_path).parent
                out.append(replace(parent, id=child_id, parent_id=parent.id,
                                   audio_path=str(base / f"{child_id}.wav"),
                                   augment=(spec.kind, spec.magnitude, spec.seed)))
    return RecordSet(out)


def spec_of(record: Record) -> AugmentSpec:
    kind, magnitude, seed = record.augment
    return AugmentSpec(kind, float(magnitude), int(seed))


def render_child(record: Record, records: RecordSet) -> Signal:
    """Produce an augmented child's audio from its parent's file."""
    parent = records.get(record.parent_id)
    return spec_of(record).apply(read_wav(parent.audio_path))


def write_augmented_audio(records: RecordSet) -> int:
    """Write every child's WAV (float32); returns the number written."""
    n = 0
    for r in records:
        if r.augment is None:
            continue
        Path(r.audio_path).parent.mkdir(parents=True, exist_ok=True)
        write_wav(r.audio_path, render_child(r, records))
        n += 1
    return n


def write_augment_ledger(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["child_id", "parent_id", "kind", "magnitude", "seed", "split"])
        for r in records:
            if r.augment is not None:
                kind, mag, seed = r.augment
                w.writerow([r.id, r.parent_id, kind, repr(float(mag)), seed, r.split])
