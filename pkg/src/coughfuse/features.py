"""Spectrograms, mel filterbank, MFCCs and heatmap rendering."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

from .audio import EmptyInputError, Signal
from .nn import ConfigurationError

DB_FLOOR = 1e-10
N_MFCC = 13


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames), dB
    hop: int
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame(x: np.ndarray, n_fft: int, hop: int, center: bool = True) -> np.ndarray:
    """Frames as rows, ``(n_frames, n_fft)``; centring uses reflect padding."""
    if x.size == 0:
        raise EmptyInputError("cannot frame an empty signal")
    if center:
        pad = n_fft // 2
        mode = "reflect" if x.size > pad else "constant"
        x = np.pad(x, pad, mode=mode)
    if x.size < n_fft:
        raise EmptyInputError(f"signal of {x.size} samples is shorter than n_fft={n_fft}")
    n_frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(x: np.ndarray, n_fft: int = 2048, hop: int = 512, center: bool = True) -> np.ndarray:
    """Complex STFT, ``(n_fft // 2 + 1, n_frames)``, periodic Hann window."""
    if n_fft & (n_fft - 1):
        raise ConfigurationError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ConfigurationError(f"hop must be in (0, n_fft], got {hop}")
    return np.fft.rfft(frame(np.asarray(x, dtype=np.float64), n_fft, hop, center) * hann(n_fft), axis=1).T


def istft(spec: np.ndarray, hop: int, length: int, center: bool = True) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`, trimmed/padded to ``length``."""
    n_fft = 2 * (spec.shape[0] - 1)
    win = hann(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        y[t * hop:t * hop + n_fft] += frames[t]
        norm[t * hop:t * hop + n_fft] += win ** 2
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    start = n_fft // 2 if center else 0
    y = y[start:start + length]
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    return y


def power_spectrogram(signal: Signal | np.ndarray, n_fft: int = 2048, hop: int = 512) -> np.ndarray:
    x = signal.samples if isinstance(signal, Signal) else signal
    return np.abs(stft(x, n_fft, hop)) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters, ``(n_mels, n_fft // 2 + 1)``, with centres equally spaced
    in mel between ``fmin`` and ``fmax``. Peak weight 1 at each centre."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigurationError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got {fmin}, {fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"{empty.size} empty mel filters (first: {empty[0]}); reduce n_mels or raise n_fft")
    fb.flags.writeable = False  # cached and shared
    return fb


def mel_spectrogram(signal: Signal, config: MelConfig = MelConfig()) -> MelSpectrogram:
    power = power_spectrogram(signal, config.n_fft, config.hop)
    fb = mel_filterbank(config.n_mels, config.n_fft, signal.sample_rate, config.fmin, config.fmax)
    db = 10.0 * np.log10(np.maximum(fb @ power, DB_FLOOR))
    return MelSpectrogram(db, config.hop, signal.sample_rate)


def dct_matrix(n: int, n_out: int | None = None) -> np.ndarray:
    """Orthonormal DCT-II basis, ``(n_out, n)``."""
    n_out = n if n_out is None else n_out
    k = np.arange(n_out)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def mfcc(mel: MelSpectrogram, n_mfcc: int = N_MFCC) -> np.ndarray:
    """First ``n_mfcc`` cepstral coefficients per frame, averaged over frames."""
    if mel.n_mels < n_mfcc:
        raise ConfigurationError(f"need at least {n_mfcc} mel bands, got {mel.n_mels}")
    return (dct_matrix(mel.n_mels, n_mfcc) @ mel.values).mean(axis=1)


# --- heatmap ------------------------------------------------------------------

def load_lut() -> np.ndarray:
    """The shipped 256-entry RGB lookup table as uint8, shape ``(256, 3)``."""
    raw = resources.files("coughfuse").joinpath("data/heatmap_lut.bin").read_bytes()
    return np.frombuffer(raw, dtype=np.uint8).reshape(256, 3)


_LUT: np.ndarray | None = None


def _lut() -> np.ndarray:
    global _LUT
    if _LUT is None:
        _LUT = load_lut().astype(np.float32) / np.float32(255.0)
    return _LUT


def normalize01(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    h, w = img.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    r0, r1, fr = coords(height, h)
    c0, c1, fc = coords(width, w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def heatmap_indices(mel: MelSpectrogram, height: int = 224, width: int = 224) -> np.ndarray:
    """LUT indices (0..255) of the resized, min-max normalised mel image.

    Low mel bands end up at the bottom row, like a spectrogram plot.
    """
    if height < 8 or width < 8:
        raise ValueError(f"heatmap must be at least 8x8, got {height}x{width}")
    scaled = resize_bilinear(normalize01(mel.values)[::-1], height, width)
    return np.clip(np.floor(scaled * 255.0 + 0.5), 0, 255).astype(np.uint8)


def render_heatmap(mel: MelSpectrogram, height: int = 224, width: int = 224) -> np.ndarray:
    """``(height, width, 3)`` float32 image in [0, 1]."""
    return _lut()[heatmap_indices(mel, height, width)]


def hash_key(record_id: str, chunk_index: int) -> str:
    return f"{record_id}#{chunk_index}"


@dataclass(frozen=True, eq=False)
class FeatureTriple:
    record_id: str
    chunk_index: int
    heatmap: np.ndarray  # (H, W, 3) float32
    mfcc: np.ndarray  # (13,) float64
    clinical: tuple[int, ...]
    label: int
    split: str | None

    @property
    def key(self) -> str:
        return hash_key(self.record_id, self.chunk_index)

    def same_as(self, other: "FeatureTriple") -> bool:
        return (self.key == other.key and self.label == other.label and self.split == other.split
                and self.clinical == other.clinical
                and self.heatmap.dtype == other.heatmap.dtype
                and np.array_equal(self.heatmap, other.heatmap)
                and self.mfcc.tobytes() == other.mfcc.tobytes())


def featurize_chunks(record_id: str, chunks: Sequence, clinical: tuple[int, ...], label: int,
                     split: str | None, image_size: int = 224,
                     config: MelConfig = MelConfig()) -> list[FeatureTriple]:
    if not chunks:
        raise EmptyInputError(f"record {record_id} has no chunks")
    out = []
    for ch in chunks:
        mel = mel_spectrogram(ch.signal, config)
        out.append(FeatureTriple(
            record_id=record_id, chunk_index=ch.index,
            heatmap=render_heatmap(mel, image_size, image_size),
            mfcc=mfcc(mel), clinical=tuple(clinical), label=int(label), split=split,
        ))
    return out
