"""WAV decoding, half-rate decimation, chunking and synthetic cough audio."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import oaconvolve, resample_poly

from .ingest import ClassLabel

TARGET_RATE = 22050
FILTER_TAPS = 63
CUTOFF_FRACTION = 0.45  # of the output rate


class UnsupportedFormatError(ValueError):
    pass


class CorruptFileError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Signal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("Signal samples must be 1-D")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Signal samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class Chunk:
    signal: Signal
    source_record: str
    index: int


# --- WAV ------------------------------------------------------------------

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def decode_wav(data: bytes) -> Signal:
    """Decode a RIFF/WAVE byte string (16-bit PCM or 32-bit float) to a mono Signal."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnsupportedFormatError("not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = data[pos:pos + 4], struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise CorruptFileError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise CorruptFileError(f"data chunk truncated: {len(body)} of {size} bytes")
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise CorruptFileError("missing fmt chunk")
    if payload is None:
        raise CorruptFileError("missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise CorruptFileError("zero channels")
    if tag == _PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormatError(f"unsupported WAV encoding (format tag {tag}, {bits} bits)")
    if raw.size % channels:
        raise CorruptFileError("sample count is not a multiple of the channel count")
    frames = raw.reshape(-1, channels)
    return Signal(frames.mean(axis=1), rate)


def encode_wav(signal: Signal, sample_format: str = "float32") -> bytes:
    """Encode a mono Signal as ``float32`` or ``pcm16`` WAV bytes."""
    if sample_format == "float32":
        tag, bits = _FLOAT, 32
        payload = signal.samples.astype("<f4").tobytes()
    elif sample_format == "pcm16":
        tag, bits = _PCM, 16
        q = np.clip(np.round(signal.samples * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, signal.sample_rate, signal.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path: str | Path) -> Signal:
    return decode_wav(Path(path).read_bytes())


def write_wav(path: str | Path, signal: Signal, sample_format: str = "float32") -> None:
    Path(path).write_bytes(encode_wav(signal, sample_format))


# --- resampling -------------------------------------------------------------

def lowpass_kernel(cutoff: float, taps: int = FILTER_TAPS) -> np.ndarray:
    """Blackman-windowed sinc low-pass; ``cutoff`` is a fraction of the input rate
    (0.5 = Nyquist). Unit DC gain."""
    n = np.arange(taps) - (taps - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.blackman(taps)
    return h / h.sum()


def downsample_half(signal: Signal) -> Signal:
    """Anti-alias filter then keep every second sample. Odd input rates are first
    resampled to 44100 Hz."""
    if signal.sample_rate % 2:
        ratio = Fraction(2 * TARGET_RATE, signal.sample_rate)
        signal = Signal(resample_poly(signal.samples, ratio.numerator, ratio.denominator), 2 * TARGET_RATE)
    out_rate = signal.sample_rate // 2
    # cutoff is 0.45 x output rate, i.e. 0.225 of the input rate
    h = lowpass_kernel(CUTOFF_FRACTION * out_rate / signal.sample_rate)
    filtered = oaconvolve(signal.samples, h, mode="same")
    return Signal(filtered[::2], out_rate)


# --- chunking -------------------------------------------------------------------

def chunk(signal: Signal, chunk_seconds: float = 2.0, hop_seconds: float = 2.0,
          record_id: str = "") -> list[Chunk]:
    """Cut into equal-length chunks. A trailing remainder of at least half a chunk
    is zero-padded; shorter remainders are dropped (unless it is the only piece)."""
    if chunk_seconds <= 0 or not 0 < hop_seconds <= chunk_seconds:
        raise ValueError("need chunk_seconds > 0 and 0 < hop_seconds <= chunk_seconds")
    n = len(signal)
    if n == 0:
        raise EmptyInputError("cannot chunk an empty signal")
    size = int(round(chunk_seconds * signal.sample_rate))
    hop = int(round(hop_seconds * signal.sample_rate))
    pieces = []
    start = 0
    while start < n:
        seg = signal.samples[start:start + size]
        if seg.size < size:
            if pieces and 2 * seg.size < size:
                break
            seg = np.concatenate([seg, np.zeros(size - seg.size)])
            pieces.append(seg)
            break
        pieces.append(seg)
        if start + size >= n:
            break
        start += hop
    return [Chunk(Signal(p, signal.sample_rate), record_id, i) for i, p in enumerate(pieces)]


# --- synthetic coughs -----------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    sample_rate: int = 44100
    min_seconds: float = 2.0
    max_seconds: float = 8.0
    centers_hz: dict = field(default_factory=lambda: {1: 400.0, 2: 800.0, 3: 1600.0})
    center_jitter: float = 0.08
    # probability that a class-1/class-2 recording borrows the other class's
    # resonance, so audio alone cannot fully separate the two negatives
    negative_confusion: float = 0.3
    peak: float = 0.5


def _resonate(noise: np.ndarray, center: float, rate: int, q: float = 6.0) -> np.ndarray:
    """Band-emphasis via a frequency-domain Gaussian bump around ``center``."""
    spec = np.fft.rfft(noise)
    f = np.fft.rfftfreq(noise.size, 1.0 / rate)
    bw = center / q
    gain = np.exp(-0.5 * ((f - center) / bw) ** 2) + 0.03
    return np.fft.irfft(spec * gain, n=noise.size)


def synth_cough(label: ClassLabel | int, seed: int, params: SynthParams = SynthParams()) -> Signal:
    """Deterministic burst-envelope noise with a class-dependent resonance."""
    label = ClassLabel(label)
    rng = np.random.default_rng([int(label), seed])
    rate = params.sample_rate
    duration = rng.uniform(params.min_seconds, params.max_seconds)
    n = int(round(duration * rate))
    cls = int(label)
    if cls in (1, 2) and rng.random() < params.negative_confusion:
        cls = 3 - cls
    center = params.centers_hz[cls] * (1 + params.center_jitter * rng.uniform(-1, 1))
    t = np.arange(n) / rate
    envelope = np.zeros(n)
    n_bursts = max(1, int(duration / 1.2))
    for onset in np.sort(rng.uniform(0, max(duration - 0.4, 0.05), n_bursts)):
        attack, decay = rng.uniform(0.01, 0.03), rng.uniform(0.08, 0.2)
        rel = t - onset
        env = np.where(rel < 0, 0.0, np.where(rel < attack, rel / attack, np.exp(-(rel - attack) / decay)))
        envelope = np.maximum(envelope, env)
    body = _resonate(rng.standard_normal(n), center, rate)
    x = body * (envelope + 0.02)
    x = x / np.max(np.abs(x)) * params.peak
    return Signal(x, rate)


def band_powers(signal: Signal, centers: list[float], rel_width: float = 1 / 6) -> np.ndarray:
    """Spectral power inside ``center * (1 +/- rel_width)`` for each centre."""
    spec = np.abs(np.fft.rfft(signal.samples)) ** 2
    f = np.fft.rfftfreq(len(signal), 1.0 / signal.sample_rate)
    return np.array([spec[(f >= c * (1 - rel_width)) & (f <= c * (1 + rel_width))].sum() for c in centers])
