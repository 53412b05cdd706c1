"""Deliberately naive reference computations.

Used by ``selftest`` and the test suite to cross-check the fast paths. Nothing
here is shared with the production code path beyond the window and mel
formula definitions.
"""
from __future__ import annotations

import math

import numpy as np


def direct_dft_power(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Power spectrogram by explicit DFT sums over reflect-padded, Hann-windowed frames."""
    pad = n_fft // 2
    xp = np.pad(np.asarray(x, dtype=np.float64), pad, mode="reflect")
    n_frames = 1 + (xp.size - n_fft) // hop
    window = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n_fft) for i in range(n_fft)])
    k = np.arange(n_fft // 2 + 1)[:, None]
    i = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * i / n_fft)
    out = np.empty((n_fft // 2 + 1, n_frames))
    for t in range(n_frames):
        seg = xp[t * hop:t * hop + n_fft] * window
        out[:, t] = np.abs(basis @ seg) ** 2
    return out


def brute_force_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Evaluate each triangle point by point with scalar arithmetic."""
    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    lo_m, hi_m = mel(fmin), mel(fmax)
    edges = [hz(lo_m + (hi_m - lo_m) * j / (n_mels + 1)) for j in range(n_mels + 2)]
    n_bins = n_fft // 2 + 1
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        for b in range(n_bins):
            f = b * sample_rate / n_fft
            if left < f <= centre:
                fb[m, b] = (f - left) / (centre - left)
            elif centre < f < right:
                fb[m, b] = (right - f) / (right - centre)
    return fb


def naive_dct2(v: np.ndarray, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II by the O(n^2) sum."""
    n = len(v)
    out = np.zeros(n_out)
    for k in range(n_out):
        s = sum(v[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out[k] = s * math.sqrt((1.0 if k == 0 else 2.0) / n)
    return out


def naive_mfcc(x: np.ndarray, sample_rate: int, n_fft: int, hop: int, n_mels: int,
               n_mfcc: int = 13, floor: float = 1e-10) -> np.ndarray:
    power = direct_dft_power(x, n_fft, hop)
    fb = brute_force_filterbank(n_mels, n_fft, sample_rate, 0.0, sample_rate / 2)
    mel_db = 10.0 * np.log10(np.maximum(fb @ power, floor))
    frames = [naive_dct2(mel_db[:, t], n_mfcc) for t in range(mel_db.shape[1])]
    return np.mean(frames, axis=0)


def pair_count_auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney statistic: fraction of (pos, neg) pairs ranked correctly, ties 1/2."""
    pos, neg = list(pos_scores), list(neg_scores)
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def pooled_pair_count_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Micro-average oracle: pool (score, is-true-class) over all classes then pair-count."""
    pos, neg = [], []
    for row, y in zip(probs, labels):
        for c, score in enumerate(row):
            (pos if c == y else neg).append(float(score))
    return pair_count_auc(pos, neg)
