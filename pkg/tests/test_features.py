import threading

import numpy as np
import pytest

from coughfuse import oracles
from coughfuse.audio import EmptyInputError, Signal, chunk
from coughfuse.features import (
    DB_FLOOR, FeatureTriple, MelConfig, MelSpectrogram, dct_matrix, featurize_chunks, frame,
    hann, heatmap_indices, hz_to_mel, istft, load_lut, mel_filterbank, mel_spectrogram, mel_to_hz,
    mfcc, normalize01, power_spectrogram, render_heatmap, resize_bilinear, stft,
)
from coughfuse.nn import ConfigurationError
from coughfuse.store import FeatureStore, KeyConflictError, KeyNotFoundError, decode_entry, encode_entry

RATE = 22050


def noise(n, seed=0, scale=0.3):
    return np.random.default_rng(seed).standard_normal(n) * scale


def test_hann_is_periodic():
    w = hann(8)
    assert np.allclose(w, 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(8) / 8))


def test_frame_count_and_centering():
    frames = frame(np.arange(10000.0), 2048, 512)
    assert frames.shape == (1 + 10000 // 512, 2048)
    assert frames[0, 1024] == 0.0 and frames[1, 1024] == 512.0


def test_power_spectrogram_of_zeros_is_zero():
    assert not power_spectrogram(np.zeros(4096)).any()


def test_power_spectrogram_rejects_bad_config():
    with pytest.raises(ValueError):
        power_spectrogram(np.zeros(4096), n_fft=1000)
    with pytest.raises(ValueError):
        power_spectrogram(np.zeros(4096), n_fft=512, hop=1024)
    with pytest.raises(EmptyInputError):
        power_spectrogram(np.zeros(0), n_fft=512)


def test_impulse_frame_matches_direct_dft():
    # impulse at the centre of frame 2: its spectrum is the DFT of the windowed impulse
    x = np.zeros(8192)
    x[2 * 512] = 1.0
    power = power_spectrogram(x, 2048, 512)
    assert np.allclose(power, oracles.direct_dft_power(x, 2048, 512), atol=1e-12)
    assert np.allclose(power[:, 2], hann(2048)[1024] ** 2)  # flat: |w[centre]|^2 in every bin


def test_parseval_per_frame():
    x = noise(6000, 1)
    power = power_spectrogram(x, 512, 256)
    frames = frame(x, 512, 256) * hann(512)
    weights = np.r_[1, np.full(255, 2.0), 1]
    assert np.allclose((power * weights[:, None]).sum(0) / 512, (frames ** 2).sum(1), rtol=1e-10)


def test_stft_istft_roundtrip():
    x = noise(5000, 2)
    assert np.allclose(istft(stft(x, 512, 128), 128, len(x)), x, atol=1e-10)


def test_mel_scale_reference_points():
    assert hz_to_mel(0.0) == 0.0
    assert np.isclose(hz_to_mel(700.0), 2595 * np.log10(2))
    assert np.isclose(hz_to_mel(700.0), 781.1702, atol=1e-4)
    f = np.array([50.0, 1000.0, 8000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)


def test_filterbank_matches_brute_force_triangles():
    fb = mel_filterbank(40, 512, RATE)
    ref = oracles.brute_force_filterbank(40, 512, RATE, 0.0, RATE / 2)
    assert np.allclose(fb, ref, atol=1e-12)
    assert np.all(fb >= 0) and np.all(fb.sum(1) > 0)
    centers = mel_to_hz(np.linspace(0, hz_to_mel(RATE / 2), 42))[1:-1]
    bins = np.fft.rfftfreq(512, 1 / RATE)
    # each row peaks on one of the two bins bracketing its centre frequency
    below = np.searchsorted(bins, centers, side="right") - 1
    peak = np.argmax(fb, axis=1)
    assert np.all((peak == below) | (peak == below + 1))


def test_default_filterbank_is_valid():
    fb = mel_filterbank(128, 2048, RATE)
    assert fb.shape == (128, 1025) and np.all(fb.sum(1) > 0)


def test_empty_filter_is_configuration_error():
    with pytest.raises(ConfigurationError, match="empty mel filters"):
        mel_filterbank(128, 256, RATE)
    with pytest.raises(ConfigurationError):
        mel_filterbank(10, 512, RATE, fmin=5000, fmax=4000)


def test_zero_signal_mel_is_floor():
    mel = mel_spectrogram(Signal(np.zeros(RATE), RATE))
    assert np.all(mel.values == 10 * np.log10(DB_FLOOR)) and mel.values[0, 0] == -100.0


def test_tone_at_filter_centre_wins_its_row():
    cfg = MelConfig(n_fft=2048, hop=512, n_mels=40)
    centers = mel_to_hz(np.linspace(0, hz_to_mel(RATE / 2), 42))[1:-1]
    t = np.arange(RATE) / RATE
    for row in (8, 20, 30):
        mel = mel_spectrogram(Signal(0.5 * np.sin(2 * np.pi * centers[row] * t), RATE), cfg)
        assert np.argmax(mel.values[:, 10]) == row


def test_doubling_amplitude_adds_6_02_db():
    x = noise(RATE, 3)
    a = mel_spectrogram(Signal(x, RATE)).values
    b = mel_spectrogram(Signal(2 * x, RATE)).values
    assert np.allclose(b - a, 20 * np.log10(2), atol=1e-6)


def test_dct_matrix_is_orthonormal_and_matches_sum_formula():
    D = dct_matrix(128)
    assert np.allclose(D @ D.T, np.eye(128), atol=1e-12)
    col = np.random.default_rng(4).standard_normal(128)
    assert np.max(np.abs(D @ col - oracles.naive_dct2(col, 128))) < 1e-9


def test_mfcc_of_constant_mel():
    mel = MelSpectrogram(np.full((128, 7), -42.0), 512, RATE)
    c = mfcc(mel)
    assert c.shape == (13,)
    assert np.isclose(c[0], -42.0 * np.sqrt(128)) and np.allclose(c[1:], 0, atol=1e-10)


def test_mfcc_frame_averaging():
    col = np.random.default_rng(5).standard_normal((128, 1))
    one = mfcc(MelSpectrogram(col, 512, RATE))
    two = mfcc(MelSpectrogram(np.hstack([col, col]), 512, RATE))
    assert np.allclose(one, two, atol=1e-12)
    with pytest.raises(ConfigurationError):
        mfcc(MelSpectrogram(col[:12], 512, RATE))


def test_mfcc_matches_naive_composition():
    for seed in range(3):
        x = noise(6000, seed)
        cfg = MelConfig(512, 256, 40)
        fast = mfcc(mel_spectrogram(Signal(x, RATE), cfg))
        slow = oracles.naive_mfcc(x, RATE, 512, 256, 40)
        assert np.max(np.abs(fast - slow)) < 1e-8


def test_lut_is_256_rgb_with_monotone_luminance():
    lut = load_lut()
    assert lut.shape == (256, 3) and lut.dtype == np.uint8
    lum = lut.astype(float) @ [0.2126, 0.7152, 0.0722]
    assert np.all(np.diff(lum) > 0)


def test_heatmap_contract():
    mel = mel_spectrogram(Signal(noise(RATE * 2, 6), RATE))
    img = render_heatmap(mel, 64, 48)
    assert img.shape == (64, 48, 3) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1
    assert np.array_equal(img, render_heatmap(mel, 64, 48))
    with pytest.raises(ValueError):
        render_heatmap(mel, 7, 64)


def test_constant_mel_maps_to_lut_midpoint():
    img = render_heatmap(MelSpectrogram(np.full((128, 40), -12.5), 512, RATE), 32, 32)
    assert np.array_equal(img, np.broadcast_to(load_lut()[128] / np.float32(255), (32, 32, 3)))


def test_heatmap_indices_preserve_cell_order():
    # with no interpolation (same size) indices are a monotone function of dB
    values = np.random.default_rng(7).standard_normal((16, 16)) * 20
    idx = heatmap_indices(MelSpectrogram(values, 512, RATE), 16, 16)[::-1].astype(int)
    order = np.argsort(values, axis=None)
    assert np.all(np.diff(idx.reshape(-1)[order]) >= 0)


def test_low_bands_are_drawn_at_the_bottom():
    values = np.zeros((32, 10))
    values[:4] = 10.0
    idx = heatmap_indices(MelSpectrogram(values, 512, RATE), 32, 32)
    assert idx[-1].min() == 255 and idx[0].max() == 0


def test_bilinear_resize_half_pixel_centres():
    img = np.array([[0.0, 1.0]])
    out = resize_bilinear(img, 1, 4)
    assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])
    assert np.allclose(normalize01(np.array([2.0, 4.0, 3.0])), [0, 1, 0.5])


def triples_for(record_id, n_chunks, seed=0, label=2, split="train"):
    sig = Signal(noise(int(RATE * 2 * n_chunks), seed), RATE)
    return featurize_chunks(record_id, chunk(sig, 2.0, 2.0, record_id), (1, 0, 1), label, split, 32)


def test_featurize_one_triple_per_chunk():
    triples = triples_for("rec", 3)
    assert [t.chunk_index for t in triples] == [0, 1, 2]
    assert [t.key for t in triples] == ["rec#0", "rec#1", "rec#2"]
    assert all(t.label == 2 and t.split == "train" and t.clinical == (1, 0, 1) for t in triples)
    assert triples[0].mfcc.shape == (13,) and triples[0].heatmap.shape == (32, 32, 3)
    with pytest.raises(EmptyInputError):
        featurize_chunks("x", [], (0,), 1, None)


def test_store_roundtrip_is_bit_exact(tmp_path):
    triples = triples_for("rec", 2)
    store = FeatureStore(tmp_path / "f.store", "w")
    for t in triples:
        store.put(t)
    reopened = FeatureStore(tmp_path / "f.store", "r")
    assert reopened.keys() == ["rec#0", "rec#1"] and len(reopened) == 2
    for t in triples:
        assert reopened.get(t.key).same_as(t)
    blob = encode_entry(triples[0])
    back, end = decode_entry(blob)
    assert back.same_as(triples[0]) and end == len(blob)


def test_store_errors(tmp_path):
    t = triples_for("rec", 1)[0]
    store = FeatureStore(tmp_path / "f.store", "w")
    store.put(t)
    with pytest.raises(KeyConflictError):
        store.put(t)
    with pytest.raises(KeyNotFoundError):
        store.get("nope#0")
    with pytest.raises(PermissionError):
        FeatureStore(tmp_path / "f.store", "r").put(t)
    appended = FeatureStore(tmp_path / "f.store", "a")
    with pytest.raises(KeyConflictError):
        appended.put(t)


def test_parallel_writers_match_sequential_digest(tmp_path):
    left = [t for i in range(4) for t in triples_for(f"a{i}", 1, seed=i)]
    right = [t for i in range(4) for t in triples_for(f"b{i}", 1, seed=10 + i)]
    seq = FeatureStore(tmp_path / "seq.store", "w")
    for t in left + right:
        seq.put(t)
    par = FeatureStore(tmp_path / "par.store", "w")
    workers = [threading.Thread(target=lambda ts=ts: [par.put(t) for t in ts]) for ts in (right, left)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    assert par.digest() == seq.digest()
    assert FeatureStore(tmp_path / "par.store", "r").digest() == seq.digest()


def test_triple_equality_helper_detects_changes():
    a = triples_for("rec", 1)[0]
    b = FeatureTriple(a.record_id, a.chunk_index, a.heatmap, a.mfcc + 1e-12, a.clinical, a.label, a.split)
    assert a.same_as(a) and not a.same_as(b)
