"""Quick oracle suite run by ``coughfuse selftest``."""
from __future__ import annotations

import numpy as np

from . import nn, oracles
from .audio import Signal
from .features import MelConfig, mel_spectrogram, mfcc
from .metrics import ScoredExample, binary_auc, micro_average_auc
from .model import FusionModel, gradcheck_model, random_inputs, tiny_config

LAYER_TOL = 1e-4
GRAPH_TOL = 1e-3


def layer_cases(rng: np.random.Generator):
    """(name, layer, input) triples covering every layer kind."""
    img = rng.standard_normal((3, 2, 6, 5))
    vec = rng.standard_normal((5, 4))
    return [
        ("dense", nn.Dense(4, 3, rng), vec),
        ("conv2d", nn.Conv2d(2, 3, 3, rng, stride=1), img),
        ("conv2d_stride2_bias", nn.Conv2d(2, 3, 3, rng, stride=2, bias=True), img),
        ("batchnorm_dense", nn.BatchNorm(4), vec),
        ("batchnorm_spatial", nn.BatchNorm(2), img),
        ("dropout", nn.Dropout(0.3), vec),
        ("relu", nn.ReLU(), vec),
        ("gap", nn.GlobalAvgPool(), img),
        ("gmp", nn.GlobalMaxPool(), img),
        ("maxpool", nn.MaxPool2d(), img),
        ("residual_block", nn.ResidualBlock(2, 3, rng, stride=2), img),
        ("bottleneck_block", nn.BottleneckBlock(2, 2, rng, stride=2), img),
        ("concat", nn.Parallel(nn.Dense(4, 2, rng), nn.Dense(4, 3, rng)), vec),
        ("softmax", nn.Softmax(), vec),
        ("standardize", nn.Standardize(4), vec),
    ]


def check_layers(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: nn.gradcheck_layer(layer, x, train=True, seed=seed) for name, layer, x in layer_cases(rng)}


def check_graph(seed: int = 0, n_entries: int = 50) -> float:
    rng = np.random.default_rng(seed)
    cfg = tiny_config(seed=seed)
    inputs = random_inputs(cfg, 6, rng)
    return gradcheck_model(FusionModel(cfg), inputs, rng.integers(0, 3, 6), n_entries, seed)


def check_mfcc(n_signals: int = 10, seed: int = 0, length: int = 6000) -> float:
    """Max abs difference between pipeline MFCCs and the naive composition."""
    cfg = MelConfig(n_fft=512, hop=256, n_mels=40)
    worst = 0.0
    for i in range(n_signals):
        x = np.random.default_rng([seed, i]).standard_normal(length) * 0.3
        fast = mfcc(mel_spectrogram(Signal(x, 22050), cfg))
        slow = oracles.naive_mfcc(x, 22050, cfg.n_fft, cfg.hop, cfg.n_mels)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    return worst


def check_auc(n_instances: int = 10_000, max_n: int = 50, seed: int = 0) -> float:
    """Max |trapezoid AUC - pair-count AUC| over random instances with ties."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n_pos, n_neg = rng.integers(1, max_n, size=2)
        levels = rng.integers(2, 12)
        pos = rng.integers(0, levels, n_pos) / levels
        neg = rng.integers(0, levels, n_neg) / levels
        scores = np.r_[pos, neg]
        truth = np.r_[np.ones(n_pos, bool), np.zeros(n_neg, bool)]
        worst = max(worst, abs(binary_auc(scores, truth) - oracles.pair_count_auc(pos, neg)))
    return worst


def check_micro(n_sets: int = 50, n: int = 12, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        probs = rng.dirichlet(np.ones(3), size=n).round(2)
        probs[:, 2] = 1 - probs[:, 0] - probs[:, 1]
        labels = np.r_[np.arange(3), rng.integers(0, 3, n - 3)]
        ex = [ScoredExample(str(i), int(y) + 1, tuple(p)) for i, (p, y) in enumerate(zip(probs, labels))]
        worst = max(worst, abs(micro_average_auc(ex) - oracles.pooled_pair_count_auc(probs, labels)))
    return worst


def run(quick: bool = True) -> list[tuple[str, bool, str]]:
    results = []
    for name, err in check_layers().items():
        results.append((f"gradient {name}", err < LAYER_TOL, f"rel err {err:.2e}"))
    err = check_graph()
    results.append(("gradient full graph", err < GRAPH_TOL, f"rel err {err:.2e}"))
    diff = check_mfcc(3 if quick else 10)
    results.append(("mfcc vs naive composition", diff < 1e-8, f"max abs diff {diff:.2e}"))
    diff = check_auc(1000 if quick else 10_000)
    results.append(("trapezoid AUC vs pair count", diff < 1e-9, f"max abs diff {diff:.2e}"))
    diff = check_micro()
    results.append(("micro AUC vs pooled pair count", diff < 1e-9, f"max abs diff {diff:.2e}"))
    return results
