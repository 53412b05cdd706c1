"""Three-branch fusion network (spectrogram CNN, clinical bits, MFCCs)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import nn
from .audio import EmptyInputError
from .features import N_MFCC, FeatureTriple
from .nn import ConfigurationError, ShapeError

N_CLASSES = 3


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    backbone: str = "small_residual"  # or "resnet50"
    blocks_per_stage: int = 2
    widths: tuple[int, ...] = (8, 16, 32)
    stem_stride: int = 2
    branch1_width: int = 32
    clinical_bits: int = 8
    branch2_widths: tuple[int, ...] = (8, 64)
    branch3_stacks: tuple[tuple[int, ...], ...] = ((32, 16), (32, 16))
    branch3_width: int = 32
    fusion_widths: tuple[int, ...] = (64, 32)
    dropout_rate: float = 0.3
    lr: float = 1e-3
    seed: int = 0
    ablation: bool = False  # image branch + softmax head only

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(data)
        for key in ("widths", "branch2_widths", "fusion_widths"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "branch3_stacks" in kw:
            kw["branch3_stacks"] = tuple(tuple(s) for s in kw["branch3_stacks"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["branch2_widths"] = list(self.branch2_widths)
        d["fusion_widths"] = list(self.fusion_widths)
        d["branch3_stacks"] = [list(s) for s in self.branch3_stacks]
        return d

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def validate(self) -> None:
        def positive(edge: str, value) -> None:
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigurationError(f"{edge} must be a positive integer, got {value!r}")

        if self.backbone not in ("small_residual", "resnet50"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")
        positive("image_size", self.image_size)
        positive("stem_stride", self.stem_stride)
        if self.backbone == "small_residual":
            positive("blocks_per_stage", self.blocks_per_stage)
            if not self.widths:
                raise ConfigurationError("widths must name at least one stage")
            for i, w in enumerate(self.widths):
                positive(f"widths[{i}]", w)
        positive("branch1_width", self.branch1_width)
        positive("clinical_bits", self.clinical_bits)
        for i, w in enumerate(self.branch2_widths):
            positive(f"branch2_widths[{i}]", w)
        if len(self.branch3_stacks) != 2:
            raise ConfigurationError(f"branch3 needs exactly two parallel stacks, got {len(self.branch3_stacks)}")
        for s, stack in enumerate(self.branch3_stacks):
            if not stack:
                raise ConfigurationError(f"branch3_stacks[{s}] is empty")
            for i, w in enumerate(stack):
                positive(f"branch3_stacks[{s}][{i}]", w)
        positive("branch3_width", self.branch3_width)
        for i, w in enumerate(self.fusion_widths):
            positive(f"fusion_widths[{i}]", w)
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")


def _dense_block(n_in: int, n_out: int, rate: float, rng) -> list[nn.Layer]:
    # post-activation batch norm, then dropout
    return [nn.Dense(n_in, n_out, rng), nn.ReLU(), nn.BatchNorm(n_out), nn.Dropout(rate)]


def small_residual(widths: Sequence[int], blocks: int, stem_stride: int, rng) -> tuple[nn.Sequential, int]:
    layers: list[nn.Layer] = [nn.Conv2d(3, widths[0], 3, rng, stride=stem_stride), nn.BatchNorm(widths[0]), nn.ReLU()]
    c = widths[0]
    for stage, w in enumerate(widths):
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 0) else 1
            layers.append(nn.ResidualBlock(c, w, rng, stride=stride))
            c = w
    return nn.Sequential(*layers), c


RESNET50_STAGES = ((3, 64), (4, 128), (6, 256), (3, 512))


def resnet50_backbone(rng) -> tuple[nn.Sequential, int]:
    """ResNet-50 topology without the classifier: 7x7/2 stem, 3x3/2 max pool,
    bottleneck stages of 3, 4, 6, 3 blocks."""
    layers: list[nn.Layer] = [nn.Conv2d(3, 64, 7, rng, stride=2, padding=3), nn.BatchNorm(64), nn.ReLU(), nn.MaxPool2d()]
    c = 64
    for stage, (blocks, width) in enumerate(RESNET50_STAGES):
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 0) else 1
            layers.append(nn.BottleneckBlock(c, width, rng, stride=stride))
            c = width * nn.BottleneckBlock.expansion
    return nn.Sequential(*layers), c


class FusionModel(nn.Layer):
    """Branch 1: CNN -> (GAP | GMP) each with BN + dropout -> concat -> dense.
    Branch 2: dense stack over the clinical bits.
    Branch 3: two parallel dense stacks over the MFCC vector -> concat -> dense.
    Head: concat of branch outputs -> dense stack -> 3-way softmax.

    With ``config.ablation`` only branch 1 feeds a single dense softmax layer.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        rate = config.dropout_rate
        if config.backbone == "resnet50":
            backbone, c = resnet50_backbone(rng)
        else:
            backbone, c = small_residual(config.widths, config.blocks_per_stage, config.stem_stride, rng)
        pools = nn.Parallel(
            nn.Sequential(nn.GlobalAvgPool(), nn.BatchNorm(c), nn.Dropout(rate)),
            nn.Sequential(nn.GlobalMaxPool(), nn.BatchNorm(c), nn.Dropout(rate)),
        )
        self.branch1 = nn.Sequential(backbone, pools, nn.Dense(2 * c, config.branch1_width, rng), nn.ReLU())
        fused = config.branch1_width
        self.branch2 = self.branch3 = None
        if not config.ablation:
            layers, prev = [], config.clinical_bits
            for w in config.branch2_widths:
                layers += _dense_block(prev, w, rate, rng)
                prev = w
            self.branch2 = nn.Sequential(*layers)
            fused += prev
            stacks = []
            for stack in config.branch3_stacks:
                layers, prev = [], N_MFCC
                for w in stack:
                    layers += _dense_block(prev, w, rate, rng)
                    prev = w
                stacks.append(nn.Sequential(*layers))
            tops = sum(s[-1] for s in config.branch3_stacks)
            self.mfcc_scaler = nn.Standardize(N_MFCC)
            self.branch3 = nn.Sequential(nn.Flatten(), self.mfcc_scaler, nn.Parallel(*stacks),
                                         nn.Dense(tops, config.branch3_width, rng), nn.ReLU())
            fused += config.branch3_width
            head, prev = [], fused
            for w in config.fusion_widths:
                head += [nn.Dense(prev, w, rng), nn.ReLU()]
                prev = w
            head.append(nn.Dense(prev, N_CLASSES, rng))
        else:
            head = [nn.Dense(fused, N_CLASSES, rng)]
        self.head = nn.Sequential(*head)
        self.softmax = nn.Softmax()

    def children(self):
        yield "branch1", self.branch1
        if self.branch2 is not None:
            yield "branch2", self.branch2
            yield "branch3", self.branch3
        yield "head", self.head

    def _branches(self):
        return [b for b in (self.branch1, self.branch2, self.branch3) if b is not None]

    def forward_logits(self, inputs, train: bool = False, rng=None) -> np.ndarray:
        image, clinical, mfcc = inputs
        size = self.config.image_size
        if image.ndim != 4 or image.shape[1:] != (3, size, size):
            raise ShapeError(f"image batch must be (N, 3, {size}, {size}), got {image.shape}")
        if not train and image.shape[0] > 1:
            # row by row: BLAS picks different kernels per batch size, and a
            # recording's scores must not depend on its batch companions
            rows = [tuple(None if a is None else a[i:i + 1] for a in inputs) for i in range(image.shape[0])]
            return np.concatenate([self.forward_logits(r) for r in rows])
        parts = [self.branch1.forward(image, train, rng)]
        if self.branch2 is not None:
            if clinical.ndim != 2 or clinical.shape[1] != self.config.clinical_bits:
                raise ShapeError(f"clinical batch must be (N, {self.config.clinical_bits}), got {clinical.shape}")
            if mfcc.shape[1:] not in ((N_MFCC,), (N_MFCC, 1)):
                raise ShapeError(f"mfcc batch must be (N, {N_MFCC}, 1), got {mfcc.shape}")
            parts.append(self.branch2.forward(clinical, train, rng))
            parts.append(self.branch3.forward(mfcc, train, rng))
        self._cache = [p.shape[1] for p in parts]
        logits = self.head.forward(np.concatenate(parts, axis=1), train, rng)
        return nn._check_finite(logits, "model forward")

    def backward_logits(self, dlogits: np.ndarray) -> None:
        widths = self._pop_cache()
        dfused = self.head.backward(dlogits)
        for branch, d in zip(self._branches(), np.split(dfused, np.cumsum(widths)[:-1], axis=1)):
            branch.backward(d)

    def forward(self, inputs, train=False, rng=None) -> np.ndarray:
        return nn.softmax(self.forward_logits(inputs, train, rng))

    def describe(self) -> dict:
        return {"config": self.config.to_dict(), "n_parameters": self.num_parameters()}

    def digest(self) -> str:
        return nn.config_digest(self.describe())


def build_model(config: ModelConfig) -> FusionModel:
    return FusionModel(config)


def build_ablation_resnet_only(config: ModelConfig) -> FusionModel:
    return FusionModel(config.replace(ablation=True))


def make_batch(triples: Sequence[FeatureTriple], image_size: int | None = None):
    """Stack triples into ``((image NCHW, clinical, mfcc(N,13,1)), labels 0..2)``."""
    images = np.stack([t.heatmap for t in triples]).astype(np.float64).transpose(0, 3, 1, 2)
    if image_size is not None and images.shape[2:] != (image_size, image_size):
        raise ShapeError(f"heatmaps are {images.shape[2:]}, model expects {image_size}x{image_size}")
    clinical = np.array([t.clinical for t in triples], dtype=np.float64)
    mfcc = np.stack([t.mfcc for t in triples])[:, :, None]
    labels = np.array([t.label - 1 for t in triples], dtype=int)
    return (images, clinical, mfcc), labels


def predict_triples(model: FusionModel, triples: Sequence[FeatureTriple], batch_size: int = 64) -> np.ndarray:
    """Infer-mode class probabilities, ``(N, 3)``."""
    out = []
    for start in range(0, len(triples), batch_size):
        inputs, _ = make_batch(triples[start:start + batch_size], model.config.image_size)
        out.append(model.forward(inputs, train=False))
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def forward_triple(model: FusionModel, triple: FeatureTriple, train: bool = False, rng=None) -> np.ndarray:
    inputs, _ = make_batch([triple], model.config.image_size)
    return model.forward(inputs, train=train, rng=rng)[0]


@dataclass(frozen=True)
class RecordingPrediction:
    probs: np.ndarray
    label: int  # 1..3
    positive_score: float


def aggregate_chunks(chunk_probs: np.ndarray) -> RecordingPrediction:
    chunk_probs = np.asarray(chunk_probs, dtype=np.float64)
    if chunk_probs.ndim != 2 or chunk_probs.shape[0] == 0:
        raise EmptyInputError("need at least one chunk to aggregate")
    p = chunk_probs.mean(axis=0)
    p = p / p.sum()
    return RecordingPrediction(p, int(np.argmax(p)) + 1, float(p[N_CLASSES - 1]))


def predict_recording(model: FusionModel, triples: Sequence[FeatureTriple]) -> RecordingPrediction:
    """Mean of per-chunk probabilities, renormalised."""
    if not triples:
        raise EmptyInputError("need at least one chunk to predict a recording")
    return aggregate_chunks(predict_triples(model, triples))


def load_model(path) -> FusionModel:
    tensors, config = nn.read_checkpoint(path)
    model = FusionModel(ModelConfig.from_dict(config["model"]))
    nn.load_state_dict(model, tensors)
    return model


def save_model(path, model: FusionModel, extra: dict | None = None) -> str:
    config = {"model": model.config.to_dict(), **(extra or {})}
    return nn.save_checkpoint(path, model, config)


def tiny_config(**changes) -> ModelConfig:
    """16x16 images and halved widths, for full-graph gradient checks."""
    base = ModelConfig(image_size=16, widths=(4, 8, 16), blocks_per_stage=1, branch1_width=16,
                       branch3_stacks=((16, 8), (16, 8)), branch3_width=16, fusion_widths=(32, 16))
    return base.replace(**changes) if changes else base


def random_inputs(config: ModelConfig, n: int, rng: np.random.Generator):
    image = rng.random((n, 3, config.image_size, config.image_size))
    clinical = (rng.random((n, config.clinical_bits)) < 0.5).astype(np.float64)
    # an all-zero row puts the first dense unit exactly on the ReLU kink (zero bias)
    clinical[np.arange(n), rng.integers(config.clinical_bits, size=n)] = 1.0
    mfcc = rng.standard_normal((n, N_MFCC, 1))
    return image, clinical, mfcc


def gradcheck_model(model: FusionModel, inputs, labels: np.ndarray, n_entries: int = 50,
                    seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative error of the cross-entropy gradient over ``n_entries``
    randomly chosen parameter entries, train mode with fixed dropout masks."""
    onehot = np.eye(N_CLASSES)[labels]

    def loss() -> float:
        logits = model.forward_logits(inputs, train=True, rng=np.random.default_rng(seed))
        return nn.softmax_cross_entropy(logits, onehot)[0]

    logits = model.forward_logits(inputs, train=True, rng=np.random.default_rng(seed))
    model.backward_logits(nn.softmax_cross_entropy(logits, onehot)[1])
    entries = [(layer, k) for _, layer, k in model.named_parameters()]
    sizes = np.array([layer.params[k].size for layer, k in entries])
    pick = np.random.default_rng(seed + 7).choice(sizes.sum(), size=min(n_entries, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    analytic, numeric = [], []
    for flat in np.sort(pick):
        j = int(np.searchsorted(bounds, flat, side="right"))
        layer, k = entries[j]
        offset = int(flat - (bounds[j] - sizes[j]))
        analytic.append(layer.grads[k].reshape(-1)[offset])
        numeric.append(nn.numeric_gradient(loss, layer.params[k], [offset], eps).reshape(-1)[offset])
    return nn.relative_error(np.array(analytic), np.array(numeric))
