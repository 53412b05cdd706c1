"""Small differentiable layer kernel on numpy (float64, NCHW for images).

Every layer caches what it needs during ``forward`` and consumes the cache in
``backward``, which returns the gradient w.r.t. the layer input and stores
parameter gradients in ``layer.grads``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {where}")
    return x


class Layer:
    """Base class. Subclasses fill ``params``/``buffers`` and implement the pair
    ``forward``/``backward``."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def children(self) -> Iterator[tuple[str, "Layer"]]:
        return iter(())

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, train: bool = False, rng=None):
        return self.forward(x, train=train, rng=rng)

    def _pop_cache(self):
        if self._cache is None:
            raise ProtocolError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grads(self) -> None:
        for layer in self.walk():
            for k, p in layer.params.items():
                layer.grads[k] = np.zeros_like(p)

    def walk(self) -> Iterator["Layer"]:
        yield self
        for _, child in self.children():
            yield from child.walk()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, "Layer", str]]:
        """Yield ``(qualified_name, owning_layer, key)`` for every parameter."""
        for k in sorted(self.params):
            yield prefix + k, self, k
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Layer", str]]:
        for k in sorted(self.buffers):
            yield prefix + k, self, k
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(layer.params[k].size for _, layer, k in self.named_parameters())


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["W"] = _he_uniform(rng, (n_in, n_out), n_in)
        self.params["b"] = np.zeros(n_out, dtype=DTYPE)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Dense expects (N, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._pop_cache()
        self.grads["W"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class Conv2d(Layer):
    """Cross-correlation, square kernel, zero padding, no bias (BN follows)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = False):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.params["W"] = _he_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        if bias:
            self.params["b"] = np.zeros(c_out, dtype=DTYPE)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"Conv2d expects (N, {self.c_in}, H, W), got {x.shape}")
        k, s, p = self.k, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, _, ho, wo = win.shape[:4]
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2d input {x.shape} too small for kernel {k}")
        # columns laid out (C*k*k, N*Ho*Wo) so both copies keep the spatial axes innermost
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(self.c_in * k * k, n * ho * wo)
        out = self.params["W"].reshape(self.c_out, -1) @ cols
        if "b" in self.params:
            out += self.params["b"][:, None]
        self._cache = (xp.shape, cols, ho, wo)
        return np.ascontiguousarray(out.reshape(self.c_out, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, dout):
        xp_shape, cols, ho, wo = self._pop_cache()
        k, s, p = self.k, self.stride, self.padding
        n = xp_shape[0]
        dmat = dout.transpose(1, 0, 2, 3).reshape(self.c_out, n * ho * wo)
        self.grads["W"] = (dmat @ cols.T).reshape(self.params["W"].shape)
        if "b" in self.params:
            self.grads["b"] = dmat.sum(axis=1)
        dcols = (self.params["W"].reshape(self.c_out, -1).T @ dmat).reshape(self.c_in, k, k, n, ho, wo)
        dxp = np.zeros((self.c_in, n, xp_shape[2], xp_shape[3]), dtype=DTYPE)
        hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + hspan:s, j:j + wspan:s] += dcols[:, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


class BatchNorm(Layer):
    """Batch normalization over axis 1; for 4-D input statistics are per channel."""

    def __init__(self, n_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.n_features, self.momentum, self.eps = n_features, momentum, eps
        self.params["gamma"] = np.ones(n_features, dtype=DTYPE)
        self.params["beta"] = np.zeros(n_features, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(n_features, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(n_features, dtype=DTYPE)

    def _axes_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"BatchNorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train=False, rng=None):
        if x.shape[1] != self.n_features:
            raise ShapeError(f"BatchNorm expects {self.n_features} features, got {x.shape}")
        axes, bshape = self._axes_shape(x)
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if train:
            m = x.size // self.n_features
            if m < 2:
                raise DegenerateBatchError("batch normalization needs at least 2 values per feature in train mode")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
            mom = self.momentum
            self.buffers["running_mean"] = mom * self.buffers["running_mean"] + (1 - mom) * mu
            self.buffers["running_var"] = mom * self.buffers["running_var"] + (1 - mom) * var
            self._cache = ("train", xhat, inv_std, axes, bshape, m)
        else:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"].reshape(bshape)) * inv_std.reshape(bshape)
            self._cache = ("infer", xhat, inv_std, axes, bshape, None)
        return gamma * xhat + beta

    def backward(self, dout):
        mode, xhat, inv_std, axes, bshape, m = self._pop_cache()
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(bshape)
        if mode == "infer":
            return dxhat * inv_std.reshape(bshape)
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)


class Dropout(Layer):
    """Inverted dropout; identity outside train mode."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._cache = 1.0
            return x
        if rng is None:
            raise ProtocolError("Dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._pop_cache()


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._pop_cache()


class GlobalAvgPool(Layer):
    def forward(self, x, train=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"GlobalAvgPool expects (N, C, H, W), got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._pop_cache()
        return np.broadcast_to(dout[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class GlobalMaxPool(Layer):
    """Ties route the gradient to the first maximal position."""

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"GlobalMaxPool expects (N, C, H, W), got {x.shape}")
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        idx = flat.argmax(axis=2)
        self._cache = (x.shape, idx)
        return np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def backward(self, dout):
        shape, idx = self._pop_cache()
        dx = np.zeros((shape[0], shape[1], shape[2] * shape[3]), dtype=DTYPE)
        np.put_along_axis(dx, idx[..., None], dout[..., None], axis=2)
        return dx.reshape(shape)


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._pop_cache())


class Standardize(Layer):
    """Fixed affine input scaling; statistics are buffers fitted from data."""

    def __init__(self, n_features: int):
        super().__init__()
        self.buffers["mean"] = np.zeros(n_features, dtype=DTYPE)
        self.buffers["scale"] = np.ones(n_features, dtype=DTYPE)

    def fit(self, x: np.ndarray) -> None:
        std = x.std(axis=0)
        self.buffers["mean"] = x.mean(axis=0).astype(DTYPE)
        self.buffers["scale"] = np.where(std > 1e-8, 1.0 / np.maximum(std, 1e-8), 1.0)

    def forward(self, x, train=False, rng=None):
        if x.shape[1:] != self.buffers["mean"].shape:
            raise ShapeError(f"Standardize expects (N, {self.buffers['mean'].size}), got {x.shape}")
        self._cache = True
        return (x - self.buffers["mean"]) * self.buffers["scale"]

    def backward(self, dout):
        self._pop_cache()
        return dout * self.buffers["scale"]


class Softmax(Layer):
    def forward(self, x, train=False, rng=None):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, dout):
        p = self._pop_cache()
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return ((str(i), layer) for i, layer in enumerate(self.layers))

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return _check_finite(x, "Sequential forward")

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return _check_finite(dout, "Sequential backward")


class Parallel(Layer):
    """Feed one input to several branches and concatenate their outputs on axis 1."""

    def __init__(self, *branches: Layer):
        super().__init__()
        self.branches = list(branches)

    def children(self):
        return ((str(i), b) for i, b in enumerate(self.branches))

    def forward(self, x, train=False, rng=None):
        outs = [b.forward(x, train=train, rng=rng) for b in self.branches]
        self._cache = [o.shape[1] for o in outs]
        return np.concatenate(outs, axis=1)

    def backward(self, dout):
        widths = self._pop_cache()
        splits = np.split(dout, np.cumsum(widths)[:-1], axis=1)
        return sum(b.backward(d) for b, d in zip(self.branches, splits))


class ResidualBlock(Layer):
    """Basic residual block: conv3x3-BN-ReLU-conv3x3-BN plus shortcut, then ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.body = Sequential(
            Conv2d(c_in, c_out, 3, rng, stride=stride), BatchNorm(c_out), ReLU(),
            Conv2d(c_out, c_out, 3, rng), BatchNorm(c_out),
        )
        if stride != 1 or c_in != c_out:
            self.shortcut: Layer = Sequential(Conv2d(c_in, c_out, 1, rng, stride=stride), BatchNorm(c_out))
        else:
            self.shortcut = Sequential()
        self.out_relu = ReLU()

    def children(self):
        return iter((("body", self.body), ("shortcut", self.shortcut), ("relu", self.out_relu)))

    def forward(self, x, train=False, rng=None):
        y = self.body.forward(x, train, rng) + self.shortcut.forward(x, train, rng)
        return self.out_relu.forward(y, train, rng)

    def backward(self, dout):
        dy = self.out_relu.backward(dout)
        return self.body.backward(dy) + self.shortcut.backward(dy)


class BottleneckBlock(ResidualBlock):
    """1x1 reduce, 3x3 (strided), 1x1 expand by 4; the ResNet-50 unit."""

    expansion = 4

    def __init__(self, c_in: int, width: int, rng: np.random.Generator, stride: int = 1):
        Layer.__init__(self)
        c_out = width * self.expansion
        self.body = Sequential(
            Conv2d(c_in, width, 1, rng), BatchNorm(width), ReLU(),
            Conv2d(width, width, 3, rng, stride=stride), BatchNorm(width), ReLU(),
            Conv2d(width, c_out, 1, rng), BatchNorm(c_out),
        )
        if stride != 1 or c_in != c_out:
            self.shortcut = Sequential(Conv2d(c_in, c_out, 1, rng, stride=stride), BatchNorm(c_out))
        else:
            self.shortcut = Sequential()
        self.out_relu = ReLU()


class MaxPool2d(Layer):
    """3x3 stride-2 max pooling with padding 1 (ResNet stem)."""

    def __init__(self, kernel: int = 3, stride: int = 2, padding: int = 1):
        super().__init__()
        self.k, self.s, self.p = kernel, stride, padding

    def forward(self, x, train=False, rng=None):
        k, s, p = self.k, self.s, self.p
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=-1)
        self._cache = (xp.shape, idx, win.shape[2], win.shape[3])
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        xp_shape, idx, ho, wo = self._pop_cache()
        k, s, p = self.k, self.s, self.p
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        di, dj = np.divmod(idx, k)
        n, c = dout.shape[:2]
        nn_, cc, hh, ww = np.indices((n, c, ho, wo), sparse=True)
        np.add.at(dxp, (nn_, cc, hh * s + di, ww * s + dj), dout)
        return dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean negative log-probability of the true class, floored at 1e-12."""
    p_true = (probs * onehot).sum(axis=1)
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))


def softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Fused softmax + cross-entropy. Returns ``(loss, dloss/dlogits)``."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = float(-(logp * onehot).sum() / n)
    return loss, (np.exp(logp) - onehot) / n


class Adam:
    """Adaptive-moment optimizer with bias correction, updating arrays in place."""

    def __init__(self, model: Layer, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(layer.params[k]) for name, layer, k in model.named_parameters()}
        self.v = {name: np.zeros_like(m) for name, m in self.m.items()}

    def step(self) -> None:
        self.t += 1
        for name, layer, k in self.model.named_parameters():
            adam_step(layer.params[k], layer.grads[k], self.m[name], self.v[name], self.t,
                      self.lr, self.beta1, self.beta2, self.eps)


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place Adam update of ``param`` with moment buffers ``m``/``v`` at step ``t`` (1-based)."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference round-off by zero.
    """
    a, n = np.asarray(analytic, dtype=DTYPE), np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, indices=None, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated and restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradcheck_layer(layer: Layer, x: np.ndarray, train: bool = True, seed: int = 0,
                    eps: float = 1e-5, max_entries: int | None = None) -> float:
    """Max relative error between analytic and numeric gradients of
    ``sum(w * layer(x))`` for a fixed random ``w``, over the input and all params.

    The dropout rng is re-seeded for every evaluation so masks stay fixed.
    """
    probe = np.random.default_rng(seed + 1)
    out = layer.forward(x, train=train, rng=np.random.default_rng(seed))
    w = probe.standard_normal(out.shape)

    def loss() -> float:
        return float((layer.forward(x, train=train, rng=np.random.default_rng(seed)) * w).sum())

    layer.forward(x, train=train, rng=np.random.default_rng(seed))
    dx = layer.backward(w)
    analytic = [(x, dx)] + [(lay.params[k], lay.grads[k].copy()) for _, lay, k in layer.named_parameters()]
    worst = 0.0
    for arr, g in analytic:
        idx = None
        if max_entries is not None and arr.size > max_entries:
            idx = probe.choice(arr.size, size=max_entries, replace=False)
        num = numeric_gradient(loss, arr, idx, eps)
        sel = slice(None) if idx is None else idx
        worst = max(worst, relative_error(g.reshape(-1)[sel], num.reshape(-1)[sel]))
    return worst


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"CFCK"
CKPT_VERSION = 1


def state_dict(model: Layer) -> dict[str, np.ndarray]:
    state = {name: layer.params[k] for name, layer, k in model.named_parameters()}
    state.update({name: layer.buffers[k] for name, layer, k in model.named_buffers()})
    return state


def load_state_dict(model: Layer, state: dict[str, np.ndarray]) -> None:
    seen = set()
    for name, layer, k in list(model.named_parameters()):
        _assign(layer.params, k, state, name)
        seen.add(name)
    for name, layer, k in list(model.named_buffers()):
        _assign(layer.buffers, k, state, name)
        seen.add(name)
    extra = set(state) - seen
    if extra:
        raise ConfigurationError(f"checkpoint has unknown tensors: {sorted(extra)[:5]}")


def _assign(target, key, state, name):
    if name not in state:
        raise ConfigurationError(f"checkpoint is missing tensor {name}")
    if state[name].shape != target[key].shape:
        raise ShapeError(f"tensor {name}: checkpoint {state[name].shape} vs model {target[key].shape}")
    target[key] = np.array(state[name], dtype=DTYPE)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    """Layout (little-endian): magic ``CFCK``, u16 version, 32-byte sha256 of the
    canonical config JSON, u32 config length + JSON bytes, u32 tensor count,
    then per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims, float64 data."""
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(bytes.fromhex(config_digest(config)))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _decode_checkpoint(memoryview(data))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint: {exc}") from None


def _decode_checkpoint(view: memoryview) -> tuple[dict[str, np.ndarray], dict]:
    if bytes(view[:4]) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    digest = bytes(view[6:38]).hex()
    (clen,) = struct.unpack_from("<I", view, 38)
    pos = 42
    config = json.loads(bytes(view[pos:pos + clen]))
    pos += clen
    if config_digest(config) != digest:
        raise ValueError("checkpoint config digest mismatch")
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(view):
            raise ValueError(f"corrupt checkpoint: tensor {name} is truncated")
        tensors[name] = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(DTYPE)
        pos += 8 * size
    if pos != len(view):
        raise ValueError(f"corrupt checkpoint: {len(view) - pos} trailing bytes")
    return tensors, config


def save_checkpoint(path: str | Path, model: Layer, config: dict) -> str:
    """Write the checkpoint; returns the sha256 digest of the file bytes."""
    data = encode_checkpoint(state_dict(model), config)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
