"""A small numpy convolutional network with hand-written backpropagation.

Supported layers: conv2d (odd square kernels, "same" or "valid" zero
padding), maxpool2x2, relu, dropout (inverted), flatten, dense and a final
two-way softmax. All arithmetic is float32. Networks are treated as values:
``sgd_step`` and ``train`` return new ``Network`` objects and never mutate
their inputs.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, NumericError, TrainingError, FormatError

log = logging.getLogger(__name__)

DTYPE = np.float32
KINDS = ("conv2d", "maxpool2x2", "relu", "dropout", "flatten", "dense", "softmax")
SCORE_CHUNK = 256


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel_size: int = 3
    padding: str = "same"
    out_features: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.out_channels < 1 or self.kernel_size < 1:
                raise ConfigurationError("conv2d needs out_channels >= 1 and kernel_size >= 1")
            if self.padding not in ("same", "valid"):
                raise ConfigurationError(f"unknown padding mode {self.padding!r}")
            if self.padding == "same" and self.kernel_size % 2 == 0:
                raise ConfigurationError("'same' padding needs an odd kernel size")
        if self.kind == "dense" and self.out_features < 1:
            raise ConfigurationError("dense needs out_features >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.rate}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(out_channels=self.out_channels, kernel_size=self.kernel_size, padding=self.padding)
        elif self.kind == "dense":
            d["out_features"] = self.out_features
        elif self.kind == "dropout":
            d["rate"] = self.rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(out_channels, kernel_size=3, padding="same"):
    return LayerSpec("conv2d", out_channels=out_channels, kernel_size=kernel_size, padding=padding)


def dense(out_features):
    return LayerSpec("dense", out_features=out_features)


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


RELU = LayerSpec("relu")
POOL = LayerSpec("maxpool2x2")
FLATTEN = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")


def reference_architecture(dropout_rate=0.5, widths=(16, 16, 32), hidden=128):
    """The default 12-layer stack used for every cascade stage.

    conv3x3-relu-conv3x3-relu-pool, conv3x3-relu-pool,
    flatten-dense-relu-dropout-dense(2)-softmax.
    """
    c1, c2, c3 = widths
    return [
        conv(c1), RELU, conv(c2), RELU, POOL,
        conv(c3), RELU, POOL,
        FLATTEN, dense(hidden), RELU, dropout(dropout_rate), dense(2), SOFTMAX,
    ]


def compact_architecture(dropout_rate=0.5, widths=(8, 16), hidden=32):
    """A lighter stack for small patches and single-core desk runs."""
    c1, c2 = widths
    return [
        conv(c1), RELU, POOL,
        conv(c2), RELU, POOL,
        FLATTEN, dense(hidden), RELU, dropout(dropout_rate), dense(2), SOFTMAX,
    ]


def infer_shapes(layers: Sequence[LayerSpec], input_shape) -> list[tuple]:
    """Return the output shape of every layer, validating the whole stack."""
    if not layers or layers[-1].kind != "softmax":
        raise ConfigurationError("final layer must be softmax")
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigurationError(f"input shape must be (C, H, W), got {input_shape}")
    shapes = []
    for i, spec in enumerate(layers):
        kind = spec.kind
        if kind == "softmax" and i != len(layers) - 1:
            raise ConfigurationError("softmax is only allowed as the final layer")
        if kind == "conv2d":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: conv2d expects (C, H, W) input, got {shape}")
            c, h, w = shape
            if spec.padding == "valid":
                h, w = h - spec.kernel_size + 1, w - spec.kernel_size + 1
                if h < 1 or w < 1:
                    raise ConfigurationError(f"layer {i}: kernel larger than input {shape}")
            shape = (spec.out_channels, h, w)
        elif kind == "maxpool2x2":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: maxpool2x2 expects (C, H, W) input, got {shape}")
            c, h, w = shape
            if h % 2 or w % 2:
                raise ConfigurationError(f"layer {i}: maxpool2x2 needs even H and W, got {shape}")
            shape = (c, h // 2, w // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(f"layer {i}: dense expects flat input, got {shape}")
            shape = (spec.out_features,)
        elif kind == "softmax":
            if shape != (2,):
                raise ConfigurationError(f"softmax must see exactly 2 logits, got {shape}")
        shapes.append(shape)
    return shapes


def _init_params(layers, input_shape, seed):
    rng = np.random.default_rng(seed)
    params = []
    shape = tuple(input_shape)
    for spec, out_shape in zip(layers, infer_shapes(layers, input_shape)):
        if spec.kind == "conv2d":
            fan_in = shape[0] * spec.kernel_size ** 2
            w = rng.standard_normal((spec.out_channels, shape[0], spec.kernel_size, spec.kernel_size))
            params.append((
                (w * np.sqrt(2.0 / fan_in)).astype(DTYPE),
                np.zeros(spec.out_channels, DTYPE),
            ))
        elif spec.kind == "dense":
            fan_in = shape[0]
            w = rng.standard_normal((spec.out_features, fan_in))
            params.append(((w * np.sqrt(2.0 / fan_in)).astype(DTYPE), np.zeros(spec.out_features, DTYPE)))
        else:
            params.append(())
        shape = out_shape
    return params


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    input_shape: tuple
    params: list = field(repr=False)
    init_seed: int = 0

    @classmethod
    def build(cls, layers, input_shape, init_seed=0) -> "Network":
        layers = tuple(layers)
        input_shape = tuple(int(s) for s in input_shape)
        return cls(layers, input_shape, _init_params(layers, input_shape, init_seed), int(init_seed))

    def with_params(self, params) -> "Network":
        return Network(self.layers, self.input_shape, params, self.init_seed)

    @property
    def n_params(self):
        return sum(p.size for layer in self.params for p in layer)

    @property
    def dtype(self):
        flat = self.flat_params()
        return flat[0].dtype if flat else np.dtype(DTYPE)

    def astype(self, dtype) -> "Network":
        """Copy with every parameter cast; used for float64 gradient checks."""
        return self.with_params([tuple(p.astype(dtype) for p in layer) for layer in self.params])

    def flat_params(self):
        return [p for layer in self.params for p in layer]

    def same_params(self, other: "Network") -> bool:
        a, b = self.flat_params(), other.flat_params()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x, r, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (r, r), axis=(2, 3))
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * r * r)
    return cols, ho, wo


def _conv_forward(x, w, b, padding):
    k, c, r, _ = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ConfigurationError(f"conv2d: input {x.shape} incompatible with weights {w.shape}")
    if padding == "same" and r % 2 == 0:
        raise ConfigurationError("'same' padding needs an odd kernel size")
    pad = r // 2 if padding == "same" else 0
    cols, ho, wo = _im2col(x, r, pad)
    out = cols @ w.reshape(k, -1).T + b
    out = out.reshape(x.shape[0], ho, wo, k).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, pad)


def _conv_backward(dout, w, cache, need_dx=True):
    cols, xshape, pad = cache
    k, c, r, _ = w.shape
    n, _, h, wd = xshape
    ho, wo = dout.shape[2:]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ w.reshape(k, -1)).reshape(n, ho, wo, c, r, r)
    dx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for dy in range(r):
        for dx_ in range(r):
            dx[:, :, dy:dy + ho, dx_:dx_ + wo] += dcols[:, :, :, :, dy, dx_].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx), dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2x2 needs even H and W, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # np.argmax returns the first maximum in row-major window order
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout, cache):
    idx, (n, c, h, w) = cache
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(dx)


def conv2d(x, weights, bias, padding="same"):
    """Cross-correlate ``x`` ([C,H,W] or [N,C,H,W]) with ``weights`` [K,C,R,R]."""
    x = np.asarray(x, DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    weights = np.asarray(weights, DTYPE)
    bias = np.asarray(bias, DTYPE)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3] or bias.shape != (weights.shape[0],):
        raise ConfigurationError(f"bad conv2d weights {weights.shape} / bias {bias.shape}")
    if padding not in ("same", "valid"):
        raise ConfigurationError(f"unknown padding mode {padding!r}")
    out, _ = _conv_forward(x, weights, bias, padding)
    return out[0] if single else out


def maxpool2x2(x):
    x = np.asarray(x, DTYPE)
    single = x.ndim == 3
    out, _ = _pool_forward(x[None] if single else x)
    return out[0] if single else out


def softmax(logits):
    """Row softmax, kept strictly inside (0, 1).

    In float32 a logit gap above ~17 rounds a probability to exactly 1.0;
    the clamp keeps scores distinguishable from certainty.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    info = np.finfo(p.dtype)
    return np.clip(p, info.tiny, 1 - info.epsneg)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# network passes


def _check_batch(net, batch):
    batch = np.asarray(batch)
    if batch.dtype != net.dtype:
        batch = batch.astype(net.dtype)
    if batch.ndim != 4 or batch.shape[1:] != net.input_shape:
        raise ConfigurationError(f"batch shape {batch.shape} does not match network input {net.input_shape}")
    return batch


def _logits(net, x, train, rng, keep_cache):
    caches = []
    for spec, p in zip(net.layers, net.params):
        kind = spec.kind
        cache = None
        if kind == "conv2d":
            x, cache = _conv_forward(x, p[0], p[1], spec.padding)
        elif kind == "maxpool2x2":
            x, cache = _pool_forward(x)
        elif kind == "relu":
            cache = x > 0
            x = x * cache
        elif kind == "dropout":
            if train and spec.rate > 0:
                if rng is None:
                    raise ConfigurationError("train-mode forward through dropout needs an rng")
                cache = (rng.random(x.shape) >= spec.rate).astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
                x = x * cache
        elif kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == "dense":
            cache = x
            x = x @ p[0].T + p[1]
        elif kind == "softmax":
            break
        if keep_cache:
            caches.append(cache)
    return x, caches


def forward(net: Network, batch, mode="infer", rng=None):
    """Class probabilities, shape [N, 2]. ``mode`` is "train" or "infer"."""
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _check_batch(net, batch)
    logits, _ = _logits(net, x, mode == "train", rng, keep_cache=False)
    return softmax(logits)


def predict_proba(net: Network, pixels, chunk=SCORE_CHUNK):
    """Infer-mode class-1 probability for every sample, chunked for memory."""
    pixels = np.asarray(pixels)
    if len(pixels) == 0:
        return np.zeros(0, DTYPE)
    out = [forward(net, pixels[i:i + chunk])[:, 1] for i in range(0, len(pixels), chunk)]
    return np.concatenate(out)


def loss_and_grads(net: Network, batch, labels, rng=None, train=True):
    """Mean cross-entropy and its gradient for every parameter.

    Returns ``(loss, grads)`` where ``grads`` mirrors ``net.params``.
    """
    x = _check_batch(net, batch)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise DataError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n = x.shape[0]
    logits, caches = _logits(net, x, train, rng, keep_cache=True)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1
    d = (d / n).astype(x.dtype)

    grads = [()] * len(net.layers)
    for i in range(len(caches) - 1, -1, -1):
        spec, p, cache = net.layers[i], net.params[i], caches[i]
        kind = spec.kind
        if kind == "dense":
            grads[i] = (d.T @ cache, d.sum(axis=0))
            d = d @ p[0]
        elif kind == "conv2d":
            # the input gradient of the first layer is never used
            d, dw, db = _conv_backward(d, p[0], cache, need_dx=i > 0)
            grads[i] = (dw, db)
        elif kind == "maxpool2x2":
            d = _pool_backward(d, cache)
        elif kind == "relu":
            d = d * cache
        elif kind == "dropout":
            if cache is not None:
                d = d * cache
        elif kind == "flatten":
            d = d.reshape(cache)
    return loss, grads


def sgd_step(net: Network, grads, learning_rate) -> Network:
    if len(grads) != len(net.params):
        raise ConfigurationError("gradient list does not match network layers")
    lr = net.dtype.type(learning_rate)
    new = []
    for p, g in zip(net.params, grads):
        if len(p) != len(g):
            raise ConfigurationError("gradient list does not match network parameters")
        layer = []
        for pi, gi in zip(p, g):
            gi = np.asarray(gi)
            if gi.shape != pi.shape:
                raise ConfigurationError(f"gradient shape {gi.shape} != parameter shape {pi.shape}")
            if not np.isfinite(gi).all():
                raise NumericError("non-finite gradient")
            layer.append((pi - lr * gi.astype(pi.dtype)).astype(pi.dtype))
        new.append(tuple(layer))
    return net.with_params(new)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    dropout_rate: float = 0.5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0, 1)")

    def to_dict(self):
        return dict(self.__dict__)


def train(net: Network, data, cfg: TrainConfig):
    """Mini-batch SGD on ``data`` (anything with ``pixels`` and ``labels``).

    Returns ``(trained_net, loss_trace)`` with one mean loss per epoch.
    """
    x = np.asarray(data.pixels)
    y = np.asarray(data.labels)
    if len(x) == 0:
        raise TrainingError("empty training set")
    if len(np.unique(y)) < 2:
        raise TrainingError(f"training set has a single class ({int(y[0])})")
    if cfg.epochs == 0:
        return net, []
    n = len(x)
    if cfg.batch_size > n:
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds training-set size {n}")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(net, x[idx], y[idx], rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss in epoch {epoch}")
            net = sgd_step(net, grads, cfg.learning_rate)
            total += loss * len(idx)
        trace.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, trace[-1])
    return net, trace


def accuracy(net: Network, data) -> float:
    p = predict_proba(net, data.pixels)
    return float(((p >= 0.5).astype(int) == np.asarray(data.labels)).mean())


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"CSNN"
VERSION = 1
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_PAD_CODE = {"same": 0, "valid": 1}


def network_to_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, net.init_seed & 0xFFFFFFFFFFFFFFFF))
    buf.write(struct.pack("<3I", *net.input_shape))
    buf.write(struct.pack("<I", len(net.layers)))
    for spec in net.layers:
        buf.write(struct.pack("<B", _KIND_CODE[spec.kind]))
        if spec.kind == "conv2d":
            buf.write(struct.pack("<IIB", spec.out_channels, spec.kernel_size, _PAD_CODE[spec.padding]))
        elif spec.kind == "dense":
            buf.write(struct.pack("<I", spec.out_features))
        elif spec.kind == "dropout":
            buf.write(struct.pack("<d", spec.rate))
    for p in net.flat_params():
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated model file", self.pos)
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def network_from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise FormatError("bad magic, not a CSNN model file", 0)
    r.pos = 4
    (version, seed) = r.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported model format version {version}", 4)
    input_shape = r.unpack("<3I")
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        at = r.pos
        (code,) = r.unpack("<B")
        if code >= len(KINDS):
            raise FormatError(f"unknown layer code {code}", at)
        kind = KINDS[code]
        if kind == "conv2d":
            oc, ks, pc = r.unpack("<IIB")
            layers.append(conv(oc, ks, "same" if pc == 0 else "valid"))
        elif kind == "dense":
            layers.append(dense(r.unpack("<I")[0]))
        elif kind == "dropout":
            layers.append(dropout(r.unpack("<d")[0]))
        else:
            layers.append(LayerSpec(kind))
    try:
        template = Network.build(layers, input_shape, 0)
    except ConfigurationError as e:
        raise FormatError(f"inconsistent layer table: {e}", 4) from None
    params = []
    for layer in template.params:
        out = []
        for p in layer:
            at = r.pos
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            if tuple(shape) != p.shape:
                raise FormatError(f"parameter shape {shape} does not match layer table {p.shape}", at)
            nbytes = 4 * p.size
            if r.pos + nbytes > len(data):
                raise FormatError("truncated parameter data", r.pos)
            arr = np.frombuffer(data, dtype="<f4", count=p.size, offset=r.pos).astype(DTYPE).reshape(shape)
            r.pos += nbytes
            out.append(arr)
        params.append(tuple(out))
    if r.pos != len(data):
        raise FormatError("trailing bytes after parameters", r.pos)
    return Network(tuple(layers), tuple(input_shape), params, seed)


def save_network(net: Network, path):
    with open(path, "wb") as f:
        f.write(network_to_bytes(net))


def load_network(path) -> Network:
    with open(path, "rb") as f:
        return network_from_bytes(f.read())
