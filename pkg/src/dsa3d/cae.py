"""Tied-weight 3D convolutional autoencoders and greedy stack training.

A layer encodes ``h_k = f(W_k * x + b_k)`` with same padding and decodes
``x_hat = g(sum_k P_k * h_k + c)`` where the decoder bank ``P`` is always
derived from ``W`` by :func:`~dsa3d.nnops.flip_kernel`; it is never stored.
Training minimises the mean over images of ``||x_hat - x||^2`` before any
pooling. Pooling only produces the input of the next layer in a stack.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnops import (ACTIVATION_CODES, ACTIVATIONS_BY_CODE, Activation, KernelBank,
                    ShapeError, conv3d_backward, conv3d_forward, flip_kernel,
                    maxpool3d_forward)
from .optim import Adadelta

STACK_MAGIC = b"CAES"


class StackFormatError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class CaeLayer:
    encoder: KernelBank
    decoder_bias: np.ndarray
    f: Activation = Activation.RELU
    g: Activation = Activation.LINEAR
    pool: int = 2

    def __post_init__(self):
        self.decoder_bias = np.ascontiguousarray(self.decoder_bias, dtype=np.float64).reshape(-1)
        self.f = Activation.parse(self.f)
        self.g = Activation.parse(self.g)
        if self.decoder_bias.shape != (self.encoder.channels,):
            raise ShapeError(f"expected {self.encoder.channels} decoder biases, "
                             f"got {self.decoder_bias.shape[0]}")
        if int(self.pool) != self.pool or self.pool < 1:
            raise ValueError(f"pool size must be >= 1, got {self.pool}")

    @classmethod
    def init(cls, channels: int, maps: int, size: int = 3, f=Activation.RELU,
             g=Activation.LINEAR, pool: int = 2, rng=None) -> "CaeLayer":
        rng = np.random.default_rng(rng)
        vol = size ** 3
        w = glorot_uniform(rng, (maps, channels, size, size, size), channels * vol, maps * vol)
        return cls(KernelBank(w, np.zeros(maps)), np.zeros(channels), f, g, pool)

    @property
    def decoder(self) -> KernelBank:
        return flip_kernel(self.encoder, self.decoder_bias)

    @property
    def in_channels(self) -> int:
        return self.encoder.channels

    @property
    def maps(self) -> int:
        return self.encoder.maps

    def parameters(self) -> list[np.ndarray]:
        return [self.encoder.weights, self.encoder.biases, self.decoder_bias]

    def copy(self) -> "CaeLayer":
        return CaeLayer(self.encoder.copy(), self.decoder_bias.copy(), self.f, self.g, self.pool)


def cae_encode(layer: CaeLayer, x) -> np.ndarray:
    return conv3d_forward(x, layer.encoder, layer.f, "same")


def cae_decode(layer: CaeLayer, h) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[0] != layer.maps:
        raise ShapeError(f"feature volume has {h.shape[0]} maps, layer has {layer.maps}")
    return conv3d_forward(h, layer.decoder, layer.g, "same")


def cae_pool(layer: CaeLayer, h) -> np.ndarray:
    return maxpool3d_forward(h, layer.pool).output if layer.pool > 1 else np.asarray(h, dtype=np.float64)


def reconstruction_error(batch, reconstructions) -> float:
    """Mean over images of the squared l2 norm of ``x_hat - x``."""
    batch = list(batch)
    reconstructions = list(reconstructions)
    if len(batch) != len(reconstructions):
        raise ValueError(f"{len(batch)} images but {len(reconstructions)} reconstructions")
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    for x, xh in zip(batch, reconstructions):
        x = np.asarray(x, dtype=np.float64)
        xh = np.asarray(xh, dtype=np.float64)
        if x.shape != xh.shape:
            raise ShapeError(f"shape mismatch {x.shape} vs {xh.shape}")
        d = xh - x
        total += float(np.dot(d.ravel(), d.ravel()))
    return total / len(batch)


def layer_loss_and_grads(layer: CaeLayer, x):
    """Squared reconstruction error of one image and its gradients.

    Returns ``(loss, [dW, db, dc])``. The encoder gradient is the direct term
    plus the decoder-weight gradient mapped back through the tying flip.
    """
    x = np.asarray(x, dtype=np.float64)
    h = cae_encode(layer, x)
    dec = layer.decoder
    xh = conv3d_forward(h, dec, layer.g, "same")
    r = xh - x
    loss = float(np.dot(r.ravel(), r.ravel()))
    gh, gp, gc = conv3d_backward(h, dec, layer.g, "same", 2.0 * r, out=xh)
    _, gw, gb = conv3d_backward(x, layer.encoder, layer.f, "same", gh, out=h,
                                need_input_grad=False)
    gw += flip_kernel(KernelBank(gp, np.zeros(gp.shape[0]))).weights
    return loss, [gw, gb, gc]


def train_cae_layer(layer: CaeLayer, volumes, optimizer=None, epochs: int = 10,
                    batch_size: int = 1, seed: int = 0) -> list[float]:
    """Minibatch training of one layer in place.

    Returns per-epoch reconstruction error, each entry the mean of the
    per-image losses seen during that epoch (evaluated before each update;
    exact ``E(theta)`` at the epoch start in full-batch mode).
    """
    volumes = [np.asarray(v, dtype=np.float64) for v in volumes]
    if not volumes:
        raise ValueError("cannot train on an empty dataset")
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")
    shape = volumes[0].shape
    for v in volumes:
        if v.shape != shape:
            raise ShapeError(f"all training volumes must share one shape, got {v.shape} and {shape}")
    if optimizer is None:
        optimizer = Adadelta()
    batch_size = max(1, min(int(batch_size), len(volumes)))
    rng = np.random.default_rng(seed)
    params = layer.parameters()
    log = []
    for _ in range(epochs):
        order = rng.permutation(len(volumes))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            acc = [np.zeros_like(p) for p in params]
            for i in idx:
                loss, grads = layer_loss_and_grads(layer, volumes[i])
                total += loss
                for a, g in zip(acc, grads):
                    a += g
            optimizer.step(params, [a / len(idx) for a in acc])
        log.append(total / len(volumes))
    return log


@dataclass
class CaeStack:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_channels != prev.maps:
                raise ShapeError(f"layer expects {cur.in_channels} channels but the previous "
                                 f"layer produces {prev.maps} maps")

    def __len__(self):
        return len(self.layers)

    @classmethod
    def init(cls, channels: int = 1, maps=(8, 16, 32), size=3, pool=2,
             f=Activation.RELU, g=Activation.LINEAR, seed: int = 0) -> "CaeStack":
        n = len(maps)
        sizes = size if isinstance(size, (list, tuple)) else [size] * n
        pools = pool if isinstance(pool, (list, tuple)) else [pool] * n
        rng = np.random.default_rng(seed)
        layers = []
        for k, s, p in zip(maps, sizes, pools):
            layers.append(CaeLayer.init(channels, k, s, f, g, p, rng))
            channels = k
        return cls(layers)

    def encode(self, x, upto: int | None = None) -> np.ndarray:
        """Pooled encoding after ``upto`` layers (all by default)."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:upto]:
            h = cae_pool(layer, cae_encode(layer, h))
        return h


@dataclass
class LayerTraining:
    epochs: int = 10
    batch_size: int = 4
    optimizer: str = "adadelta"
    rho: float = 0.95
    eps: float = 1e-6
    rate: float = 0.01
    seed: int = 0

    def make_optimizer(self):
        from .optim import make_optimizer
        return make_optimizer(self.optimizer, rho=self.rho, eps=self.eps, rate=self.rate)


def train_stack(stack: CaeStack, volumes, configs):
    """Greedy layerwise training.

    Layer 1 trains on the raw volumes, each later layer on the pooled
    encodings of the already trained layer below it. ``configs`` is one
    :class:`LayerTraining` per layer or a single one reused for all.
    Returns ``(stack, shapes, logs)`` where ``shapes`` lists the pooled
    representation shape after each layer.
    """
    if isinstance(configs, LayerTraining):
        configs = [configs] * len(stack)
    if len(configs) != len(stack):
        raise ValueError(f"{len(configs)} training configs for {len(stack)} layers")
    inputs = [np.asarray(v, dtype=np.float64) for v in volumes]
    if not inputs:
        raise ValueError("cannot train on an empty dataset")
    shapes, logs = [], []
    for layer, cfg in zip(stack.layers, configs):
        if inputs[0].shape[0] != layer.in_channels:
            raise ShapeError(f"layer expects {layer.in_channels} channels, "
                             f"inputs have {inputs[0].shape[0]}")
        logs.append(train_cae_layer(layer, inputs, cfg.make_optimizer(), cfg.epochs,
                                    cfg.batch_size, cfg.seed))
        inputs = [cae_pool(layer, cae_encode(layer, x)) for x in inputs]
        shapes.append(inputs[0].shape)
    return stack, shapes, logs


# -- CAES serialization ---------------------------------------------------

_LAYER_HEAD = struct.Struct("<BBIIII")


def save_stack(stack: CaeStack, path) -> None:
    buf = io.BytesIO()
    buf.write(STACK_MAGIC)
    buf.write(struct.pack("<I", len(stack)))
    for layer in stack.layers:
        e = layer.encoder
        buf.write(_LAYER_HEAD.pack(ACTIVATION_CODES[layer.f], ACTIVATION_CODES[layer.g],
                                   layer.pool, e.maps, e.channels, e.size))
        for arr in (e.weights, e.biases, layer.decoder_bias):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_stack(path) -> CaeStack:
    raw = Path(path).read_bytes()
    if raw[:4] != STACK_MAGIC:
        raise StackFormatError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        layers = []
        for _ in range(count):
            fc, gc, pool, K, J, n = _LAYER_HEAD.unpack_from(raw, pos)
            pos += _LAYER_HEAD.size
            arrays = []
            for shape in ((K, J, n, n, n), (K,), (J,)):
                m = int(np.prod(shape))
                if pos + 4 * m > len(raw):
                    raise StackFormatError(f"{path}: truncated tensor data")
                arrays.append(np.frombuffer(raw, "<f4", m, pos).reshape(shape).astype(np.float64))
                pos += 4 * m
            layers.append(CaeLayer(KernelBank(arrays[0], arrays[1]), arrays[2],
                                   ACTIVATIONS_BY_CODE[fc], ACTIVATIONS_BY_CODE[gc], pool))
    except struct.error as exc:
        raise StackFormatError(f"{path}: truncated header ({exc})") from None
    if pos != len(raw):
        raise StackFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return CaeStack(layers)
