"""Differentiable volumetric kernels.

Arrays are ``(channels, depth, height, width)``. Kernel banks are
``(maps, channels, n, n, n)``. Everything is computed in float64; the hot
loops live in the compiled extension when it is available
(see :mod:`dsa3d._backend`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _backend


class ShapeError(ValueError):
    pass


class Activation(enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    SIGMOID = "sigmoid"

    @classmethod
    def parse(cls, value) -> "Activation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {value!r}; choose from "
                             f"{[a.value for a in cls]}") from None

    def __call__(self, u):
        if self is Activation.RELU:
            return np.maximum(u, 0.0)
        if self is Activation.SIGMOID:
            return _sigmoid(u)
        return u

    def backward(self, out, upstream):
        """Upstream gradient times f'(u), expressed through the output ``out = f(u)``."""
        if self is Activation.RELU:
            return np.where(out > 0.0, upstream, 0.0)
        if self is Activation.SIGMOID:
            return upstream * out * (1.0 - out)
        return upstream


def _sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


ACTIVATION_CODES = {Activation.LINEAR: 0, Activation.RELU: 1, Activation.SIGMOID: 2}
ACTIVATIONS_BY_CODE = {v: k for k, v in ACTIVATION_CODES.items()}


@dataclass
class KernelBank:
    weights: np.ndarray  # (K, J, n, n, n)
    biases: np.ndarray   # (K,)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64).reshape(-1)
        w = self.weights
        if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
            raise ShapeError(f"kernel bank must be (K, J, n, n, n), got {w.shape}")
        if self.biases.shape != (w.shape[0],):
            raise ShapeError(f"expected {w.shape[0]} biases, got {self.biases.shape[0]}")

    @property
    def maps(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> "KernelBank":
        return KernelBank(self.weights.copy(), self.biases.copy())


def flip_kernel(k: KernelBank, biases=None) -> KernelBank:
    """Decoder bank tied to ``k``: spatially reversed, maps and channels swapped.

    The ``(K, J, n, n, n)`` encoder becomes a ``(J, K, n, n, n)`` decoder. The
    decoder has its own biases (zeros unless given), one per input channel.
    """
    w = np.ascontiguousarray(k.weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    if biases is None:
        biases = np.zeros(w.shape[0])
    return KernelBank(w, biases)


def _as4d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected a (C, D, H, W) volume, got shape {x.shape}")
    return x


def _pad_width(n: int, padding: str) -> int:
    if padding == "same":
        if n % 2 == 0:
            raise ShapeError(f"same padding needs an odd kernel size, got {n}")
        return n // 2
    if padding == "valid":
        return 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _padded(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def conv3d_preact(x, k: KernelBank, padding: str = "same", backend=None) -> np.ndarray:
    """Pre-activation convolution output ``W * x + b``."""
    x = _as4d(x)
    if x.shape[0] != k.channels:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel bank expects {k.channels}")
    n = k.size
    p = _pad_width(n, padding)
    xp = _padded(x, p)
    out_sp = tuple(s + 2 * p - n + 1 for s in x.shape[1:])
    if min(out_sp) < 1:
        raise ShapeError(f"input extents {x.shape[1:]} smaller than kernel size {n}")
    out = np.empty((k.maps,) + out_sp)
    _backend.get_kernels(backend).conv3d_forward(xp, k.weights, out)
    out += k.biases[:, None, None, None]
    return out


def conv3d_forward(x, k: KernelBank, act=Activation.LINEAR, padding: str = "same",
                   backend=None) -> np.ndarray:
    return Activation.parse(act)(conv3d_preact(x, k, padding, backend))


def conv3d_backward(x, k: KernelBank, act, padding: str, upstream, out=None,
                    need_input_grad: bool = True, backend=None):
    """Gradients ``(grad_input, grad_weights, grad_biases)`` of :func:`conv3d_forward`.

    ``out`` is the forward output; it is recomputed when not supplied.
    ``grad_input`` is ``None`` when ``need_input_grad`` is false.
    """
    act = Activation.parse(act)
    x = _as4d(x)
    if out is None:
        out = conv3d_forward(x, k, act, padding, backend)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    g = np.ascontiguousarray(act.backward(out, upstream))
    p = _pad_width(k.size, padding)
    xp = _padded(x, p)
    gxp = np.empty_like(xp) if need_input_grad else np.empty((1, 1, 1, 1))
    gw = np.empty_like(k.weights)
    _backend.get_kernels(backend).conv3d_backward(xp, k.weights, g, gxp, gw, need_input_grad)
    gb = g.sum(axis=(1, 2, 3))
    gx = None
    if need_input_grad:
        gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw, gb


@dataclass(frozen=True)
class PoolRecord:
    """Pooled output plus, per output voxel, the flat index of its maximum.

    Indices address the input after high-side zero padding to a multiple of
    the pool size (identical to the input when extents already divide).
    """

    output: np.ndarray
    argmax: np.ndarray
    input_shape: tuple
    padded_shape: tuple
    size: int


def maxpool3d_forward(x, size: int, backend=None) -> PoolRecord:
    if int(size) != size or size < 1:
        raise ValueError(f"pool size must be a positive integer, got {size!r}")
    size = int(size)
    x = _as4d(x)
    C = x.shape[0]
    out_sp = tuple(-(-s // size) for s in x.shape[1:])
    pads = [o * size - s for o, s in zip(out_sp, x.shape[1:])]
    if any(pads):
        xp = np.pad(x, ((0, 0),) + tuple((0, q) for q in pads))
    else:
        xp = np.ascontiguousarray(x)
    out = np.empty((C,) + out_sp)
    arg = np.empty((C,) + out_sp, dtype=np.int64)
    _backend.get_kernels(backend).maxpool3d_forward(xp, size, out, arg)
    return PoolRecord(out, arg, x.shape, xp.shape, size)


def maxpool3d_backward(rec: PoolRecord, upstream, backend=None) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != rec.output.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {rec.output.shape}")
    gin = np.zeros(int(np.prod(rec.padded_shape)))
    _backend.get_kernels(backend).maxpool3d_backward(
        np.ascontiguousarray(rec.argmax.reshape(-1)),
        np.ascontiguousarray(upstream.reshape(-1)), gin)
    gin = gin.reshape(rec.padded_shape)
    C, D, H, W = rec.input_shape
    return np.ascontiguousarray(gin[:, :D, :H, :W])


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def nll_loss(probs, true_class: int):
    """``-log p[true]`` and its gradient w.r.t. the logits that produced ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= int(true_class) < probs.shape[-1]:
        raise IndexError(f"class {true_class} out of range for {probs.shape[-1]} classes")
    p = probs[int(true_class)]
    loss = 0.0 - np.log(p) if p > 0 else np.inf
    grad = probs.copy()
    grad[int(true_class)] -= 1.0
    return float(loss), grad
