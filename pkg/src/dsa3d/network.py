"""Deeply supervised 3D CNN built on a pretrained autoencoder stack.

Layout: conv stages (same-padded conv, activation, max-pool), a fixed
per-feature standardisation of the flattened conv output, then fully
connected stages, then a softmax top head. Every fully connected stage also
feeds an auxiliary affine+softmax head; the training loss is
``top_weight * NLL(top) + sum_h aux_weight_h * NLL(aux_h)``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cae import CaeStack, glorot_uniform
from .nnops import (Activation, KernelBank, ShapeError, conv3d_backward, conv3d_forward,
                    maxpool3d_backward, maxpool3d_forward)
from .optim import Adadelta

NETWORK_MAGIC = b"DSA1"


class NetworkFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    maps: int = 8
    kernel: int = 3
    pool: int = 2
    activation: str = "relu"


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple = (1, 32, 32, 32)
    conv: tuple = (ConvSpec(8), ConvSpec(16), ConvSpec(32))
    fc: tuple = (128, 64)
    n_classes: int = 3
    aux_weights: tuple = (0.3, 0.3)
    top_weight: float = 1.0
    fc_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "conv", tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c)
                                               for c in self.conv))
        object.__setattr__(self, "fc", tuple(int(w) for w in self.fc))
        object.__setattr__(self, "aux_weights", tuple(float(w) for w in self.aux_weights))
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if not self.fc:
            raise ValueError("need at least one fully connected layer")
        if len(self.aux_weights) != len(self.fc):
            raise ValueError(f"{len(self.aux_weights)} auxiliary weights for {len(self.fc)} "
                             "fully connected layers")
        if any(w < 0 or not np.isfinite(w) for w in self.aux_weights):
            raise ValueError("auxiliary weights must be finite and nonnegative")
        if not (self.top_weight > 0 and np.isfinite(self.top_weight)):
            raise ValueError("top weight must be finite and positive")
        if len(self.input_shape) != 4:
            raise ValueError(f"input shape must be (C, D, H, W), got {self.input_shape}")

    def replace(self, **changes) -> "NetworkConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return NetworkConfig(**d)

    def conv_output_shape(self) -> tuple:
        c, *sp = self.input_shape
        for spec in self.conv:
            c = spec.maps
            sp = [-(-s // spec.pool) for s in sp]
        return (c, *sp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [asdict(c) for c in self.conv]
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        d = dict(d)
        d["conv"] = tuple(ConvSpec(**c) for c in d["conv"])
        return cls(**d)


@dataclass
class ConvStage:
    bank: KernelBank
    activation: Activation
    pool: int


@dataclass
class Dense:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray

    @classmethod
    def init(cls, n_in, n_out, rng) -> "Dense":
        return cls(glorot_uniform(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out))


@dataclass
class ForwardResult:
    probs: np.ndarray              # (B, C)
    aux_probs: list                # per head, (B, C)
    features: np.ndarray           # last fully connected activation (B, width)
    top_logits: np.ndarray
    aux_logits: list
    fc_acts: list = field(default_factory=list)   # input to fc1, then each fc output
    conv_cache: list = field(default_factory=list)


@dataclass
class Network:
    config: NetworkConfig
    conv: list
    fc: list
    top: Dense
    aux: list
    # not trained; fitted on training features by fit_normalization()
    feature_shift: np.ndarray = None
    feature_scale: np.ndarray = None

    def __post_init__(self):
        width = int(np.prod(self.config.conv_output_shape()))
        if self.feature_shift is None:
            self.feature_shift = np.zeros(width)
        if self.feature_scale is None:
            self.feature_scale = np.ones(width)

    def fit_normalization(self, features, floor: float = 1e-3) -> None:
        """Standardise each flattened conv feature to zero mean, unit spread on ``features``.

        All conv features are nonnegative after ReLU. Without centring, the
        near sign-sized early steps of adaptive optimisers shift every fc
        pre-activation coherently and can silence the whole layer.
        """
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        self.feature_shift = f.mean(axis=0)
        self.feature_scale = f.std(axis=0) + floor

    @property
    def fc_activation(self) -> Activation:
        return Activation.parse(self.config.fc_activation)

    def conv_parameters(self) -> list[np.ndarray]:
        out = []
        for st in self.conv:
            out += [st.bank.weights, st.bank.biases]
        return out

    def head_parameters(self) -> list[np.ndarray]:
        out = []
        for d in self.fc + [self.top] + self.aux:
            out += [d.weights, d.biases]
        return out

    def parameters(self) -> list[np.ndarray]:
        return self.conv_parameters() + self.head_parameters()

    def copy(self) -> "Network":
        return Network(
            self.config,
            [ConvStage(st.bank.copy(), st.activation, st.pool) for st in self.conv],
            [Dense(d.weights.copy(), d.biases.copy()) for d in self.fc],
            Dense(self.top.weights.copy(), self.top.biases.copy()),
            [Dense(d.weights.copy(), d.biases.copy()) for d in self.aux],
            self.feature_shift.copy(), self.feature_scale.copy())

    def tensors(self) -> list[np.ndarray]:
        """Every stored tensor in serialization order."""
        return self.conv_parameters() + [self.feature_shift, self.feature_scale] + \
            self.head_parameters()

    # -- forward ---------------------------------------------------------

    def conv_features(self, x, keep_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape != self.config.input_shape:
            raise ShapeError(f"input shape {x.shape} != configured {self.config.input_shape}")
        cache = []
        h = x
        for st in self.conv:
            out = conv3d_forward(h, st.bank, st.activation, "same")
            rec = maxpool3d_forward(out, st.pool) if st.pool > 1 else None
            if keep_cache:
                cache.append((h, out, rec))
            h = rec.output if rec is not None else out
        return h.reshape(-1), cache

    def head_forward(self, feats) -> ForwardResult:
        """Normalisation and fully connected part on flattened conv features ``(B, F)``."""
        a = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        a = (a - self.feature_shift) / self.feature_scale
        act = self.fc_activation
        acts = [a]
        aux_logits = []
        for d, head in zip(self.fc, self.aux):
            a = act(a @ d.weights.T + d.biases)
            acts.append(a)
            aux_logits.append(a @ head.weights.T + head.biases)
        top_logits = a @ self.top.weights.T + self.top.biases
        return ForwardResult(_softmax_rows(top_logits), [_softmax_rows(z) for z in aux_logits],
                             a, top_logits, aux_logits, acts)


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(z):
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def network_forward(net: Network, x, keep_cache: bool = False) -> ForwardResult:
    """Single-volume forward pass; probability arrays have a leading batch axis of 1."""
    feats, cache = net.conv_features(x, keep_cache)
    res = net.head_forward(feats[None])
    res.conv_cache = cache
    return res


def predict(net: Network, x):
    """``(class index, probability vector)``; ties go to the lower class index."""
    probs = network_forward(net, x).probs[0]
    return int(np.argmax(probs)), probs


def predict_proba(net: Network, volumes=None, features=None) -> np.ndarray:
    if features is None:
        features = np.stack([net.conv_features(v)[0] for v in volumes])
    return net.head_forward(features).probs


# -- loss -------------------------------------------------------------------

def deep_supervised_loss(out: ForwardResult, true_class, cfg: NetworkConfig):
    """Weighted loss per sample: ``(total (B,), per-head NLL (B, 1 + n_aux))``.

    Column 0 of the per-head array is the top head, then the auxiliary heads
    in fully connected order.
    """
    y = np.atleast_1d(np.asarray(true_class, dtype=np.int64))
    C = out.top_logits.shape[1]
    if np.any((y < 0) | (y >= C)):
        raise IndexError(f"class index out of range for {C} classes: {y}")
    rows = np.arange(len(y))
    heads = [-_log_softmax_rows(out.top_logits)[rows, y]]
    heads += [-_log_softmax_rows(z)[rows, y] for z in out.aux_logits]
    per_head = np.stack(heads, axis=1)
    weights = np.array((cfg.top_weight,) + tuple(cfg.aux_weights))
    total = per_head @ weights
    return total, per_head


def backward(net: Network, out: ForwardResult, true_class, deep_supervision: bool = True,
             conv_grads: bool = False):
    """Gradients of the batch-mean loss w.r.t. network parameters.

    Returns ``(head_grads, conv_grads)`` in :meth:`Network.head_parameters` /
    :meth:`Network.conv_parameters` order (``conv_grads`` is ``None`` unless
    requested; it needs a single-sample forward with ``keep_cache``).
    With ``deep_supervision`` false only the top-head NLL is differentiated.
    """
    cfg = net.config
    y = np.atleast_1d(np.asarray(true_class, dtype=np.int64))
    B = len(y)
    onehot = np.zeros_like(out.probs)
    onehot[np.arange(B), y] = 1.0
    act = net.fc_activation
    dz_top = cfg.top_weight * (out.probs - onehot) / B
    g_top = (dz_top.T @ out.fc_acts[-1], dz_top.sum(axis=0))
    da = dz_top @ net.top.weights
    n = len(net.fc)
    g_fc = [None] * n
    g_aux = [None] * n
    for i in range(n - 1, -1, -1):
        a_out = out.fc_acts[i + 1]
        head = net.aux[i]
        if deep_supervision:
            dz = cfg.aux_weights[i] * (out.aux_probs[i] - onehot) / B
            g_aux[i] = (dz.T @ a_out, dz.sum(axis=0))
            da = da + dz @ head.weights
        else:
            g_aux[i] = (np.zeros_like(head.weights), np.zeros_like(head.biases))
        du = act.backward(a_out, da)
        a_in = out.fc_acts[i]
        g_fc[i] = (du.T @ a_in, du.sum(axis=0))
        da = du @ net.fc[i].weights
    head_grads = []
    for gw, gb in g_fc + [g_top] + g_aux:
        head_grads += [gw, gb]
    if not conv_grads:
        return head_grads, None
    if B != 1 or not out.conv_cache:
        raise ValueError("conv gradients need a single-sample forward with keep_cache=True")
    g = (da / net.feature_scale).reshape(net.config.conv_output_shape())
    cgrads = [None] * (2 * len(net.conv))
    for li in range(len(net.conv) - 1, -1, -1):
        st = net.conv[li]
        h_in, conv_out, rec = out.conv_cache[li]
        if rec is not None:
            g = maxpool3d_backward(rec, g)
        gx, gw, gb = conv3d_backward(h_in, st.bank, st.activation, "same", g, out=conv_out,
                                     need_input_grad=li > 0)
        cgrads[2 * li], cgrads[2 * li + 1] = gw, gb
        g = gx
    return head_grads, cgrads


# -- construction -------------------------------------------------------------

def _fit_kernel(w: np.ndarray, n: int) -> np.ndarray:
    """Center-embed (zero surround) or center-crop a ``(K, J, m, m, m)`` bank to size ``n``."""
    m = w.shape[2]
    if n == m:
        return w.copy()
    if n > m:
        lo = (n - m) // 2
        out = np.zeros(w.shape[:2] + (n, n, n))
        out[:, :, lo:lo + m, lo:lo + m, lo:lo + m] = w
        return out
    lo = (m - n) // 2
    return w[:, :, lo:lo + n, lo:lo + n, lo:lo + n].copy()


def transfer_weights(stack: CaeStack, cfg: NetworkConfig, seed: int = 0, noise: float = 0.0) -> Network:
    """Initialise conv stages from a trained autoencoder stack.

    Kernels are copied, center-embedded or center-cropped to the target size.
    Extra target maps copy randomly chosen source maps (plus ``noise`` times
    the source weight std of Gaussian noise); the following layer splits its
    incoming weights evenly among the copies so the widened stack computes
    the same function at zero noise. Fully connected stages and heads are
    freshly Glorot-initialised.
    """
    if len(cfg.conv) != len(stack):
        raise ShapeError(f"config has {len(cfg.conv)} conv layers, stack has {len(stack)}")
    rng = np.random.default_rng(seed)
    channels = cfg.input_shape[0]
    if stack.layers[0].in_channels != channels:
        raise ShapeError(f"stack expects {stack.layers[0].in_channels} input channels, "
                         f"network input has {channels}")
    in_map = np.arange(channels)
    conv = []
    for layer, spec in zip(stack.layers, cfg.conv):
        src = layer.encoder
        counts = np.bincount(in_map, minlength=src.channels).astype(np.float64)
        w = src.weights[:, in_map] / counts[in_map][None, :, None, None, None]
        w = _fit_kernel(w, spec.kernel)
        if spec.maps >= src.maps:
            out_map = np.concatenate([np.arange(src.maps),
                                      rng.integers(0, src.maps, spec.maps - src.maps)])
        else:
            out_map = np.arange(spec.maps)
        w = w[out_map].copy()
        b = src.biases[out_map].copy()
        extra = spec.maps - src.maps
        if extra > 0 and noise > 0:
            scale = noise * float(np.std(src.weights))
            w[src.maps:] += scale * rng.standard_normal(w[src.maps:].shape)
        conv.append(ConvStage(KernelBank(w, b), Activation.parse(spec.activation), spec.pool))
        in_map = out_map
    flat = int(np.prod(cfg.conv_output_shape()))
    fc, aux = [], []
    width = flat
    for out_w in cfg.fc:
        fc.append(Dense.init(width, out_w, rng))
        width = out_w
    top = Dense.init(width, cfg.n_classes, rng)
    for out_w in cfg.fc:
        aux.append(Dense.init(out_w, cfg.n_classes, rng))
    return Network(cfg, conv, fc, top, aux)


def random_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    """Network with every stage Glorot-initialised (no pretraining)."""
    rng = np.random.default_rng(seed)
    channels = cfg.input_shape[0]
    conv = []
    for spec in cfg.conv:
        v = spec.kernel ** 3
        w = glorot_uniform(rng, (spec.maps, channels, spec.kernel, spec.kernel, spec.kernel),
                           channels * v, spec.maps * v)
        conv.append(ConvStage(KernelBank(w, np.zeros(spec.maps)), Activation.parse(spec.activation),
                              spec.pool))
        channels = spec.maps
    width = int(np.prod(cfg.conv_output_shape()))
    fc = []
    for out_w in cfg.fc:
        fc.append(Dense.init(width, out_w, rng))
        width = out_w
    top = Dense.init(width, cfg.n_classes, rng)
    aux = [Dense.init(w, cfg.n_classes, rng) for w in cfg.fc]
    return Network(cfg, conv, fc, top, aux)


# -- fine-tuning ------------------------------------------------------------------

@dataclass
class EpochRecord:
    loss: float
    accuracy: float


def finetune(net: Network, data, optimizer=None, epochs: int = 40, seed: int = 0,
             freeze_conv: bool = True, batch_size: int = 5, deep_supervision: bool = True,
             features=None, normalize: bool = True) -> list[EpochRecord]:
    """Train with the deep-supervised loss; updates ``net`` in place.

    ``data`` is a list of ``(volume, class)``. With ``freeze_conv`` the conv
    stages are left untouched and their outputs are computed once; pass
    ``features`` (``(N, F)``, one row per item of ``data``) to reuse them.
    With ``normalize`` the feature standardisation is refitted on the
    training set's conv features before the first epoch.
    Each log entry holds the epoch's mean loss and training accuracy, both
    measured on the forward passes that precede each update.
    """
    data = list(data)
    if not data:
        raise ValueError("cannot fine-tune on an empty dataset")
    y = np.array([int(c) for _, c in data], dtype=np.int64)
    C = net.config.n_classes
    if np.any((y < 0) | (y >= C)):
        raise IndexError(f"class index out of range for {C} classes")
    if optimizer is None:
        optimizer = Adadelta()
    rng = np.random.default_rng(seed)
    batch_size = max(1, min(int(batch_size), len(data)))
    if (freeze_conv or normalize) and features is None and epochs > 0:
        features = np.stack([net.conv_features(v)[0] for v, _ in data])
    if normalize and epochs > 0:
        net.fit_normalization(features)
    if freeze_conv:
        params = net.head_parameters()
    else:
        params = net.head_parameters() + net.conv_parameters()
    log = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if freeze_conv:
                out = net.head_forward(features[idx])
                grads, _ = backward(net, out, y[idx], deep_supervision)
                totals, per_head = deep_supervised_loss(out, y[idx], net.config)
                loss_sum += float(totals.sum() if deep_supervision else
                                  net.config.top_weight * per_head[:, 0].sum())
                correct += int(np.sum(np.argmax(out.probs, axis=1) == y[idx]))
            else:
                grads = None
                for i in idx:
                    out = network_forward(net, data[i][0], keep_cache=True)
                    hg, cg = backward(net, out, y[i:i + 1], deep_supervision, conv_grads=True)
                    g = hg + cg
                    grads = g if grads is None else [a + b for a, b in zip(grads, g)]
                    totals, per_head = deep_supervised_loss(out, y[i:i + 1], net.config)
                    loss_sum += float(totals[0] if deep_supervision else
                                      net.config.top_weight * per_head[0, 0])
                    correct += int(np.argmax(out.probs[0]) == y[i])
                grads = [g / len(idx) for g in grads]
            optimizer.step(params, grads)
        log.append(EpochRecord(loss_sum / len(data), correct / len(data)))
    return log


# -- DSA1 serialization -----------------------------------------------------------

def save_network(net: Network, path) -> None:
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(NETWORK_MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for arr in net.tensors():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != NETWORK_MAGIC:
        raise NetworkFormatError(f"{path}: bad magic {raw[:4]!r}")
    (n,) = struct.unpack_from("<I", raw, 4)
    try:
        cfg = NetworkConfig.from_dict(json.loads(raw[8:8 + n].decode()))
    except (ValueError, TypeError, KeyError) as exc:
        raise NetworkFormatError(f"{path}: bad config block ({exc})") from None
    net = random_network(cfg, 0)
    pos = 8 + n
    for arr in net.tensors():
        m = arr.size
        if pos + 4 * m > len(raw):
            raise NetworkFormatError(f"{path}: truncated tensor data")
        arr[...] = np.frombuffer(raw, "<f4", m, pos).reshape(arr.shape)
        pos += 4 * m
    if pos != len(raw):
        raise NetworkFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return net
