"""Pretrain, transfer and fine-tune stages driven by a :class:`RunConfig`.

Source phantoms (unlabeled use only) train the autoencoder stack; target
phantoms are split into stratified folds and each fold gets a freshly
transferred network that is fine-tuned on its training part.
"""

from __future__ import annotations

import hashlib
import logging

import numpy as np

from .cae import CaeStack, LayerTraining, train_stack
from .config import RunConfig
from .evaluation import CrossvalResult, run_crossval
from .network import (ConvSpec, Network, NetworkConfig, finetune, predict_proba,
                      transfer_weights)
from .optim import make_optimizer
from .phantom import Dist, PhantomParams, generate_set
from .volume import Label, TaskSpec, get_task

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed for a named sub-stream of the run seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# sub-stream tags
_TARGET, _SOURCE, _STACK, _TRANSFER, _FINETUNE, _EMBED = range(6)


def phantom_params(cfg: RunConfig, source: bool = False) -> PhantomParams:
    ph = cfg.phantom

    def dist(means, std):
        return {lab: Dist(m, std) for lab, m in zip(Label, means)}

    return PhantomParams(
        grid=ph.grid,
        outer_radius=dist(ph.outer_radius, ph.outer_std),
        shell_thickness=dist(ph.shell_thickness, ph.shell_std),
        cavity_radius=dist(ph.cavity_radius, ph.cavity_std),
        center_jitter=ph.center_jitter,
        noise=ph.noise,
        seed=derive_seed(cfg.seed, _SOURCE if source else _TARGET),
    )


def make_datasets(cfg: RunConfig):
    """``(source samples, target samples)`` as lists of ``(volume, label, subject)``."""
    source = generate_set(phantom_params(cfg, True), cfg.phantom.source_per_class)
    target = generate_set(phantom_params(cfg, False), cfg.phantom.target_per_class)
    return source, target


def layer_training(cfg: RunConfig, seed: int) -> LayerTraining:
    op = cfg.optimizer
    return LayerTraining(epochs=cfg.cae.epochs, batch_size=cfg.cae.batch_size, optimizer=op.method,
                         rho=op.rho, eps=op.eps, rate=op.rate, seed=seed)


def pretrain(cfg: RunConfig, volumes, fold: int | None = None):
    """Greedy stack training on ``volumes``; returns ``(stack, shapes, logs)``."""
    seed = derive_seed(cfg.seed, _STACK) if fold is None else derive_seed(cfg.seed, _STACK, fold)
    ca = cfg.cae
    stack = CaeStack.init(1, ca.maps, ca.kernel, ca.pool, ca.activation, ca.decoder_activation,
                          seed=seed)
    vols = [np.asarray(v, dtype=np.float64)[None] if np.ndim(v) == 3 else np.asarray(v)
            for v in volumes]
    return train_stack(stack, vols, layer_training(cfg, seed))


def network_config(cfg: RunConfig, n_classes: int) -> NetworkConfig:
    nw = cfg.network
    g = cfg.phantom.grid
    conv = tuple(ConvSpec(m, k, p) for m, k, p in zip(nw.maps, nw.kernels, nw.pools))
    return NetworkConfig(input_shape=(1, g, g, g), conv=conv, fc=nw.fc, n_classes=n_classes,
                         aux_weights=nw.aux_weights, top_weight=nw.top_weight)


def make_finetune_optimizer(cfg: RunConfig):
    op = cfg.optimizer
    return make_optimizer(op.method, rho=op.rho, eps=op.eps, rate=op.rate)


def task_subset(task: TaskSpec, labels):
    """Indices of samples taking part in ``task`` and their class indices."""
    idx, y = [], []
    for i, lab in enumerate(labels):
        c = task.class_map[lab]
        if c is not None:
            idx.append(i)
            y.append(c)
    return np.array(idx, dtype=np.int64), np.array(y, dtype=np.int64)


def conv_digest(net: Network) -> str:
    h = hashlib.sha256()
    for arr in net.conv_parameters():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class FeatureCache:
    """Flattened conv features of a fixed volume list, keyed by conv weights.

    Transfer at equal map counts is deterministic, so every fold reuses one
    feature matrix.
    """

    def __init__(self, volumes):
        self.volumes = volumes
        self._store: dict[str, np.ndarray] = {}

    def features(self, net: Network) -> np.ndarray:
        key = conv_digest(net)
        if key not in self._store:
            self._store[key] = np.stack([net.conv_features(v)[0] for v in self.volumes])
        return self._store[key]


def transfer(cfg: RunConfig, stack: CaeStack, n_classes: int, seed_parts=()) -> Network:
    return transfer_weights(stack, network_config(cfg, n_classes),
                            seed=derive_seed(cfg.seed, _TRANSFER, *seed_parts),
                            noise=cfg.network.transfer_noise)


def fit(cfg: RunConfig, net: Network, volumes, y, seed_parts=(), features=None):
    """Fine-tune ``net`` in place on ``(volumes, y)``; returns the epoch log.

    With frozen conv stages ``features`` (one row per volume) may be given
    instead of the volumes, which are then only used if it is ``None``.
    """
    nw = cfg.network
    if features is None and nw.freeze_conv:
        features = np.stack([net.conv_features(v)[0] for v in volumes])
    data = list(zip(volumes if not nw.freeze_conv else [None] * len(y), (int(c) for c in y)))
    return finetune(net, data, make_finetune_optimizer(cfg), epochs=nw.epochs,
                    seed=derive_seed(cfg.seed, _FINETUNE, *seed_parts),
                    freeze_conv=nw.freeze_conv, batch_size=nw.batch_size,
                    features=features, normalize=nw.normalize_features)


class DsaRecipe:
    """Cross-validation recipe: transfer per fold, fine-tune, score the test part.

    ``indices`` maps fold-local sample positions to rows of the target set.
    """

    def __init__(self, cfg: RunConfig, task: TaskSpec, stack: CaeStack, volumes, indices, y,
                 cache: FeatureCache | None = None, source_volumes=None):
        self.cfg = cfg
        self.task = task
        self.stack = stack
        self.volumes = volumes
        self.indices = np.asarray(indices)
        self.y = np.asarray(y)
        self.cache = cache or FeatureCache(volumes)
        self.source_volumes = source_volumes
        self.histories: list = []

    def _stack_for(self, fold: int) -> CaeStack:
        if not self.cfg.run.pretrain_per_fold:
            return self.stack
        if self.source_volumes is None:
            raise ValueError("per-fold pretraining needs the source volumes")
        return pretrain(self.cfg, self.source_volumes, fold)[0]

    def __call__(self, train, test, fold):
        cfg = self.cfg
        n = self.task.n_classes
        stack = self._stack_for(fold)
        rows_tr, rows_te = self.indices[train], self.indices[test]
        net = transfer(cfg, stack, n, (fold,))
        if cfg.network.freeze_conv:
            feats = self.cache.features(net)
            hist = fit(cfg, net, None, self.y[train], (fold,), features=feats[rows_tr])
            probs = predict_proba(net, features=feats[rows_te])
        else:
            hist = fit(cfg, net, [self.volumes[i] for i in rows_tr], self.y[train], (fold,))
            probs = predict_proba(net, volumes=[self.volumes[i] for i in rows_te])
        self.histories.append(hist)
        log.info("fold %d: final train loss %.4f acc %.3f", fold, hist[-1].loss if hist else
                 float("nan"), hist[-1].accuracy if hist else float("nan"))
        return probs


def crossval_task(cfg: RunConfig, task, stack: CaeStack, target, cache: FeatureCache | None = None,
                  source=None) -> CrossvalResult:
    """Stratified cross-validation of the full pipeline on one task."""
    task = get_task(task) if isinstance(task, str) else task
    volumes = [np.asarray(v, dtype=np.float64) for v, _, _ in target]
    labels = [lab for _, lab, _ in target]
    idx, y = task_subset(task, labels)
    src = [np.asarray(v, dtype=np.float64) for v, _, _ in source] if source is not None else None
    recipe = DsaRecipe(cfg, task, stack, volumes, idx, y, cache or FeatureCache(volumes), src)
    return run_crossval(y, recipe, k=cfg.run.folds, seed=cfg.seed,
                        n_classes=task.n_classes, positive_class=0)
