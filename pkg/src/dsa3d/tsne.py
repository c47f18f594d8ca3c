"""Exact t-SNE for projecting learned features to 2D.

Per-point Gaussian bandwidths are found by bisection on the precision so
each conditional distribution has the requested perplexity; affinities are
symmetrised, the embedding uses a Student-t kernel and is optimised by
gradient descent with momentum, per-parameter gains and early exaggeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TsneError(ValueError):
    pass


def _sq_distances(x: np.ndarray) -> np.ndarray:
    s = np.sum(x * x, axis=1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_affinities(x, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-stochastic ``P[j|i]`` matrix and the precision found for each row."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    d = _sq_distances(x)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()  # shift keeps exp() in range; P is unchanged
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            sw = w.sum()
            p = w / sw
            h = beta * float(np.dot(p, di)) + np.log(sw)
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:  # entropy too high: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: list = field(default_factory=list)   # (iteration, KL divergence) every 50 steps


def tsne_embed(features, perplexity: float = 10.0, iterations: int = 500, seed: int = 0,
               learning_rate: float = 100.0, exaggeration: float = 4.0,
               exaggeration_iters: int = 100, callback=None) -> TsneResult:
    """Embed ``features`` (``(N, D)``) in 2D.

    ``callback(iteration, embedding)``, if given, sees the embedding after
    every update. A non-finite embedding raises ``FloatingPointError``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise TsneError(f"features must be a 2D array, got shape {x.shape}")
    n = x.shape[0]
    if perplexity < 2:
        raise TsneError(f"perplexity must be >= 2, got {perplexity}")
    if n < 3 * perplexity:
        raise TsneError(f"need at least {int(np.ceil(3 * perplexity))} points for "
                        f"perplexity {perplexity}, got {n}")
    if not np.all(np.isfinite(x)):
        raise TsneError("features contain non-finite values")

    cond, _ = conditional_affinities(x, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    result = TsneResult(y)
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < 250 else 0.8
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"t-SNE embedding became non-finite at iteration {it}")
        if callback is not None:
            callback(it, y)
        if it % 50 == 0 or it == iterations - 1:
            result.kl.append((it, float(np.sum(P * np.log(P / Q)))))
    result.embedding = y
    return result
