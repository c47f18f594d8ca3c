import numpy as np
import pytest

from dsa3d.tsne import TsneError, conditional_affinities, tsne_embed
from oracles import silhouette


def _clusters(seed=0, n=20, dim=16, gap=6.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((n, dim)) + gap / np.sqrt(dim)
    return np.vstack([a, b]), np.repeat([0, 1], n)


def test_affinity_rows_sum_to_one_and_hit_perplexity():
    x, _ = _clusters()
    P, _ = conditional_affinities(x, 10.0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-8)
    assert np.all(np.diag(P) == 0)
    rows = np.where(P > 0, P, 1.0)
    entropy = -(P * np.log(rows)).sum(axis=1)
    np.testing.assert_allclose(np.exp(entropy), 10.0, rtol=1e-3)


def test_shape_and_finiteness_every_iteration():
    x, _ = _clusters(1)
    seen = []
    res = tsne_embed(x, perplexity=5, iterations=120,
                     callback=lambda it, y: seen.append(bool(np.all(np.isfinite(y)))))
    assert res.embedding.shape == (40, 2)
    assert len(seen) == 120 and all(seen)
    assert all(np.isfinite(kl) for _, kl in res.kl)


def test_two_clusters_separate():
    x, y = _clusters(2)
    res = tsne_embed(x, perplexity=10, iterations=500, seed=0)
    assert silhouette(res.embedding, y) > 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_duplicated_points_land_together(seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((40, 8))
    x = np.vstack([base, base + 1e-9 * rng.standard_normal(base.shape)])
    emb = tsne_embed(x, seed=seed).embedding
    d = np.sqrt(((emb[:, None] - emb[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    median_nn = np.median(d.min(axis=1))
    pair = np.sqrt(((emb[:40] - emb[40:]) ** 2).sum(-1))
    assert np.all(pair <= 10 * median_nn)


def test_seeded_determinism():
    x, _ = _clusters(4)
    a = tsne_embed(x, 5, 50, seed=3).embedding
    b = tsne_embed(x, 5, 50, seed=3).embedding
    assert np.array_equal(a, b)


def test_preconditions():
    x, _ = _clusters(n=4)
    with pytest.raises(TsneError, match="at least"):
        tsne_embed(x, perplexity=5)
    with pytest.raises(TsneError, match="perplexity"):
        tsne_embed(x, perplexity=1.5)
    with pytest.raises(TsneError):
        tsne_embed(np.zeros(10), perplexity=2)
