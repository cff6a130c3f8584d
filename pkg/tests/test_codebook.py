from itertools import product

import numpy as np
import pytest

from sibow.codebook import (
    Codebook,
    KMeansParams,
    assign,
    build_pool,
    codebook_from_bytes,
    codebook_to_bytes,
    export_codebook_csv,
    kmeans,
    load_codebook,
    multipass_kmeans,
    save_codebook,
)
from sibow.errors import ClusteringError, EmptyPoolError
from sibow.sift import DescriptorSet


def best_partition_inertia(x, M):
    """Exhaustive search over every labelling of the points into M non-empty groups."""
    best = np.inf
    for labels in product(range(M), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) != M:
            continue
        cost = sum(((x[labels == j] - x[labels == j].mean(axis=0)) ** 2).sum() for j in range(M))
        best = min(best, cost)
    return best


def planted_1d(seed=0, per=50):
    rng = np.random.default_rng(seed)
    centres = np.array([-30.0, -10.0, 10.0, 30.0])
    x = np.concatenate([c + rng.uniform(-1, 1, per) for c in centres])
    truth = np.sort([x[i * per : (i + 1) * per].mean() for i in range(4)])
    return x[:, None], truth


def test_build_pool_concatenates_in_order():
    rng = np.random.default_rng(0)
    a, b = DescriptorSet("a", rng.random((3, 128))), DescriptorSet("b", rng.random((5, 128)))
    pool = build_pool([a, DescriptorSet("z", np.zeros((0, 128))), b])
    assert len(pool) == 8
    np.testing.assert_array_equal(pool.rows, np.vstack([a.descriptors, b.descriptors]))
    assert pool.provenance == [("a", 0, 3), ("z", 3, 3), ("b", 3, 8)]


def test_empty_pool():
    with pytest.raises(EmptyPoolError):
        build_pool([DescriptorSet("a", np.zeros((0, 128)))])


def test_one_point_per_cluster():
    x = np.random.default_rng(1).random((6, 3))
    cb = kmeans(x, 6)
    assert cb.inertia == 0.0
    assert sorted(map(tuple, cb.centroids)) == sorted(map(tuple, x))


def test_tiny_1d_against_exhaustive_partitions():
    x = np.array([[0.0], [1.0], [10.0], [11.0]])
    cb = kmeans(x, 2)
    np.testing.assert_allclose(np.sort(cb.centroids[:, 0]), [0.5, 10.5])
    assert cb.inertia == pytest.approx(1.0)
    assert cb.inertia == pytest.approx(best_partition_inertia(x, 2))


@pytest.mark.parametrize("seed", range(5))
def test_random_small_instances_reach_partition_optimum(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(c, 0.3, (3, 2)) for c in ([0, 0], [4, 0], [0, 4])])
    cb = kmeans(x, 3, KMeansParams(seed=seed))
    assert cb.inertia == pytest.approx(best_partition_inertia(x, 3), rel=1e-9)


def test_too_few_points():
    with pytest.raises(ClusteringError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ClusteringError):
        kmeans(np.zeros((5, 2)), 2)  # only one distinct point


def test_inertia_monotone_and_centroids_are_means():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(400, 5))
    cb = kmeans(x, 8, KMeansParams(tol=0.0, seed=3))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(cb.history, cb.history[1:]))
    labels, _ = assign(x, cb.centroids)
    for j in range(8):
        np.testing.assert_allclose(cb.centroids[j], x[labels == j].mean(axis=0), atol=1e-9)
    assert np.unique(cb.centroids, axis=0).shape[0] == 8


def test_deterministic_for_fixed_seed():
    x = np.random.default_rng(2).normal(size=(300, 4))
    a, b = kmeans(x, 5, KMeansParams(seed=11)), kmeans(x, 5, KMeansParams(seed=11))
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_weights_equal_to_repetition():
    x = np.array([[0.0], [1.0], [5.0], [6.0], [7.0]])
    w = np.array([2.0, 1.0, 1.0, 3.0, 1.0])
    rep = np.repeat(x, w.astype(int), axis=0)
    a = kmeans(x, 2, weights=w)
    b = kmeans(rep, 2)
    np.testing.assert_allclose(np.sort(a.centroids[:, 0]), np.sort(b.centroids[:, 0]), atol=1e-12)


def test_multipass_small_m_delegates():
    x = np.random.default_rng(4).normal(size=(500, 3))
    p = KMeansParams(seed=9)
    a, b = multipass_kmeans(x, 16, p), kmeans(x, 16, p)
    assert a.passes_used == 1
    assert a.centroids.tobytes() == b.centroids.tobytes()
    c = multipass_kmeans(x, 16, p, passes=2, chunks=1)
    assert c.centroids.tobytes() == b.centroids.tobytes()


def test_multipass_planted_clusters():
    x, truth = planted_1d()
    cb = multipass_kmeans(x, 4, KMeansParams(seed=0), passes=2, chunks=2)
    assert cb.passes_used == 2
    np.testing.assert_allclose(np.sort(cb.centroids[:, 0]), truth, atol=1e-6)


def test_multipass_worker_independent():
    x = np.random.default_rng(5).normal(size=(2000, 4))
    a = multipass_kmeans(x, 8, passes=2, chunks=4, workers=1)
    b = multipass_kmeans(x, 8, passes=2, chunks=4, workers=4)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_codebook_artifact_roundtrip(tmp_path):
    cb = Codebook(np.random.default_rng(0).random((4, 128)), passes_used=2, inertia=3.5, seed=-7)
    data = codebook_to_bytes(cb)
    assert data[:4] == b"SBWC"
    back = codebook_from_bytes(data)
    assert back.centroids.tobytes() == cb.centroids.tobytes()
    assert (back.passes_used, back.inertia, back.seed) == (2, 3.5, -7)
    save_codebook(cb, tmp_path / "c.sbwc")
    assert load_codebook(tmp_path / "c.sbwc").size == 4
    export_codebook_csv(cb, tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) >= 4
