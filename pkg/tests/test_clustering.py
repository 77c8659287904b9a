import numpy as np
import pytest
from scipy.spatial.distance import cdist

from continual.clustering import kmeans, principal_directions, reduce_dim
from continual.errors import ConfigError
from continual.types import Rng


# Test the reduced shape and centering
def test_reduce_dim_shape_and_mean():
    points = np.random.default_rng(0).normal(size=(30, 6))
    reduced = reduce_dim(points, 2)
    assert reduced.shape == (30, 2)
    assert np.allclose(reduced.mean(axis=0), 0.0)

# Test principal directions follow the dominant variance
def test_principal_direction_of_a_line():
    t = np.linspace(-1, 1, 50)
    points = np.stack([t, 2 * t, np.zeros_like(t)], axis=1)
    _, directions = principal_directions(points, 1)
    assert np.allclose(np.abs(directions[0]), np.array([1, 2, 0]) / np.sqrt(5))
    assert directions[0][np.argmax(np.abs(directions[0]))] > 0

# Test reducing to more dimensions than available
def test_reduce_dim_rejects_large_d():
    with pytest.raises(ConfigError):
        reduce_dim(np.zeros((4, 3)), 5)

# Test k-means on separated blobs
def test_kmeans_finds_separated_blobs():
    rng = np.random.default_rng(1)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    points = np.vstack([c + rng.normal(0, 0.1, (20, 2)) for c in centres])
    result = kmeans(points, 3, Rng(4))
    labels = result.assignments.reshape(3, 20)
    assert all(len(set(row)) == 1 for row in labels)
    assert len({row[0] for row in labels}) == 3

# Test k equal to the number of distinct points
def test_kmeans_k_equals_n_has_zero_inertia():
    points = np.random.default_rng(2).normal(size=(6, 3))
    result = kmeans(points, 6, Rng(0))
    assert np.isclose(result.inertia, 0.0)

# Test weights act as multiplicities
def test_kmeans_weights_match_duplicates():
    points = np.array([[0.0], [1.0], [10.0]])
    weighted = kmeans(points, 1, Rng(0), weights=np.array([3.0, 1.0, 1.0]))
    assert np.allclose(weighted.centroids[0], (0 * 3 + 1 + 10) / 5)

# Test k-means determinism and argument checks
def test_kmeans_deterministic_and_checked():
    points = np.random.default_rng(3).normal(size=(40, 2))
    a, b = kmeans(points, 4, Rng(7)), kmeans(points, 4, Rng(7))
    assert np.array_equal(a.assignments, b.assignments)
    with pytest.raises(ConfigError):
        kmeans(points, 41, Rng(0))

# Test reducing to the full dimension keeps every pairwise distance
def test_reduce_dim_full_dimension_is_isometry():
    points = np.random.default_rng(5).normal(size=(12, 4))
    reduced = reduce_dim(points, 4)
    assert np.allclose(cdist(reduced, reduced), cdist(points, points), atol=1e-6)

# Test rank-2 data is reconstructed exactly from two directions
def test_reduce_dim_reconstructs_rank_two_data():
    rng = np.random.default_rng(6)
    basis = rng.normal(size=(2, 5))
    points = rng.normal(size=(15, 2)) @ basis + rng.normal(size=5)
    mean, directions = principal_directions(points, 2)
    reduced = reduce_dim(points, 2)
    assert np.allclose(mean + reduced @ directions, points, atol=1e-9)

# Test k-means reaches the best of all 2-partitions
def test_kmeans_matches_exhaustive_two_partition():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [9.0, 9.0], [10.0, 9.0], [9.0, 11.0]])

    def inertia(members):
        return sum(((points[m] - points[m].mean(axis=0)) ** 2).sum() for m in members if m.any())

    best = min(inertia([mask, ~mask])
               for mask in (np.array([(i >> j) & 1 for j in range(6)], dtype=bool) for i in range(1, 2 ** 6 - 1)))
    for seed in range(5):
        assert np.isclose(kmeans(points, 2, Rng(seed)).inertia, best)

# Test an emptied cluster never takes the only member of another
def test_kmeans_reseed_keeps_every_cluster_populated():
    result = kmeans(np.zeros((3, 2)), 3, Rng(0))
    assert sorted(result.assignments.tolist()) == [0, 1, 2]
    assert np.all(np.isfinite(result.centroids))
    assert result.inertia == 0.0
