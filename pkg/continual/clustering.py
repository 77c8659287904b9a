"""Linear dimensionality reduction and seeded k-means used by representation-based selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from continual.errors import ConfigError
from continual.types import Rng

Reducer = Callable[[np.ndarray, int], np.ndarray]


def principal_directions(embeddings: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-``d`` principal directions (rows) of an embedding matrix.

    Each direction is flipped so its largest-magnitude coordinate is positive.
    """
    mean = embeddings.mean(axis=0)
    centered = embeddings - mean
    full = d > min(centered.shape)
    _, _, vt = np.linalg.svd(centered, full_matrices=full)
    directions = vt[:d].copy()
    for row in directions:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return mean, directions


def principal_reducer(embeddings: np.ndarray, d: int) -> np.ndarray:
    mean, directions = principal_directions(embeddings, d)
    return (embeddings - mean) @ directions.T


def reduce_dim(embeddings: Sequence[np.ndarray] | np.ndarray, d: int,
               reducer: Reducer = principal_reducer) -> np.ndarray:
    """Project embeddings to ``d`` dimensions; the default reducer is PCA."""
    matrix = np.asarray(embeddings, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ConfigError("reduce_dim needs at least one embedding")
    if d > matrix.shape[1]:
        raise ConfigError(f"cannot reduce {matrix.shape[1]}-dimensional embeddings to {d} dimensions")
    return reducer(matrix, d)


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int


def _plus_plus_seeds(points: np.ndarray, k: int, weights: np.ndarray, rng: Rng) -> np.ndarray:
    first = int(rng.choice(len(points), p=weights / weights.sum()))
    centers = [points[first]]
    closest = cdist(points, centers, "sqeuclidean")[:, 0]
    for _ in range(1, k):
        mass = weights * closest
        if mass.sum() > 0:
            index = int(rng.choice(len(points), p=mass / mass.sum()))
        else:
            index = int(rng.choice(len(points), p=weights / weights.sum()))
        centers.append(points[index])
        closest = np.minimum(closest, cdist(points, points[index][None, :], "sqeuclidean")[:, 0])
    return np.array(centers)


def kmeans(points: np.ndarray, k: int, rng: Rng, max_iter: int = 100,
           weights: np.ndarray | None = None) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    ``weights`` gives each point a multiplicity. An emptied cluster is re-seeded
    at the farthest point whose own cluster keeps another member.
    """
    points = np.asarray(points, dtype=np.float64)
    if not 1 <= k <= len(points):
        raise ConfigError(f"k={k} is not within 1..{len(points)}")
    weights = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=np.float64)
    centroids = _plus_plus_seeds(points, k, weights, rng)
    assignments = np.full(len(points), -1)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        distances = cdist(points, centroids, "sqeuclidean")
        updated = distances.argmin(axis=1)
        for cluster in range(k):
            if not np.any(updated == cluster):
                # sole members stay put; k <= n leaves some cluster with two or more
                movable = np.bincount(updated, minlength=k)[updated] > 1
                own = distances[np.arange(len(points)), updated]
                farthest = int(np.where(movable, own, -np.inf).argmax())
                updated[farthest] = cluster
                distances[farthest] = np.inf
                distances[farthest, cluster] = 0.0
        if np.array_equal(updated, assignments):
            break
        assignments = updated
        for cluster in range(k):
            members = assignments == cluster
            centroids[cluster] = np.average(points[members], axis=0, weights=weights[members])
    final = cdist(points, centroids, "sqeuclidean")[np.arange(len(points)), assignments]
    return KMeansResult(centroids, assignments, float((weights * final).sum()), iterations)
