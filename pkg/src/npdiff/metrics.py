"""Point-set and image evaluation metrics.

Distance conventions follow the point-cloud-generation literature:
Chamfer distance uses squared Euclidean distances (sum of the two
directed means), earth mover's distance uses unsquared Euclidean
distances (mean over the optimal bijection). Every report embeds a
convention identifier so tables stay unambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError

EMD_EXACT_CAP = 256

CHAMFER_CONVENTION = "squared-euclidean, sum of directed means"
EMD_CONVENTION = "euclidean, mean over exact optimal bijection"
PSNR_CONVENTION = "10*log10(1/MSE), unit dynamic range"


def _as_point_set(points, name: str) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty (M, 3) array, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{name} contains non-finite values")
    return points


def _cross_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=2)


def chamfer(a, b) -> float:
    """Sum of the two directed means of minimum squared distances."""
    a = _as_point_set(a, "a")
    b = _as_point_set(b, "b")
    d2 = _cross_sq_dists(a, b)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd(a, b) -> float:
    """Mean Euclidean distance under the exact optimal bijection."""
    a = _as_point_set(a, "a")
    b = _as_point_set(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"point sets must have equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > EMD_EXACT_CAP:
        raise ConfigError(
            f"exact assignment is capped at {EMD_EXACT_CAP} points, got {a.shape[0]}"
        )
    cost = np.sqrt(_cross_sq_dists(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


_DISTANCES = {"chamfer": chamfer, "emd": emd}


def one_nn_accuracy(generated, reference, distance: str = "chamfer") -> float:
    """Leave-one-out 1-NN two-sample classification accuracy over the
    union of both lists (generated first); ties go to the lowest union
    index. 0.5 means the sets are indistinguishable."""
    if distance not in _DISTANCES:
        raise ValueError(f"distance must be one of {sorted(_DISTANCES)}, got {distance!r}")
    if not generated or not reference:
        raise ValueError("both point-set lists must be non-empty")
    dist_fn = _DISTANCES[distance]
    union = [_as_point_set(p, f"generated[{i}]") for i, p in enumerate(generated)]
    union += [_as_point_set(p, f"reference[{i}]") for i, p in enumerate(reference)]
    labels = np.array([0] * len(generated) + [1] * len(reference))
    n = len(union)
    d = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dist_fn(union[i], union[j])
    nearest = d.argmin(axis=1)  # argmin takes the lowest tied index
    return float(np.mean(labels == labels[nearest]))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; identical
    inputs return +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def pixel_retrieval(query, corpus) -> str:
    """Id of the corpus image nearest to the query in pixel-space L2;
    ties go to the lowest index."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("retrieval corpus is empty")
    query = np.asarray(query, dtype=np.float64)
    best_id, best_d = None, None
    for item_id, image in corpus:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != query.shape:
            raise ValueError(
                f"corpus image {item_id!r} shape {image.shape} differs from query {query.shape}"
            )
        d = float(np.sqrt(np.sum((query - image) ** 2)))
        if best_d is None or d < best_d:
            best_id, best_d = item_id, d
    return best_id


def diameter(points) -> float:
    """Largest pairwise Euclidean distance within a point set."""
    points = _as_point_set(points, "points")
    return float(np.sqrt(_cross_sq_dists(points, points).max()))


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    convention: str
    sizes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric != "psnr" and not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"{self.metric} value must be finite and >= 0, got {self.value}")
        if self.metric == "one_nn_accuracy" and not 0 <= self.value <= 1:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.value}")

    def to_json(self) -> dict:
        value = "inf" if math.isinf(self.value) else self.value
        return {"metric": self.metric, "value": value,
                "convention": self.convention, "sizes": dict(self.sizes)}
