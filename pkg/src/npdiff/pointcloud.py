"""Hybrid point clouds: fixed positions plus optimizable per-point features.

Positions come from surface sampling and are never optimized; features
are the learnable payload. The on-disk NPCD format and the dataset
normalization conventions (global position whitening, per-dimension
feature min/max to [-1, 1]) live here as well.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

NPCD_MAGIC = b"NPCD"
NPCD_VERSION = 1

LOGVAR_MIN = -20.0
LOGVAR_MAX = 10.0


def _validate_pair(positions, features, what: str):
    positions = np.asarray(positions, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"{what} positions must be (M, 3), got {positions.shape}")
    if features.ndim != 2 or features.shape[0] != positions.shape[0]:
        raise ValueError(
            f"{what} features must be (M, D) with M={positions.shape[0]}, got {features.shape}"
        )
    if positions.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError(f"{what} needs M >= 1 and D >= 1")
    if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(features)):
        raise ValueError(f"{what} contains non-finite values")
    return positions, features


@dataclass
class NeuralPointCloud:
    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.positions, self.features = _validate_pair(self.positions, self.features, "cloud")

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "NeuralPointCloud":
        return NeuralPointCloud(self.positions.copy(), self.features.copy())


@dataclass
class VariationalNeuralPointCloud:
    """Per-point feature distributions: mean and log variance per dim.

    Log variances are clamped to [-20, 10] at construction and stay there.
    """

    positions: np.ndarray
    feature_means: np.ndarray
    feature_logvars: np.ndarray

    def __post_init__(self):
        self.positions, self.feature_means = _validate_pair(
            self.positions, self.feature_means, "variational cloud"
        )
        lv = np.asarray(self.feature_logvars, dtype=np.float64)
        if lv.shape != self.feature_means.shape:
            raise ValueError(
                f"feature_logvars shape {lv.shape} must match means {self.feature_means.shape}"
            )
        if not np.all(np.isfinite(lv)):
            raise ValueError("feature_logvars contains non-finite values")
        self.feature_logvars = np.clip(lv, LOGVAR_MIN, LOGVAR_MAX)

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.feature_means.shape[1]

    def mean_cloud(self) -> NeuralPointCloud:
        return NeuralPointCloud(self.positions.copy(), self.feature_means.copy())


def cloud_with_zero_features(positions, d: int) -> NeuralPointCloud:
    positions = np.asarray(positions, dtype=np.float64)
    return NeuralPointCloud(positions, np.zeros((positions.shape[0], d)))


def cloud_with_random_features(positions, d: int, rng: np.random.Generator) -> NeuralPointCloud:
    positions = np.asarray(positions, dtype=np.float64)
    return NeuralPointCloud(positions, rng.standard_normal((positions.shape[0], d)))


# ---------------------------------------------------------------------------
# farthest point sampling

def farthest_point_sampling(points, m: int) -> np.ndarray:
    """Greedy farthest point subset of size m.

    Starts at index 0; each round adds the point maximizing the minimum
    squared distance to the selected set, ties broken by lowest index.
    Returns indices in selection order.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    n = points.shape[0]
    if not (1 <= m <= n):
        raise ValueError(f"m must be in [1, {n}], got {m}")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = 0
    min_sq = np.sum((points - points[0]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_sq))  # argmax returns the lowest tied index
        selected[i] = nxt
        np.minimum(min_sq, np.sum((points - points[nxt]) ** 2, axis=1), out=min_sq)
    return selected


# ---------------------------------------------------------------------------
# dataset normalization

@dataclass
class NormalizationStats:
    position_mean: np.ndarray  # (3,)
    position_scale: float      # scalar std over all pooled coordinates
    feature_min: np.ndarray    # (D,)
    feature_max: np.ndarray    # (D,)

    def __post_init__(self):
        self.position_mean = np.asarray(self.position_mean, dtype=np.float64).reshape(3)
        self.position_scale = float(self.position_scale)
        self.feature_min = np.asarray(self.feature_min, dtype=np.float64)
        self.feature_max = np.asarray(self.feature_max, dtype=np.float64)
        if self.feature_min.shape != self.feature_max.shape or self.feature_min.ndim != 1:
            raise ValueError("feature_min and feature_max must be matching 1-d arrays")
        if self.position_scale <= 0 or not np.isfinite(self.position_scale):
            raise ValueError(f"position_scale must be a positive finite scalar, got {self.position_scale}")
        if np.any(self.feature_max < self.feature_min):
            raise ValueError("feature_max must be >= feature_min per dimension")

    def to_json(self) -> dict:
        return {
            "position_mean": self.position_mean.tolist(),
            "position_scale": self.position_scale,
            "feature_min": self.feature_min.tolist(),
            "feature_max": self.feature_max.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        try:
            return cls(
                np.asarray(obj["position_mean"], dtype=np.float64),
                float(obj["position_scale"]),
                np.asarray(obj["feature_min"], dtype=np.float64),
                np.asarray(obj["feature_max"], dtype=np.float64),
            )
        except KeyError as e:
            raise FormatError(f"normalization stats missing field {e.args[0]!r}") from e

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        with open(path) as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError(f"invalid normalization stats JSON: {e}") from e
        return cls.from_json(obj)


def compute_normalization(clouds) -> NormalizationStats:
    """Stats over a dataset: pooled position mean and scalar std, and
    per-dimension feature extrema."""
    clouds = list(clouds)
    if not clouds:
        raise ValueError("compute_normalization needs at least one cloud")
    dims = {c.d for c in clouds}
    if len(dims) > 1:
        raise ValueError(f"inconsistent feature widths in dataset: {sorted(dims)}")
    pos = np.concatenate([c.positions for c in clouds], axis=0)
    feats = np.concatenate([c.features for c in clouds], axis=0)
    mean = pos.mean(axis=0)
    scale = float(np.sqrt(np.mean((pos - mean) ** 2)))
    if scale == 0.0:
        raise ValueError("degenerate dataset: all positions identical")
    return NormalizationStats(mean, scale, feats.min(axis=0), feats.max(axis=0))


def normalize(cloud: NeuralPointCloud, stats: NormalizationStats) -> NeuralPointCloud:
    """Positions to zero mean unit scale; features to [-1, 1] per dim.

    Dimensions that are constant across the dataset map to 0.
    """
    if cloud.d != stats.feature_min.shape[0]:
        raise ValueError(f"cloud D={cloud.d} does not match stats D={stats.feature_min.shape[0]}")
    pos = (cloud.positions - stats.position_mean) / stats.position_scale
    span = stats.feature_max - stats.feature_min
    const = span == 0
    safe = np.where(const, 1.0, span)
    feats = 2.0 * (cloud.features - stats.feature_min) / safe - 1.0
    feats[:, const] = 0.0
    return NeuralPointCloud(pos, feats)


def denormalize(cloud: NeuralPointCloud, stats: NormalizationStats) -> NeuralPointCloud:
    """Inverse of normalize; constant feature dims recover their dataset value."""
    if cloud.d != stats.feature_min.shape[0]:
        raise ValueError(f"cloud D={cloud.d} does not match stats D={stats.feature_min.shape[0]}")
    pos = cloud.positions * stats.position_scale + stats.position_mean
    span = stats.feature_max - stats.feature_min
    const = span == 0
    feats = (cloud.features + 1.0) / 2.0 * span + stats.feature_min
    feats[:, const] = stats.feature_min[const]
    return NeuralPointCloud(pos, feats)


def normalized_clip_bounds(clouds, stats: NormalizationStats):
    """Per-dimension extrema of the normalized dataset.

    Returns (pos_lo, pos_hi, feat_lo, feat_hi); sampling clips reverse
    iterates to these bounds.
    """
    normed = [normalize(c, stats) for c in clouds]
    pos = np.concatenate([c.positions for c in normed], axis=0)
    feats = np.concatenate([c.features for c in normed], axis=0)
    return pos.min(axis=0), pos.max(axis=0), feats.min(axis=0), feats.max(axis=0)


# ---------------------------------------------------------------------------
# NPCD binary format

def save_npcd(cloud: NeuralPointCloud, path):
    with open(path, "wb") as f:
        f.write(NPCD_MAGIC)
        f.write(struct.pack("<III", NPCD_VERSION, cloud.m, cloud.d))
        f.write(np.ascontiguousarray(cloud.positions, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cloud.features, dtype="<f4").tobytes())


def load_npcd(path) -> NeuralPointCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != NPCD_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {NPCD_MAGIC!r}")
        head = f.read(12)
        if len(head) != 12:
            raise FormatError("truncated point cloud file while reading header")
        version, m, d = struct.unpack("<III", head)
        if version != NPCD_VERSION:
            raise FormatError(f"unsupported point cloud version {version}")
        if m < 1 or d < 1:
            raise FormatError(f"invalid dimensions M={m} D={d}")
        raw = f.read(4 * m * (3 + d))
        if len(raw) != 4 * m * (3 + d):
            raise FormatError("truncated point cloud file while reading data")
        if f.read(1):
            raise FormatError("trailing bytes after point cloud data")
    flat = np.frombuffer(raw, dtype="<f4")
    positions = flat[: 3 * m].reshape(m, 3).astype(np.float64)
    features = flat[3 * m:].reshape(m, d).astype(np.float64)
    if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(features)):
        raise FormatError("point cloud file contains non-finite values")
    return NeuralPointCloud(positions, features)
