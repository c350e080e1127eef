"""Differentiable point-based volume renderer.

A pinhole camera casts rays; each ray is sampled at stratified shading
points; a shading point gathers its k nearest cloud points within a
radius and aggregates their features with inverse-distance weights
through a shared aggregation MLP; a color head and a density head decode
the aggregated feature; quadrature along the ray composites the result
over a fixed background.

Gradients flow to per-point features and decoder parameters. Positions,
cameras, and sampling geometry are constants, so shading-point-to-point
offsets are computed as (origin - point) + depth * direction; translating
the cloud and the camera by the same exactly representable vector then
leaves every intermediate bit identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError
from .pointcloud import NeuralPointCloud

WHITE = (1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# cameras

@dataclass(frozen=True)
class Camera:
    """Pinhole camera. `rotation` maps camera to world coordinates
    (columns: right, down, forward); `translation` is the camera position.
    Pixel (row, col) has center ((col+0.5-cx)/f, (row+0.5-cy)/f, 1) in
    camera space."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: tuple
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid image size {self.width}x{self.height}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "focal": float(self.focal),
            "principal_point": list(self.principal_point),
            "width": self.width,
            "height": self.height,
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        try:
            return cls(
                np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3),
                np.asarray(obj["translation"], dtype=np.float64),
                float(obj["focal"]),
                tuple(obj["principal_point"]),
                int(obj["width"]),
                int(obj["height"]),
                float(obj["near"]),
                float(obj["far"]),
            )
        except KeyError as e:
            raise FormatError(f"camera record missing field {e.args[0]!r}") from e


def save_cameras(cameras, path):
    with open(path, "w") as f:
        json.dump([c.to_json() for c in cameras], f, indent=2, sort_keys=True)
        f.write("\n")


def load_cameras(path):
    with open(path) as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid camera JSON: {e}") from e
    if not isinstance(records, list):
        raise FormatError("camera file must hold a list of views")
    return [Camera.from_json(r) for r in records]


@dataclass
class View:
    """A camera together with its ground-truth image (H, W, 3) in [0, 1]."""

    camera: Camera
    image: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(
                f"image shape {img.shape} does not match camera "
                f"{self.camera.height}x{self.camera.width}"
            )
        self.image = img


def generate_rays(camera: Camera, pixels=None):
    """Ray origins and unit directions for pixel centers.

    `pixels` is an (R, 2) int array of (row, col); None means every pixel
    in row-major order. Origins are the camera position; directions are
    normalized, so shading depths are Euclidean distances.
    """
    if pixels is None:
        rows, cols = np.meshgrid(
            np.arange(camera.height), np.arange(camera.width), indexing="ij"
        )
        pixels = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError(f"pixels must be (R, 2), got {pixels.shape}")
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= camera.height) or np.any(pixels[:, 1] >= camera.width):
        raise ValueError("pixel index out of bounds")
    cx, cy = camera.principal_point
    x = (pixels[:, 1] + 0.5 - cx) / camera.focal
    y = (pixels[:, 0] + 0.5 - cy) / camera.focal
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()
    return origins, dirs


def look_at_camera(position, focal: float, width: int, height: int,
                   near: float, far: float, target=(0.0, 0.0, 0.0),
                   up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at `position` with the optical axis through `target`.

    The image x axis is horizontal w.r.t. `up` (with a fixed fallback when
    the view direction is parallel to it) and the principal point sits at
    the image center.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    forward = forward / norm
    x = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(forward, [0.0, 1.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(forward, x)
    rotation = np.stack([x, y, forward], axis=1)
    return Camera(rotation, position, focal, (width / 2.0, height / 2.0),
                  width, height, near, far)


def project_points(camera: Camera, points) -> np.ndarray:
    """Fractional (row, col) pixel coordinates of world points; the exact
    inverse of the generate_rays mapping. Points behind the camera get
    NaN coordinates."""
    points = np.asarray(points, dtype=np.float64)
    cam_space = (points - camera.translation) @ camera.rotation
    cx, cy = camera.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(cam_space[:, 2] > 0, cam_space[:, 2], np.nan)
        col = cam_space[:, 0] / z * camera.focal + cx - 0.5
        row = cam_space[:, 1] / z * camera.focal + cy - 0.5
    return np.stack([row, col], axis=1)


# ---------------------------------------------------------------------------
# shading point sampling

def sample_depths(n_rays: int, near: float, far: float, s: int, rng=None) -> np.ndarray:
    """Stratified depths: one sample per bin of [near, far].

    With rng=None each sample sits at its bin midpoint (deterministic
    mode); otherwise it is uniform within the bin.
    """
    if not (0 <= near < far):
        raise ValueError(f"need 0 <= near < far, got near={near} far={far}")
    if s < 1:
        raise ValueError(f"need at least one shading point, got {s}")
    width = (far - near) / s
    if rng is None:
        offsets = np.broadcast_to(np.arange(s) + 0.5, (n_rays, s)).copy()
    else:
        offsets = np.arange(s) + rng.random((n_rays, s))
    return near + offsets * width


def depth_deltas(depths: np.ndarray, far: float) -> np.ndarray:
    """Quadrature intervals: gaps between consecutive depths, the last one
    capped at far."""
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = far - depths[:, -1]
    return deltas


# ---------------------------------------------------------------------------
# neighbor queries

@dataclass
class NeighborPairs:
    """Flattened (shading point, cloud point) pairs.

    query: index into the flattened (R*S) shading points, sorted ascending;
    point: cloud point index; offset: shading point minus cloud point;
    distance: its norm. Within a query, pairs are ordered by (distance,
    point index), which is permutation-canonical for tie-free distances.
    """

    query: np.ndarray
    point: np.ndarray
    offset: np.ndarray
    distance: np.ndarray
    n_queries: int


def neighbor_pairs(positions, origins, dirs, depths, radius: float, k: int,
                   chunk: int = 256) -> NeighborPairs:
    """k nearest cloud points within `radius` of every shading point."""
    if radius <= 0:
        raise ValueError(f"neighbor radius must be positive, got {radius}")
    if k < 1:
        raise ValueError(f"neighbor count must be >= 1, got {k}")
    positions = np.asarray(positions, dtype=np.float64)
    n_rays, s = depths.shape
    m = positions.shape[0]
    queries, points, offsets, dists = [], [], [], []
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        base = origins[lo:hi, None, :] - positions[None, :, :]            # (C, M, 3)
        rel = base[:, None, :, :] + depths[lo:hi, :, None, None] * dirs[lo:hi, None, None, :]
        dist = np.linalg.norm(rel, axis=-1)                               # (C, S, M)
        kk = min(k, m)
        order = np.argsort(dist, axis=-1, kind="stable")[..., :kk]        # ties -> lowest index
        picked = np.take_along_axis(dist, order, axis=-1)                 # (C, S, kk)
        keep = picked <= radius
        if not np.any(keep):
            continue
        cidx, sidx, rank = np.nonzero(keep)
        queries.append((lo + cidx) * s + sidx)
        pid = order[cidx, sidx, rank]
        points.append(pid)
        offsets.append(rel[cidx, sidx, pid])
        dists.append(picked[cidx, sidx, rank])
    n_queries = n_rays * s
    if not queries:
        empty = np.empty(0, dtype=np.int64)
        return NeighborPairs(empty, empty.copy(), np.empty((0, 3)), np.empty(0), n_queries)
    return NeighborPairs(
        np.concatenate(queries), np.concatenate(points),
        np.concatenate(offsets), np.concatenate(dists), n_queries,
    )


def suggested_radius(clouds, factor: float = 3.0) -> float:
    """`factor` times the median nearest-neighbor spacing over the dataset."""
    spacings = []
    for c in clouds:
        pos = c.positions
        if pos.shape[0] < 2:
            raise ValueError("radius rule needs clouds with at least 2 points")
        d2 = np.sum((pos[:, None, :] - pos[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        spacings.append(np.sqrt(d2.min(axis=1)))
    return factor * float(np.median(np.concatenate(spacings)))


# ---------------------------------------------------------------------------
# decoder

@dataclass(frozen=True)
class DecoderConfig:
    """Shared decoder: aggregation MLP plus color and density heads."""

    feature_dim: int
    hidden: int = 256
    agg_width: int = 256

    def specs(self) -> dict:
        return {
            "f_phi": ad.MlpSpec(self.feature_dim + 3, (self.hidden,) * 4, self.agg_width),
            "g_psi": ad.MlpSpec(self.agg_width, (self.hidden,) * 4, 3),
            "h_gamma": ad.MlpSpec(self.agg_width, (self.hidden,), 1),
        }

    def to_json(self) -> dict:
        return {"feature_dim": self.feature_dim, "hidden": self.hidden, "agg_width": self.agg_width}

    @classmethod
    def from_json(cls, obj: dict) -> "DecoderConfig":
        try:
            return cls(int(obj["feature_dim"]), int(obj["hidden"]), int(obj["agg_width"]))
        except KeyError as e:
            raise FormatError(f"decoder config missing field {e.args[0]!r}") from e

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DecoderConfig":
        with open(path) as f:
            try:
                return cls.from_json(json.load(f))
            except json.JSONDecodeError as e:
                raise FormatError(f"invalid decoder config JSON: {e}") from e


def init_decoder(config: DecoderConfig, rng: np.random.Generator,
                 dtype=np.float64) -> ad.ParamStore:
    store = ad.ParamStore(dtype)
    for name, spec in config.specs().items():
        ad.mlp_init(store, name, spec, rng)
    return store


# ---------------------------------------------------------------------------
# rendering

@dataclass(frozen=True)
class RenderConfig:
    shading_points: int = 128
    neighbors_k: int = 8
    neighbor_radius: float = 0.1
    distance_epsilon: float = 1e-8
    background: tuple = WHITE
    ray_chunk: int = 256

    def __post_init__(self):
        if self.shading_points < 1:
            raise ValueError("shading_points must be >= 1")
        if self.neighbors_k < 1:
            raise ValueError("neighbors_k must be >= 1")
        if self.neighbor_radius <= 0:
            raise ValueError("neighbor_radius must be positive")
        if self.distance_epsilon <= 0:
            raise ValueError("distance_epsilon must be positive")
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")


@dataclass
class RenderResult:
    color: ad.Tensor            # (R, 3)
    aux: dict = field(default_factory=dict)


def aggregation_weights(pairs: NeighborPairs, epsilon: float) -> np.ndarray:
    """Normalized inverse-distance weights per query: w = 1 / max(d, eps),
    divided by the per-query sum. Constant w.r.t. the optimization."""
    w = 1.0 / np.maximum(pairs.distance, epsilon)
    sums = np.zeros(pairs.n_queries)
    np.add.at(sums, pairs.query, w)
    return w / sums[pairs.query]


def render_rays(decoder_store: ad.ParamStore, decoder_config: DecoderConfig,
                positions: np.ndarray, features, origins, dirs,
                near: float, far: float, cfg: RenderConfig,
                rng=None, want_aux: bool = False) -> RenderResult:
    """Render a batch of rays.

    `features` may be an autodiff Tensor (training) or a plain array.
    Returns per-ray colors as a Tensor; with want_aux=True the result also
    carries the quadrature internals as plain arrays for inspection.
    """
    positions = np.asarray(positions, dtype=np.float64)
    specs = decoder_config.specs()
    if not isinstance(features, ad.Tensor):
        features = ad.Tensor(np.asarray(features, dtype=decoder_store.dtype))
    if features.shape != (positions.shape[0], decoder_config.feature_dim):
        raise ValueError(
            f"features shape {features.shape} does not match "
            f"(M={positions.shape[0]}, D={decoder_config.feature_dim})"
        )
    n_rays = origins.shape[0]
    s = cfg.shading_points
    depths = sample_depths(n_rays, near, far, s, rng)
    deltas = depth_deltas(depths, far)
    pairs = neighbor_pairs(positions, origins, dirs, depths, cfg.neighbor_radius,
                           cfg.neighbors_k, cfg.ray_chunk)

    dtype = decoder_store.dtype
    n_q = pairs.n_queries
    if pairs.query.size:
        active, seg = np.unique(pairs.query, return_inverse=True)
        w = aggregation_weights(pairs, cfg.distance_epsilon).astype(dtype)
        gathered = ad.take_rows(features, pairs.point)
        inp = ad.concat([gathered, ad.Tensor(pairs.offset.astype(dtype))], axis=1)
        per_pair = ad.mlp_apply(decoder_store, "f_phi", specs["f_phi"], inp)
        f_q = ad.segment_sum(per_pair * w[:, None], seg, active.size)
        color_act = ad.sigmoid(ad.mlp_apply(decoder_store, "g_psi", specs["g_psi"], f_q))
        dens_act = ad.softplus(ad.mlp_apply(decoder_store, "h_gamma", specs["h_gamma"], f_q))
        color_flat = ad.scatter_rows(color_act, active, n_q)
        sigma_flat = ad.scatter_rows(dens_act, active, n_q)
    else:
        color_flat = ad.Tensor(np.zeros((n_q, 3), dtype=dtype))
        sigma_flat = ad.Tensor(np.zeros((n_q, 1), dtype=dtype))

    sigma = ad.reshape(sigma_flat, (n_rays, s))
    color = ad.reshape(color_flat, (n_rays, s, 3))
    sig_delta = sigma * deltas.astype(dtype)
    trans = ad.exp(-ad.exclusive_cumsum(sig_delta, axis=1))          # T_s
    alpha = 1.0 - ad.exp(-sig_delta)
    weights = trans * alpha                                          # (R, S)
    residual = ad.exp(-ad.tsum(sig_delta, axis=1))                   # T_{S+1}
    bg = np.asarray(cfg.background, dtype=dtype)
    pixel = ad.tsum(ad.reshape(weights, (n_rays, s, 1)) * color, axis=1) \
        + ad.reshape(residual, (n_rays, 1)) * ad.Tensor(bg)

    aux = {}
    if want_aux:
        aux = {
            "depths": depths,
            "deltas": deltas,
            "weights": weights.data.copy(),
            "alpha": alpha.data.copy(),
            "transmittance": trans.data.copy(),
            "residual": residual.data.copy(),
            "sigma": sigma.data.copy(),
            "pairs": pairs,
        }
    return RenderResult(pixel, aux)


def render_image(decoder_store: ad.ParamStore, decoder_config: DecoderConfig,
                 cloud: NeuralPointCloud, camera: Camera, cfg: RenderConfig,
                 rng=None) -> np.ndarray:
    """Full-frame render to an (H, W, 3) array in [0, 1]."""
    origins, dirs = generate_rays(camera)
    out = np.empty((camera.height * camera.width, 3))
    for lo in range(0, origins.shape[0], cfg.ray_chunk):
        hi = min(lo + cfg.ray_chunk, origins.shape[0])
        res = render_rays(decoder_store, decoder_config, cloud.positions, cloud.features,
                          origins[lo:hi], dirs[lo:hi], camera.near, camera.far, cfg, rng)
        out[lo:hi] = np.clip(res.color.data, 0.0, 1.0)
    return out.reshape(camera.height, camera.width, 3)
