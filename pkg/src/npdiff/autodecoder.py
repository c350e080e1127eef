"""Autodecoder fitting: per-object features plus a shared decoder.

Each object owns a feature matrix (or a variational mean/log-variance
pair); the decoder is shared across the category. Training samples rays
from the ground-truth views, renders them, and minimizes mean squared
error, optionally regularized by a total-variation term over feature
space and a KL term against the unit Gaussian.

All randomness is drawn from per-step substreams keyed by (seed, stage,
step), so a resumed run consumes the identical stream as an
uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .errors import NumericalError
from .pointcloud import (LOGVAR_MAX, LOGVAR_MIN, NeuralPointCloud,
                         VariationalNeuralPointCloud)
from .renderer import DecoderConfig, RenderConfig, View, generate_rays, render_rays

STAGE = "autodecoder"


@dataclass
class ObjectRecord:
    object_id: str
    cloud: NeuralPointCloud
    views: list

    def __post_init__(self):
        if not self.views:
            raise ValueError(f"object {self.object_id!r} has no views")
        counts = {(v.camera.height, v.camera.width) for v in self.views}
        if len(counts) > 1:
            raise ValueError(f"object {self.object_id!r} mixes view resolutions: {counts}")


@dataclass(frozen=True)
class AutodecoderConfig:
    lr: float = 1e-3
    epochs: int = 1
    rays_per_view: int = 64
    init_mode: str = "zero"           # zero | random
    variational: bool = False
    lambda_tv: float = 0.0
    lambda_kl: float = 0.0
    tv_neighbors: int = 3
    init_logvar: float = -4.0

    def __post_init__(self):
        if self.init_mode not in ("zero", "random"):
            raise ValueError(f"init_mode must be 'zero' or 'random', got {self.init_mode!r}")
        if self.epochs < 1 or self.rays_per_view < 1:
            raise ValueError("epochs and rays_per_view must be >= 1")
        if self.lambda_tv < 0 or self.lambda_kl < 0:
            raise ValueError("regularizer weights must be non-negative")


# ---------------------------------------------------------------------------
# losses

def reconstruction_loss(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Mean squared error over sampled rays and color channels."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    return ad.tmean((pred - target) ** 2.0)


def tv_neighbor_indices(positions: np.ndarray, k: int):
    """Directed k-nearest neighborhoods: (source, neighbor, distance)
    triples, ties by lowest index, self excluded."""
    positions = np.asarray(positions, dtype=np.float64)
    m = positions.shape[0]
    k = min(k, m - 1)
    if k < 1:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(m), k)
    dst = order.reshape(-1)
    dist = np.sqrt(d2[src, dst])
    return src, dst, dist


def tv_loss(features: ad.Tensor, positions: np.ndarray, k: int = 3) -> ad.Tensor:
    """Total variation over feature space: for every point and each of its
    k nearest neighbors (directed), the L1 feature difference divided by
    the Euclidean position distance."""
    src, dst, dist = tv_neighbor_indices(positions, k)
    if src.size == 0:
        return ad.Tensor(np.zeros((), dtype=features.dtype))
    diff = ad.take_rows(features, src) - ad.take_rows(features, dst)
    l1 = ad.tsum(ad.absolute(diff), axis=1)
    return ad.tsum(l1 * (1.0 / dist).astype(features.dtype))


def kl_loss(mu: ad.Tensor, logvar: ad.Tensor) -> ad.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), closed form, summed over
    points and dimensions: 0.5 * sum(mu^2 + exp(lv) - lv - 1)."""
    return 0.5 * ad.tsum(mu * mu + ad.exp(logvar) - logvar - 1.0)


def reparameterize(mu: ad.Tensor, logvar: ad.Tensor, eps: np.ndarray) -> ad.Tensor:
    """mu + exp(logvar / 2) * eps with externally drawn unit noise."""
    eps = np.asarray(eps, dtype=mu.dtype)
    if eps.shape != mu.shape:
        raise ValueError(f"noise shape {eps.shape} must match mu {mu.shape}")
    return mu + ad.exp(0.5 * logvar) * eps


# ---------------------------------------------------------------------------
# training

@dataclass
class FitResult:
    decoder_store: ad.ParamStore
    feature_store: ad.ParamStore
    history: list = field(default_factory=list)
    steps: int = 0

    def features_of(self, object_id: str) -> np.ndarray:
        return self.feature_store.get(f"features.{object_id}").astype(np.float64)

    def logvar_of(self, object_id: str) -> np.ndarray:
        return self.feature_store.get(f"logvar.{object_id}").astype(np.float64)

    def cloud_of(self, objects, object_id: str) -> NeuralPointCloud:
        rec = next(o for o in objects if o.object_id == object_id)
        return NeuralPointCloud(rec.cloud.positions.copy(), self.features_of(object_id))

    def variational_cloud_of(self, objects, object_id: str) -> VariationalNeuralPointCloud:
        rec = next(o for o in objects if o.object_id == object_id)
        return VariationalNeuralPointCloud(
            rec.cloud.positions.copy(), self.features_of(object_id), self.logvar_of(object_id)
        )


def init_feature_store(objects, feature_dim: int, cfg: AutodecoderConfig, seed: int,
                       dtype=np.float64) -> ad.ParamStore:
    store = ad.ParamStore(dtype)
    for rec in objects:
        m = rec.cloud.m
        if cfg.init_mode == "zero":
            feats = np.zeros((m, feature_dim))
        else:
            feats = rngmod.stream(seed, STAGE, "init", rec.object_id).standard_normal((m, feature_dim))
        store.add(f"features.{rec.object_id}", feats)
        if cfg.variational:
            store.add(f"logvar.{rec.object_id}", np.full((m, feature_dim), cfg.init_logvar))
    return store


def _object_features(feature_store: ad.ParamStore, rec: ObjectRecord,
                     cfg: AutodecoderConfig, step_rng) -> tuple:
    """Features tensor for rendering plus the (mu, logvar) pair when
    variational."""
    mu = feature_store.tensor(f"features.{rec.object_id}")
    if not cfg.variational:
        return mu, None
    logvar = feature_store.tensor(f"logvar.{rec.object_id}")
    eps = step_rng.standard_normal(mu.shape)
    return reparameterize(mu, logvar, eps), (mu, logvar)


def fit(objects, decoder_store: ad.ParamStore, decoder_cfg: DecoderConfig,
        render_cfg: RenderConfig, cfg: AutodecoderConfig, seed: int,
        freeze_decoder: bool = False, start_step: int = 0,
        feature_store: ad.ParamStore = None, on_step=None) -> FitResult:
    """Optimize per-object features (and the decoder unless frozen).

    One epoch visits every view index once in a seeded order; one step
    renders `rays_per_view` random pixels of the current view of every
    object and applies a single Adam update. `start_step` with the
    matching stores resumes a run on its original random streams.
    """
    objects = list(objects)
    if not objects:
        raise ValueError("fit needs at least one object")
    views_per_object = len(objects[0].views)
    if any(len(o.views) != views_per_object for o in objects):
        raise ValueError("all objects must have the same number of views")
    if feature_store is None:
        if start_step:
            raise ValueError("resuming requires the feature store from the checkpoint")
        feature_store = init_feature_store(objects, decoder_cfg.feature_dim, cfg, seed,
                                           decoder_store.dtype)

    result = FitResult(decoder_store, feature_store, steps=start_step)
    total_steps = cfg.epochs * views_per_object
    for step in range(start_step, total_steps):
        epoch, slot = divmod(step, views_per_object)
        view_order = rngmod.stream(seed, STAGE, "views", epoch).permutation(views_per_object)
        g = rngmod.stream(seed, STAGE, "step", step)

        decoder_store.zero_grad()
        feature_store.zero_grad()
        recon_total, tv_total, kl_total = 0.0, 0.0, 0.0
        loss_terms = []
        for rec in objects:
            view = rec.views[view_order[slot]]
            cam = view.camera
            n_px = cam.height * cam.width
            take = min(cfg.rays_per_view, n_px)
            pix_flat = g.choice(n_px, size=take, replace=False)
            pixels = np.stack([pix_flat // cam.width, pix_flat % cam.width], axis=1)
            origins, dirs = generate_rays(cam, pixels)
            targets = view.image[pixels[:, 0], pixels[:, 1]]

            feats, var_pair = _object_features(feature_store, rec, cfg, g)
            res = render_rays(decoder_store, decoder_cfg, rec.cloud.positions, feats,
                              origins, dirs, cam.near, cam.far, render_cfg, rng=g)
            obj_loss = reconstruction_loss(res.color, targets)
            recon_total += float(obj_loss.data)
            if cfg.lambda_tv > 0:
                tv = tv_loss(var_pair[0] if var_pair else feats, rec.cloud.positions,
                             cfg.tv_neighbors)
                tv_total += float(tv.data)
                obj_loss = obj_loss + cfg.lambda_tv * tv
            if cfg.lambda_kl > 0:
                if var_pair is None:
                    raise ValueError("lambda_kl > 0 requires variational=True")
                kl = kl_loss(var_pair[0], var_pair[1])
                kl_total += float(kl.data)
                obj_loss = obj_loss + cfg.lambda_kl * kl
            loss_terms.append(obj_loss)

        total = loss_terms[0]
        for term in loss_terms[1:]:
            total = total + term
        total = total * (1.0 / len(objects))

        row = {
            "step": step + 1,
            "recon": recon_total / len(objects),
            "tv": tv_total / len(objects),
            "kl": kl_total / len(objects),
            "total": float(total.data),
        }
        for key in ("recon", "tv", "kl", "total"):
            if not np.isfinite(row[key]):
                raise NumericalError(f"{key} loss is not finite at step {step + 1}")

        ad.backward(total)
        adam_kwargs = dict(lr=cfg.lr)
        ad.adam_step(feature_store, **adam_kwargs)
        if not freeze_decoder:
            ad.adam_step(decoder_store, **adam_kwargs)
        if cfg.variational:
            for rec in objects:
                np.clip(feature_store.get(f"logvar.{rec.object_id}"),
                        LOGVAR_MIN, LOGVAR_MAX,
                        out=feature_store.get(f"logvar.{rec.object_id}"))
        result.history.append(row)
        result.steps = step + 1
        if on_step is not None:
            on_step(result, row)
    return result


# ---------------------------------------------------------------------------
# seed-consistency analysis

def per_point_cosine_similarity(feature_sets) -> float:
    """Mean over points of the mean pairwise cosine similarity of each
    point's feature across runs. `feature_sets` is a list of (M, D)
    arrays from different seeds; degenerate (near-zero) features count
    as similarity 0."""
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in feature_sets])  # (S, M, D)
    s = stack.shape[0]
    if s < 2:
        raise ValueError("need at least two runs to compare")
    norms = np.linalg.norm(stack, axis=2)
    sims = []
    for a in range(s):
        for b in range(a + 1, s):
            dot = np.sum(stack[a] * stack[b], axis=1)
            denom = norms[a] * norms[b]
            ok = denom > 1e-12
            cos = np.where(ok, dot / np.where(ok, denom, 1.0), 0.0)
            sims.append(cos)
    return float(np.mean(np.stack(sims)))


def cosine_similarity_analysis(objects, decoder_store: ad.ParamStore,
                               decoder_cfg: DecoderConfig, render_cfg: RenderConfig,
                               cfg: AutodecoderConfig, seeds) -> dict:
    """Refit features per seed with the decoder frozen and score how
    consistent each point's optimized feature is across seeds.

    Returns {"overall": float, "per_object": {id: float}}.
    """
    seeds = list(seeds)
    fits = {}
    for seed in seeds:
        res = fit(objects, decoder_store, decoder_cfg, render_cfg, cfg, seed,
                  freeze_decoder=True)
        for rec in objects:
            fits.setdefault(rec.object_id, []).append(res.features_of(rec.object_id))
    per_object = {oid: per_point_cosine_similarity(sets) for oid, sets in fits.items()}
    overall = float(np.mean(list(per_object.values())))
    return {"overall": overall, "per_object": per_object}
