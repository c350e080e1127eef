"""Denoising diffusion over neural point clouds.

A linear noise schedule corrupts normalized positions and features
jointly; a permutation-equivariant transformer with one token per point
plus one time token predicts the injected noise; training minimizes the
mean of the two per-modality noise MSEs. The reverse process uses the
fixed lower-bound variance and never injects noise at the final step.

State at timestep t is carried as a single (M, 3+D) array, positions in
the first three columns. Splitting helpers keep the two modalities
addressable without copying conventions around.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .errors import ConfigError, NumericalError
from .pointcloud import NeuralPointCloud

EMA_DECAY = 0.9999
LN_EPS = 1e-5
UNNORMALIZED_LIMIT = 10.0


# ---------------------------------------------------------------------------
# noise schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule, endpoints inclusive.

    Arrays are indexed directly by timestep t in [1, T]; index 0 holds
    the convention values beta_0 = 0, alpha_bar_0 = 1, which make the
    final reverse step noiseless (sigma_1 = 0 exactly).
    """

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got [{self.beta_start}, {self.beta_end}]"
            )

    @cached_property
    def betas(self) -> np.ndarray:
        t = self.timesteps
        if t == 1:
            ramp = np.array([self.beta_start])
        else:
            ramp = self.beta_start + (self.beta_end - self.beta_start) * (
                np.arange(1, t + 1) - 1.0
            ) / (t - 1.0)
        return np.concatenate([[0.0], ramp])

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def sigma(self, t: int) -> float:
        """Reverse-process noise scale: the fixed lower-bound variance
        sigma_t^2 = ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t."""
        self._check_t(t)
        ab = self.alpha_bars
        return float(np.sqrt((1.0 - ab[t - 1]) / (1.0 - ab[t]) * self.betas[t]))

    def _check_t(self, t: int):
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")

    def to_json(self) -> dict:
        return {"timesteps": self.timesteps, "beta_start": self.beta_start,
                "beta_end": self.beta_end}

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        return cls(int(obj["timesteps"]), float(obj["beta_start"]), float(obj["beta_end"]))


def forward_step(x_prev: np.ndarray, schedule: NoiseSchedule, t: int,
                 noise: np.ndarray) -> np.ndarray:
    """One corruption step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    schedule._check_t(t)
    b = schedule.betas[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def forward_jump(x0: np.ndarray, schedule: NoiseSchedule, t: int,
                 noise: np.ndarray) -> np.ndarray:
    """Direct corruption to level t: sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise."""
    schedule._check_t(t)
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def reverse_step(x_t: np.ndarray, eps_pred: np.ndarray, schedule: NoiseSchedule,
                 t: int, noise: np.ndarray = None) -> np.ndarray:
    """One denoising step from the predicted noise.

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)
              + sigma_t * noise, and the noise term is omitted at t = 1.
    """
    schedule._check_t(t)
    b = schedule.betas[t]
    mean = (x_t - b / np.sqrt(1.0 - schedule.alpha_bars[t]) * eps_pred) / np.sqrt(
        schedule.alphas[t]
    )
    if t == 1 or noise is None:
        return mean
    return mean + schedule.sigma(t) * noise


# ---------------------------------------------------------------------------
# denoiser

@dataclass(frozen=True)
class DenoiserConfig:
    m: int
    d: int
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    time_embedding_dim: int = 32

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ConfigError("m and d must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.time_embedding_dim < 2 or self.time_embedding_dim % 2 != 0:
            raise ConfigError("time_embedding_dim must be even and >= 2")

    @property
    def token_dim(self) -> int:
        return 3 + self.d

    def to_json(self) -> dict:
        return {"m": self.m, "d": self.d, "layers": self.layers,
                "model_dim": self.model_dim, "heads": self.heads,
                "time_embedding_dim": self.time_embedding_dim}

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserConfig":
        return cls(**{k: int(obj[k]) for k in
                      ("m", "d", "layers", "model_dim", "heads", "time_embedding_dim")})

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "DenoiserConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


def sinusoidal_time_embedding(t: float, dim: int) -> np.ndarray:
    """Sin/cos features of the scalar timestep at geometrically spaced
    frequencies from 1 down to 1/10000."""
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    args = float(t) * np.exp(-np.log(10000.0) * exponents)
    return np.concatenate([np.sin(args), np.cos(args)])


def layer_norm(x: ad.Tensor, gamma: ad.Tensor, beta: ad.Tensor) -> ad.Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    var = ad.tmean((x - mu) ** 2.0, axis=-1, keepdims=True)
    return (x - mu) / ad.sqrt(var + LN_EPS) * gamma + beta


def _linear_spec(n_in: int, n_out: int) -> ad.MlpSpec:
    return ad.MlpSpec(n_in, (), n_out, activation="linear")


def init_denoiser(config: DenoiserConfig, rng: np.random.Generator,
                  dtype=np.float64) -> ad.ParamStore:
    """Fresh parameter store. The output projection starts at zero, so an
    untrained model predicts zero noise."""
    store = ad.ParamStore(dtype)
    dm = config.model_dim
    ad.mlp_init(store, "token_proj", _linear_spec(config.token_dim, dm), rng)
    ad.mlp_init(store, "time_proj", _linear_spec(config.time_embedding_dim, dm), rng)
    for i in range(config.layers):
        p = f"layer{i}"
        store.add(f"{p}.ln1.g", np.ones(dm))
        store.add(f"{p}.ln1.b", np.zeros(dm))
        for name in ("q", "k", "v", "o"):
            ad.mlp_init(store, f"{p}.attn.{name}", _linear_spec(dm, dm), rng)
        store.add(f"{p}.ln2.g", np.ones(dm))
        store.add(f"{p}.ln2.b", np.zeros(dm))
        ad.mlp_init(store, f"{p}.mlp", ad.MlpSpec(dm, (4 * dm,), dm, activation="gelu"), rng)
    store.add("final_ln.g", np.ones(dm))
    store.add("final_ln.b", np.zeros(dm))
    ad.mlp_init(store, "out_proj", _linear_spec(dm, config.token_dim), rng, zero_output=True)
    return store


def _self_attention(store, prefix: str, config: DenoiserConfig, x: ad.Tensor,
                    exact: bool) -> ad.Tensor:
    n_tok = x.shape[0]
    dm, h = config.model_dim, config.heads
    dh = dm // h

    def heads_of(name):
        proj = ad.mlp_apply(store, f"{prefix}.attn.{name}", _linear_spec(dm, dm), x)
        return ad.transpose(ad.reshape(proj, (n_tok, h, dh)), (1, 0, 2))

    q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
    scores = ad.attention_scores(q, k, exact=exact) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, exact=exact)
    mixed = ad.attention_apply(attn, v, exact=exact)
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (n_tok, dm))
    return ad.mlp_apply(store, f"{prefix}.attn.o", _linear_spec(dm, dm), merged)


def denoiser_apply(store: ad.ParamStore, config: DenoiserConfig, x, t: int,
                   exact: bool = False) -> ad.Tensor:
    """Predict the injected noise for one noisy cloud.

    x is (M, 3+D), positions first. Returns an (M, 3+D) tensor. There is
    no positional encoding over points, so permuting input rows permutes
    the output rows; with exact=True the attention reductions use
    order-canonical summation and the equivalence is bit-exact.
    """
    x = ad.as_tensor(x)
    if x.shape != (config.m, config.token_dim):
        raise ValueError(f"input shape {x.shape} does not match config "
                         f"({config.m}, {config.token_dim})")
    dm = config.model_dim
    tokens = ad.mlp_apply(store, "token_proj", _linear_spec(config.token_dim, dm), x)
    emb = sinusoidal_time_embedding(t, config.time_embedding_dim)
    time_tok = ad.mlp_apply(store, "time_proj",
                            _linear_spec(config.time_embedding_dim, dm),
                            ad.Tensor(emb[None, :].astype(x.dtype)))
    seq = ad.concat([time_tok, tokens], axis=0)
    for i in range(config.layers):
        p = f"layer{i}"
        normed = layer_norm(seq, store.tensor(f"{p}.ln1.g"), store.tensor(f"{p}.ln1.b"))
        seq = seq + _self_attention(store, p, config, normed, exact)
        normed = layer_norm(seq, store.tensor(f"{p}.ln2.g"), store.tensor(f"{p}.ln2.b"))
        seq = seq + ad.mlp_apply(store, f"{p}.mlp",
                                 ad.MlpSpec(dm, (4 * dm,), dm, activation="gelu"), normed)
    seq = layer_norm(seq, store.tensor("final_ln.g"), store.tensor("final_ln.b"))
    out = ad.mlp_apply(store, "out_proj", _linear_spec(dm, config.token_dim), seq)
    return out[1:]  # drop the time token's output


def split_blocks(x):
    """(M, 3+D) -> positions (M, 3), features (M, D)."""
    return x[:, :3], x[:, 3:]


def cloud_to_array(cloud: NeuralPointCloud) -> np.ndarray:
    return np.concatenate([cloud.positions, cloud.features], axis=1)


def array_to_cloud(x: np.ndarray) -> NeuralPointCloud:
    return NeuralPointCloud(x[:, :3].copy(), x[:, 3:].copy())


# ---------------------------------------------------------------------------
# training

def training_loss(store: ad.ParamStore, config: DenoiserConfig,
                  schedule: NoiseSchedule, batch, rng: np.random.Generator,
                  exact: bool = False) -> ad.Tensor:
    """Noise-prediction loss on a batch of normalized clouds.

    Per sample: draw t uniformly in [1, T] and unit noise, corrupt via
    forward_jump, predict, and score the mean of the position-noise MSE
    and the feature-noise MSE. The batch average is returned as a graph
    tensor ready for backward().
    """
    batch = list(batch)
    if not batch:
        raise ValueError("training_loss needs a non-empty batch")
    terms = []
    for cloud in batch:
        x0 = cloud_to_array(cloud) if isinstance(cloud, NeuralPointCloud) else np.asarray(cloud)
        if x0.shape != (config.m, config.token_dim):
            raise ValueError(f"cloud shape {x0.shape} does not match config "
                             f"({config.m}, {config.token_dim})")
        if np.max(np.abs(x0)) > UNNORMALIZED_LIMIT:
            warnings.warn("training cloud has values beyond +/-10; "
                          "inputs are expected in normalized space")
        t = int(rng.integers(1, schedule.timesteps + 1))
        eps = rng.standard_normal(x0.shape)
        x_t = forward_jump(x0, schedule, t, eps)
        pred = denoiser_apply(store, config, x_t.astype(store.dtype), t, exact=exact)
        diff = pred - eps.astype(store.dtype)
        mse_p = ad.tmean(diff[:, :3] ** 2.0)
        mse_f = ad.tmean(diff[:, 3:] ** 2.0)
        terms.append(0.5 * (mse_p + mse_f))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def ema_update(ema_store: ad.ParamStore, store: ad.ParamStore, decay: float = EMA_DECAY):
    """ema <- decay * ema + (1 - decay) * params, elementwise in place."""
    if set(ema_store.names()) != set(store.names()):
        raise ValueError("parameter structures do not match")
    for name in store.names():
        target, src = ema_store.get(name), store.get(name)
        if target.shape != src.shape:
            raise ValueError(f"shape mismatch for {name!r}: {target.shape} vs {src.shape}")
        target *= decay
        target += (1.0 - decay) * src


@dataclass(frozen=True)
class DiffusionTrainConfig:
    steps: int
    lr: float = 1e-4
    batch_size: int = 8
    ema_decay: float = EMA_DECAY

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")


@dataclass
class DiffusionTrainResult:
    store: ad.ParamStore
    ema_store: ad.ParamStore
    history: list
    steps: int


STAGE = "diffusion"


def train_denoiser(clouds, config: DenoiserConfig, schedule: NoiseSchedule,
                   cfg: DiffusionTrainConfig, seed: int,
                   store: ad.ParamStore = None, ema_store: ad.ParamStore = None,
                   start_step: int = 0, on_step=None) -> DiffusionTrainResult:
    """Adam on the noise-prediction loss with an EMA shadow of the weights.

    Each step draws its own substream from (seed, stage, step), so a run
    resumed from `start_step` with the saved stores continues on the
    exact trajectory of an uninterrupted run.
    """
    clouds = list(clouds)
    if not clouds:
        raise ValueError("train_denoiser needs at least one cloud")
    if store is None:
        if start_step:
            raise ValueError("resuming requires the stores from the checkpoint")
        store = init_denoiser(config, rngmod.stream(seed, STAGE, "init"))
    if ema_store is None:
        ema_store = store.copy(values_only=True)

    result = DiffusionTrainResult(store, ema_store, [], start_step)
    take = min(cfg.batch_size, len(clouds))
    for step in range(start_step, cfg.steps):
        g = rngmod.stream(seed, STAGE, "step", step)
        idx = g.choice(len(clouds), size=take, replace=False)
        loss = training_loss(store, config, schedule, [clouds[i] for i in idx], g)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"training loss is not finite at step {step + 1}")
        store.zero_grad()
        ad.backward(loss)
        ad.adam_step(store, lr=cfg.lr)
        ema_update(ema_store, store, cfg.ema_decay)
        result.history.append({"step": step + 1, "loss": value})
        result.steps = step + 1
        if on_step is not None:
            on_step(result, result.history[-1])
    return result
