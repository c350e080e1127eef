"""Generation loops: unconditional sampling and disentangled sampling
with one pinned modality.

Disentangled sampling pins either positions (appearance-only: features
are generated for a given shape) or features (shape-only). The pinned
modality is driven through the forward process with one fixed noise
draw, reused at every level; the free modality runs the reverse
process. For the last `n_rev` steps the pin is released and both
modalities follow the reverse process, and inside the last `n_repaint`
steps (while the pin is still active) each step runs `n_resample`
re-noise/re-denoise loops on the free modality for coherence.

Noise is drawn from substreams keyed by (seed, purpose, timestep), one
purpose per role: "init-positions", "init-features",
"noise-positions"/t, "noise-features"/t, "resample-forward"/(t, r),
"resample-reverse"/(t, r). Anchoring the purposes to modalities rather
than to roles makes the conditional loop with n_rev = T consume the
exact stream of the unconditional loop, so the two are byte-identical
by construction; it also keeps draws independent of evaluation order.
The final reverse step (t = 1) never draws reverse noise in any path.

Values computed by a reverse step are clipped to the dataset bounds in
normalized space; forward-projected pinned values are left unclipped so
the pinned trajectory stays on its closed form
x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps_pin for all t > n_rev.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from . import rng as rngmod
from .errors import ConfigError
from .pointcloud import NeuralPointCloud, NormalizationStats, denormalize

STAGE = "sample"


@dataclass(frozen=True)
class SamplerConfig:
    n_rev: int
    n_repaint: int
    n_resample: int

    def validate(self, timesteps: int):
        if not 0 <= self.n_rev <= timesteps:
            raise ConfigError(f"n_rev {self.n_rev} outside [0, {timesteps}]")
        if not 0 <= self.n_repaint <= timesteps:
            raise ConfigError(f"n_repaint {self.n_repaint} outside [0, {timesteps}]")
        if self.n_resample < 0:
            raise ConfigError(f"n_resample must be >= 0, got {self.n_resample}")

    def to_json(self) -> dict:
        return {"n_rev": self.n_rev, "n_repaint": self.n_repaint,
                "n_resample": self.n_resample}

    @classmethod
    def from_json(cls, obj: dict) -> "SamplerConfig":
        return cls(int(obj["n_rev"]), int(obj["n_repaint"]), int(obj["n_resample"]))


PRESETS = {
    "srn-chairs-appearance": SamplerConfig(n_rev=15, n_repaint=50, n_resample=10),
    "srn-cars-appearance": SamplerConfig(n_rev=15, n_repaint=80, n_resample=40),
    "chairs-shape": SamplerConfig(n_rev=50, n_repaint=100, n_resample=2),
    "cars-shape": SamplerConfig(n_rev=50, n_repaint=0, n_resample=0),
}


def expected_denoiser_calls(timesteps: int, cfg: SamplerConfig) -> int:
    """Closed-form denoiser invocation count for one sample."""
    window = sum(1 for t in range(1, timesteps + 1)
                 if t <= cfg.n_repaint and t >= cfg.n_rev)
    return timesteps + window * cfg.n_resample


@dataclass
class Instrumentation:
    """Per-sample hooks: denoiser call counter, the fixed pin noise, and
    an optional trajectory recorder (levels divisible by record_every,
    states in normalized space)."""

    record_every: int = 0
    denoiser_calls: int = 0
    pin_noise: np.ndarray = None
    trajectory: list = field(default_factory=list)

    def record(self, level: int, positions: np.ndarray, features: np.ndarray):
        if self.record_every and level % self.record_every == 0:
            self.trajectory.append((level, np.concatenate([positions, features], axis=1)))


def _noise(seed: int, purpose: str, *tags, shape):
    return rngmod.stream(seed, STAGE, purpose, *tags).standard_normal(shape)


def _clip(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.clip(x, lo, hi)


def _generate(store, dcfg: df.DenoiserConfig, schedule: df.NoiseSchedule,
              clip_bounds, seed: int, pin_positions=None, pin_features=None,
              sampler_cfg: SamplerConfig = None, instr: Instrumentation = None,
              exact: bool = False) -> np.ndarray:
    """Shared denoising loop; returns the final normalized (M, 3+D) state."""
    if pin_positions is not None and pin_features is not None:
        raise ConfigError("at most one modality may be pinned")
    t_max = schedule.timesteps
    m, d = dcfg.m, dcfg.d
    pos_lo, pos_hi, feat_lo, feat_hi = [np.asarray(b, dtype=np.float64)
                                        for b in clip_bounds]
    if pos_lo.shape != (3,) or feat_lo.shape != (d,):
        raise ValueError(f"clip bounds do not match dimensions 3/{d}")

    pin = None
    if pin_positions is not None:
        pin = "positions"
        x0_pin = np.asarray(pin_positions, dtype=np.float64)
        if x0_pin.shape != (m, 3):
            raise ValueError(f"pinned positions must be ({m}, 3), got {x0_pin.shape}")
    elif pin_features is not None:
        pin = "features"
        x0_pin = np.asarray(pin_features, dtype=np.float64)
        if x0_pin.shape != (m, d):
            raise ValueError(f"pinned features must be ({m}, {d}), got {x0_pin.shape}")
    if pin is not None:
        if not np.all(np.isfinite(x0_pin)):
            raise ValueError("pinned modality contains non-finite values")
        if sampler_cfg is None:
            raise ConfigError("pinned sampling requires a SamplerConfig")
        sampler_cfg.validate(t_max)
    if instr is None:
        instr = Instrumentation()

    init_p = _noise(seed, "init-positions", shape=(m, 3))
    init_f = _noise(seed, "init-features", shape=(m, d))
    n_rev = sampler_cfg.n_rev if pin is not None else t_max
    pin_noise = None
    if pin == "positions":
        pin_noise = init_p
        instr.pin_noise = init_p.copy()
        p = init_p if n_rev == t_max else df.forward_jump(x0_pin, schedule, t_max, init_p)
        f = init_f
    elif pin == "features":
        pin_noise = init_f
        instr.pin_noise = init_f.copy()
        f = init_f if n_rev == t_max else df.forward_jump(x0_pin, schedule, t_max, init_f)
        p = init_p
    else:
        p, f = init_p, init_f
    instr.record(t_max, p, f)

    def denoise(p_t, f_t, t):
        instr.denoiser_calls += 1
        out = df.denoiser_apply(store, dcfg, np.concatenate([p_t, f_t], axis=1),
                                t, exact=exact).data
        return out[:, :3], out[:, 3:]

    def reverse_block(x_t, eps_hat, t, purpose, lo, hi, tags=()):
        noise = None if t == 1 else _noise(seed, purpose, t, *tags, shape=x_t.shape)
        return _clip(df.reverse_step(x_t, eps_hat, schedule, t, noise), lo, hi)

    for t in range(t_max, 0, -1):
        eps_p, eps_f = denoise(p, f, t)

        if pin == "positions":
            f_next = reverse_block(f, eps_f, t, "noise-features", feat_lo, feat_hi)
            if t > n_rev:
                p_next = x0_pin if t == 1 else df.forward_jump(
                    x0_pin, schedule, t - 1, pin_noise)
            else:
                p_next = reverse_block(p, eps_p, t, "noise-positions", pos_lo, pos_hi)
        elif pin == "features":
            p_next = reverse_block(p, eps_p, t, "noise-positions", pos_lo, pos_hi)
            if t > n_rev:
                f_next = x0_pin if t == 1 else df.forward_jump(
                    x0_pin, schedule, t - 1, pin_noise)
            else:
                f_next = reverse_block(f, eps_f, t, "noise-features", feat_lo, feat_hi)
        else:
            p_next = reverse_block(p, eps_p, t, "noise-positions", pos_lo, pos_hi)
            f_next = reverse_block(f, eps_f, t, "noise-features", feat_lo, feat_hi)

        if pin is not None and t <= sampler_cfg.n_repaint and t >= n_rev:
            for r in range(sampler_cfg.n_resample):
                renoise = _noise(seed, "resample-forward", t, r,
                                 shape=f_next.shape if pin == "positions" else p_next.shape)
                if pin == "positions":
                    f_t = df.forward_step(f_next, schedule, t, renoise)
                    _, eps_f = denoise(p, f_t, t)
                    f_next = reverse_block(f_t, eps_f, t, "resample-reverse",
                                           feat_lo, feat_hi, tags=(r,))
                else:
                    p_t = df.forward_step(p_next, schedule, t, renoise)
                    eps_p, _ = denoise(p_t, f, t)
                    p_next = reverse_block(p_t, eps_p, t, "resample-reverse",
                                           pos_lo, pos_hi, tags=(r,))

        p, f = p_next, f_next
        instr.record(t - 1, p, f)
    return np.concatenate([p, f], axis=1)


def _finish(x0: np.ndarray, stats: NormalizationStats) -> NeuralPointCloud:
    return denormalize(NeuralPointCloud(x0[:, :3].copy(), x0[:, 3:].copy()), stats)


def sample_unconditional(store, dcfg: df.DenoiserConfig, schedule: df.NoiseSchedule,
                         stats: NormalizationStats, clip_bounds, seed: int,
                         exact: bool = False,
                         instr: Instrumentation = None) -> NeuralPointCloud:
    """Draw positions and features from unit Gaussians and denoise for T
    steps, clipping to the dataset bounds after every step; the result
    is denormalized."""
    x0 = _generate(store, dcfg, schedule, clip_bounds, seed, instr=instr, exact=exact)
    return _finish(x0, stats)


def appearance_only_sample(pinned_positions, store, dcfg: df.DenoiserConfig,
                           schedule: df.NoiseSchedule, cfg: SamplerConfig,
                           stats: NormalizationStats, clip_bounds, seed: int,
                           exact: bool = False,
                           instr: Instrumentation = None) -> NeuralPointCloud:
    """Generate features for the given normalized positions."""
    x0 = _generate(store, dcfg, schedule, clip_bounds, seed,
                   pin_positions=pinned_positions, sampler_cfg=cfg,
                   instr=instr, exact=exact)
    return _finish(x0, stats)


def shape_only_sample(pinned_features, store, dcfg: df.DenoiserConfig,
                      schedule: df.NoiseSchedule, cfg: SamplerConfig,
                      stats: NormalizationStats, clip_bounds, seed: int,
                      exact: bool = False,
                      instr: Instrumentation = None) -> NeuralPointCloud:
    """Generate positions for the given normalized features."""
    x0 = _generate(store, dcfg, schedule, clip_bounds, seed,
                   pin_features=pinned_features, sampler_cfg=cfg,
                   instr=instr, exact=exact)
    return _finish(x0, stats)
