"""Run configuration: one JSON document with defaulted sections.

A config resolves against the defaults below; unknown keys are rejected
with their dotted path. The content hash of the fully resolved document
(canonical JSON, sorted keys) is stamped into every artifact a command
writes, so outputs can be traced back to the exact settings that
produced them regardless of key order in the source file.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

DEFAULTS = {
    "dataset": {
        "n_objects": 8,
        "views_per_object": 8,
        "test_views_per_object": 4,
        "m_points": 64,
        "image_size": 32,
        "n_dense": 4096,
        "radius": 1.3,
        "classes": ["chair-like", "car-like"],
    },
    "autodecoder": {
        "lr": 1e-3,
        "epochs": 25,
        "rays_per_view": 64,
        "init_mode": "zero",
        "variational": False,
        "lambda_tv": 0.0,
        "lambda_kl": 0.0,
        "tv_neighbors": 3,
        "init_logvar": -4.0,
        "feature_dim": 8,
        "hidden": 32,
        "agg_width": 32,
        "shading_points": 16,
        "neighbors_k": 8,
        "neighbor_radius": 0.0,  # 0 derives the radius from point spacing
        "ray_chunk": 256,
        "checkpoint_every": 0,  # 0 checkpoints only at completion
    },
    "diffusion": {
        "steps": 2000,
        "checkpoint_every": 0,
        "lr": 1e-4,
        "batch_size": 8,
        "ema_decay": 0.9999,
        "timesteps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "layers": 4,
        "model_dim": 64,
        "heads": 4,
        "time_embedding_dim": 32,
    },
    "sampler": {
        "n_samples": 8,
        "n_rev": 0,
        "n_repaint": 0,
        "n_resample": 0,
        "use_ema": True,
        "render_views": 0,
        "render_image_size": 32,
        "render_radius": 1.3,
    },
    "eval": {
        "metrics": ["one_nn_chamfer", "one_nn_emd"],
    },
}


def _check_value(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{path} has unsupported default type {type(default)}")


def resolve(document: dict) -> dict:
    """Merge a partial document over the defaults, rejecting unknown keys."""
    if not isinstance(document, dict):
        raise ConfigError(f"config root must be an object, got {type(document).__name__}")
    resolved = copy.deepcopy(DEFAULTS)
    for section, body in document.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            resolved[section][key] = _check_value(f"{section}.{key}",
                                                  DEFAULTS[section][key], value)
    return resolved


def canonical_json(document) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def from_document(cls, document: dict) -> "RunConfig":
        return cls(resolve(document))

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(resolve({}))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid config JSON in {path}: {e}") from e
        return cls.from_document(document)

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.data[name])

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.data).encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """New config with dotted-path overrides ("sampler.n_rev": 15)
        applied and re-validated."""
        doc = copy.deepcopy(self.data)
        for path, value in overrides.items():
            parts = path.split(".")
            if len(parts) != 2:
                raise ConfigError(f"override path must be section.key, got {path!r}")
            section, key = parts
            if section not in doc or key not in doc[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            doc[section][key] = value
        return RunConfig.from_document(doc)
