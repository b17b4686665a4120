"""Flat dotted-key run configuration.

A config is a JSON object mapping dotted keys to scalars. Unknown keys are
rejected (misspelling a knob must fail loudly, not silently run defaults).
The canonical serialization (sorted keys, repr floats) feeds a sha256 that
stamps every CSV and checkpoint a run produces.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .losses import LossWeights, TauConfig
from .scenegen import DomainParams, SceneConfig, source_domain, target_domain
from .trainer import OptimConfig

__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Bad key or bad value in a run configuration."""


DEFAULTS: dict = {
    "scene.height": 32,
    "scene.width": 32,
    "scene.horizon_frac": 0.28,
    "scene.building_frac": 0.22,
    "scene.sidewalk_frac": 0.15,
    "scene.band_jitter": 2,
    "scene.max_cars": 3,
    "scene.max_pedestrians": 2,
    "scene.target.noise_std": 0.06,
    "scene.target.brightness": -0.04,
    "scene.target.horizon_shift": 0.03,
    "flow.num_scales": 2,
    "flow.steps_per_scale": 4,
    "flow.hidden_width": 32,
    "flow.scale_cap": 2.0,
    "flow.smooth_eps": 0.05,
    "flow.dequant_noise": 0.01,
    "optim.learning_rate": 2.5e-4,
    "optim.momentum": 0.9,
    "optim.weight_decay": 1e-4,
    "optim.batch_size": 8,
    "optim.max_steps": 1500,
    "optim.seed": 0,
    "loss.sigma1": 0.1,
    "loss.sigma2": 0.5,
    "loss.lambda_t": 1e-3,
    "loss.lambda_tau": 1.0,
    "loss.tau_form": "bilateral",
    "loss.warmup_frac": 0.1,
    "train.eval_every": 100,
    "train.val_frac": 0.2,
    "train.eval_samples": 32,
}

_INT_KEYS = {
    "scene.height",
    "scene.width",
    "scene.band_jitter",
    "scene.max_cars",
    "scene.max_pedestrians",
    "flow.num_scales",
    "flow.steps_per_scale",
    "flow.hidden_width",
    "optim.batch_size",
    "optim.max_steps",
    "optim.seed",
    "train.eval_every",
    "train.eval_samples",
}
_STR_KEYS = {"loss.tau_form"}


class RunConfig:
    """Validated knob set; ``values`` holds every key (defaults applied)."""

    def __init__(self, overrides: dict | None = None) -> None:
        values = dict(DEFAULTS)
        for key, val in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key!r}")
            values[key] = val
        for key, val in values.items():
            if key in _STR_KEYS:
                if not isinstance(val, str):
                    raise ConfigError(f"{key} must be a string, got {val!r}")
            elif key in _INT_KEYS:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ConfigError(f"{key} must be an integer, got {val!r}")
            elif isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{key} must be a number, got {val!r}")
        self.values = values
        # construction of the typed views validates ranges eagerly
        self.scene_config()
        self.optim_config()
        self.tau_config()
        self.loss_weights()
        self.flow_kwargs()

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical_json(self) -> str:
        enc = {
            k: (v if isinstance(v, (int, str)) else repr(float(v)))
            for k, v in self.values.items()
        }
        return json.dumps(enc, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    # typed views -------------------------------------------------------

    def scene_config(self) -> SceneConfig:
        v = self.values
        try:
            return SceneConfig(
                height=v["scene.height"],
                width=v["scene.width"],
                horizon_frac=float(v["scene.horizon_frac"]),
                building_frac=float(v["scene.building_frac"]),
                sidewalk_frac=float(v["scene.sidewalk_frac"]),
                band_jitter=v["scene.band_jitter"],
                max_cars=v["scene.max_cars"],
                max_pedestrians=v["scene.max_pedestrians"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def source_params(self) -> DomainParams:
        return source_domain()

    def target_params(self) -> DomainParams:
        v = self.values
        try:
            return target_domain(
                noise_std=float(v["scene.target.noise_std"]),
                brightness=float(v["scene.target.brightness"]),
                horizon_shift=float(v["scene.target.horizon_shift"]),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def optim_config(self, max_steps: int | None = None, seed: int | None = None) -> OptimConfig:
        v = self.values
        try:
            return OptimConfig(
                learning_rate=float(v["optim.learning_rate"]),
                momentum=float(v["optim.momentum"]),
                weight_decay=float(v["optim.weight_decay"]),
                batch_size=v["optim.batch_size"],
                max_steps=v["optim.max_steps"] if max_steps is None else max_steps,
                seed=v["optim.seed"] if seed is None else seed,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def tau_config(self) -> TauConfig:
        v = self.values
        try:
            return TauConfig(
                sigma1=float(v["loss.sigma1"]),
                sigma2=float(v["loss.sigma2"]),
                form=v["loss.tau_form"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def loss_weights(self) -> LossWeights:
        v = self.values
        try:
            return LossWeights(
                lambda_t=float(v["loss.lambda_t"]),
                lambda_tau=float(v["loss.lambda_tau"]),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def flow_kwargs(self) -> dict:
        v = self.values
        for key in ("flow.num_scales", "flow.steps_per_scale", "flow.hidden_width"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        if v["flow.scale_cap"] <= 0:
            raise ConfigError(f"flow.scale_cap must be positive, got {v['flow.scale_cap']}")
        if not 0.0 <= v["flow.smooth_eps"] < 1.0:
            raise ConfigError(f"flow.smooth_eps must be in [0, 1), got {v['flow.smooth_eps']}")
        if v["flow.dequant_noise"] < 0:
            raise ConfigError(f"flow.dequant_noise must be >= 0, got {v['flow.dequant_noise']}")
        return {
            "num_scales": v["flow.num_scales"],
            "steps_per_scale": v["flow.steps_per_scale"],
            "hidden_width": v["flow.hidden_width"],
            "scale_cap": float(v["flow.scale_cap"]),
        }


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON override file (or None for pure defaults)."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return RunConfig(raw)
