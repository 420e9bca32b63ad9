"""Run configuration: one JSON file, strict keys, dotted ``--set`` overrides.

Randomness flows from the single ``seed`` field.  Each consumer draws from
``np.random.SeedSequence([seed, tag])`` with a fixed integer tag per purpose
(see ``SEED_TAGS``), so adding a consumer never shifts existing streams.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from .bayes import NoiseModel
from .pipeline import GaussianBump, SyntheticSource, calibrate_sigmas, midpoint_times, scaled_reference_source, \
    synth_source_eval
from .prior import EllipticOperator, PriorSpec, alpha2_for_range
from .wave import GridSpec, ObservationSpec, PhysicalConstants, WaveModel, default_observation


class ConfigError(ValueError):
    pass


SEED_TAGS = {"noise": 1, "prior_draws": 2, "bench": 3, "oracle": 4}

DEFAULTS: dict = {
    "model": {
        "grid": {"seafloor_dim": 1, "nx": 65, "ny": 1, "nz": 9, "dx": 250.0, "dy": 250.0, "dz": 125.0,
                 "max_state": 5_000_000},
        "constants": {"rho": 1000.0, "bulk_modulus": 2.25e9, "gravity": 9.81},
        "observation": {
            "sensor_fracs": [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875],
            "qoi_fracs": [0.5, 0.625, 0.75, 0.875],
            "sensor_indices": None,
            "qoi_indices": None,
            "data_dt": 0.5,
            "n_steps": 80,
            "qoi_subsample": 2,
        },
        "safety": 0.5,
    },
    # alpha2 = null picks a practical correlation range of range_fraction * Lx
    "prior": {"alpha1": 1.0, "alpha2": None, "range_fraction": 0.125, "robin_coeff": None, "mean": 0.0},
    # preset "scaled_reference": three-Gaussian event rescaled to the grid extent
    "source": {"preset": "scaled_reference", "gaussians": None},
    "noise_level": 0.02,
    "likelihood_noise_level": None,
    "seed": 0,
    "paths": {"artifact_dir": "artifacts", "output_dir": "results"},
    "dense_cap": 100_000_000,
    "threads": None,
}

_BUMP_KEYS = {"amplitude", "rise_time", "width_x", "center_x", "width_y", "center_y"}


def _merge(base: dict, new: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in new.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    patch: dict = {}
    cur = patch
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = _parse_value(raw)
    return _merge(cfg, patch)


def load_config(path=None, overrides=(), seed=None, threads=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        user.pop("_comment", None)
        cfg = _merge(cfg, user)
    for ov in overrides:
        cfg = apply_override(cfg, ov)
    if seed is not None:
        cfg["seed"] = seed
    if threads is not None:
        cfg["threads"] = threads
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Build every object once so bad values surface as ``ConfigError``."""
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg["noise_level"] is None or cfg["noise_level"] < 0:
        raise ConfigError("noise_level must be >= 0")
    if likelihood_level(cfg) <= 0:
        raise ConfigError("likelihood_noise_level (or noise_level) must be > 0 to build the noise covariance")
    if cfg["threads"] is not None and (not isinstance(cfg["threads"], int) or cfg["threads"] < 1):
        raise ConfigError("threads must be a positive integer")
    try:
        grid = build_grid(cfg)
        build_observation(cfg, grid)
        build_prior_spec(cfg, grid)
        build_source(cfg, grid).check_inside(grid)
        PhysicalConstants(**cfg["model"]["constants"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def likelihood_level(cfg: dict) -> float:
    lv = cfg["likelihood_noise_level"]
    return float(cfg["noise_level"] if lv is None else lv)


def seed_sequence(cfg: dict, purpose: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg["seed"], SEED_TAGS[purpose]])


# -- builders ------------------------------------------------------------------------

def build_grid(cfg: dict) -> GridSpec:
    return GridSpec(**cfg["model"]["grid"])


def build_observation(cfg: dict, grid: GridSpec) -> ObservationSpec:
    o = cfg["model"]["observation"]
    base = default_observation(grid, o["data_dt"], o["n_steps"], o["qoi_subsample"],
                               tuple(o["sensor_fracs"]), tuple(o["qoi_fracs"]))
    obs = ObservationSpec(
        tuple(o["sensor_indices"]) if o["sensor_indices"] is not None else base.sensor_indices,
        tuple(o["qoi_indices"]) if o["qoi_indices"] is not None else base.qoi_indices,
        float(o["data_dt"]), int(o["n_steps"]), int(o["qoi_subsample"]))
    obs.validate(grid)
    return obs


def build_model(cfg: dict) -> WaveModel:
    grid = build_grid(cfg)
    return WaveModel(grid, PhysicalConstants(**cfg["model"]["constants"]), build_observation(cfg, grid),
                     safety=float(cfg["model"]["safety"]))


def build_prior_spec(cfg: dict, grid: GridSpec) -> PriorSpec:
    p = cfg["prior"]
    alpha1 = float(p["alpha1"])
    alpha2 = p["alpha2"]
    if alpha2 is None:
        alpha2 = alpha2_for_range(p["range_fraction"] * grid.extent[0], grid.seafloor_dim, alpha1)
    return PriorSpec(alpha1, float(alpha2), p["robin_coeff"])


def build_prior(cfg: dict, grid: GridSpec | None = None) -> EllipticOperator:
    grid = grid or build_grid(cfg)
    return EllipticOperator(grid, build_prior_spec(cfg, grid))


def prior_mean_field(cfg: dict, model: WaveModel) -> np.ndarray:
    return np.full((model.obs.n_steps, model.n_param), float(cfg["prior"]["mean"]))


def build_source(cfg: dict, grid: GridSpec) -> SyntheticSource:
    s = cfg["source"]
    if s["gaussians"] is not None:
        bumps = []
        for g in s["gaussians"]:
            extra = set(g) - _BUMP_KEYS
            if extra:
                raise ConfigError(f"unknown Gaussian keys {sorted(extra)}")
            bumps.append(GaussianBump(**g))
        return SyntheticSource(tuple(bumps))
    if s["preset"] == "scaled_reference":
        return scaled_reference_source(grid)
    raise ConfigError(f"unknown source preset {s['preset']!r}")


def true_data(cfg: dict, model: WaveModel):
    """Noise-free sensor traces of the configured source (one forward march)."""
    m = synth_source_eval(build_source(cfg, model.grid), model.grid,
                          midpoint_times(model.obs.n_steps, model.obs.data_dt))
    return model.simulate_p2o(m)


def build_noise(cfg: dict, model: WaveModel) -> NoiseModel:
    """Per-sensor sigmas scaled from the configured source's noise-free traces."""
    level = likelihood_level(cfg)
    sig = calibrate_sigmas(true_data(cfg, model).values, level)
    return NoiseModel.from_sensor_sigmas(sig, model.obs.n_steps, level)


# -- hashes --------------------------------------------------------------------------

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def maps_hash(cfg: dict) -> str:
    """Phase 1 artifacts depend on the model and (through G*) the prior."""
    return _digest({"model": cfg["model"], "prior": cfg["prior"]})


def posterior_hash(cfg: dict) -> str:
    return _digest({"model": cfg["model"], "prior": cfg["prior"], "source": cfg["source"],
                    "likelihood_noise_level": likelihood_level(cfg)})
