"""
File: Synthetic scenes: smooth random feature fields, a known ground-truth field and sparse
noisy sensors sampling it

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import ConfigError
from .interfaces import SceneConfig, SyntheticScene, GridSpec, FeatureGrid, SensorReading
from .grid_data import map_sensors_to_labels

# ground truth: BASE + smooth(sum_k COEFFICIENTS[k] x_k + INTERACTION x_0 x_1) + residual
BASE_LEVEL = 10.0
COEFFICIENTS = (1.5, -1.0, 0.8, 0.6, -0.5, 0.4, -0.3, 0.2)
INTERACTION = 0.7
RESIDUAL_STD = 0.5
CLUSTER_SHARE = 0.75

# independent random streams, derived from the scene seed
_STATIC, _DYNAMIC, _RESIDUAL, _SENSORS, _NOISE, _RELEVANT, _OFFSETS = range(7)


def _rng(cfg: SceneConfig, stream: int, period: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream, period])


def validate_scene_config(cfg: SceneConfig) -> None:
    n_features = cfg.dynamic_features + cfg.static_features
    if cfg.height < 1 or cfg.width < 1 or cfg.time_steps < 1:
        raise ConfigError("Scene grid and time range must be non-empty")
    if cfg.dynamic_features < 0 or cfg.static_features < 0 or n_features < 1:
        raise ConfigError("A scene needs at least one feature")
    if not 1 <= cfg.n_relevant <= n_features:
        raise ConfigError(f"n_relevant must be in [1, {n_features}], got {cfg.n_relevant}")
    if not 1 <= cfg.n_sensors <= cfg.height * cfg.width:
        raise ConfigError(f"n_sensors must be in [1, {cfg.height * cfg.width}], "
                          f"got {cfg.n_sensors}")
    if cfg.placement not in ("uniform", "clustered"):
        raise ConfigError(f"Unknown sensor placement '{cfg.placement}'")
    if cfg.noise_std < 0 or cfg.corr_length < 0 or not cfg.cell_size > 0:
        raise ConfigError("noise_std and corr_length must be non-negative, cell_size positive")
    if not 0 <= cfg.temporal_ar < 1:
        raise ConfigError(f"temporal_ar must be in [0, 1), got {cfg.temporal_ar}")


def _smooth_noise(rng: np.random.Generator, shape: Tuple[int, ...], length: float) -> np.ndarray:
    """ Smoothed white noise over the last two axes, rescaled to unit std """
    noise = rng.standard_normal(shape)
    sigma = (0,) * (len(shape) - 2) + (length, length)
    field = gaussian_filter(noise, sigma=sigma, mode="reflect") if length > 0 else noise
    std = field.std()
    return (field - field.mean()) / (std if std > 0 else 1.0)


def _ar1(innovations: np.ndarray, coefficient: float) -> np.ndarray:
    """ Stationary unit-variance AR(1) along axis 0 """
    out = np.empty_like(innovations)
    out[0] = innovations[0]
    scale = np.sqrt(1.0 - coefficient ** 2)
    for t in range(1, len(innovations)):
        out[t] = coefficient * out[t - 1] + scale * innovations[t]
    return out


def choose_relevant(cfg: SceneConfig) -> List[int]:
    """
    Indices (dynamic features first) of the features that drive the truth. When both kinds
    exist, the first one is static and the second one dynamic so that the interaction term
    mixes a fixed and a moving field.
    """
    rng = _rng(cfg, _RELEVANT)
    dynamic = list(rng.permutation(cfg.dynamic_features))
    static = [cfg.dynamic_features + int(i) for i in rng.permutation(cfg.static_features)]
    chosen: List[int] = []
    if static:
        chosen.append(static.pop(0))
    if dynamic and len(chosen) < cfg.n_relevant:
        chosen.append(int(dynamic.pop(0)))
    rest = [int(i) for i in dynamic] + static
    rest = [rest[i] for i in rng.permutation(len(rest))]
    chosen += rest[:cfg.n_relevant - len(chosen)]
    return chosen


def compute_truth(features: np.ndarray, relevant: List[int], residual: np.ndarray,
                  corr_length: float) -> np.ndarray:
    """ Truth [T, H, W] from full features [T, H, W, P]; only the relevant channels matter """
    signal = np.zeros(features.shape[:3])
    for k, p in enumerate(relevant):
        signal += COEFFICIENTS[k % len(COEFFICIENTS)] * features[..., p]
    if len(relevant) >= 2:
        signal += INTERACTION * features[..., relevant[0]] * features[..., relevant[1]]
    if corr_length > 0:
        signal = gaussian_filter(signal, sigma=(0, corr_length, corr_length), mode="reflect")
    return BASE_LEVEL + signal + residual


def place_sensors(cfg: SceneConfig) -> List[Tuple[int, int]]:
    rng = _rng(cfg, _SENSORS)
    cells = [(r, c) for r in range(cfg.height) for c in range(cfg.width)]
    if cfg.placement == "uniform":
        picked = rng.choice(len(cells), size=cfg.n_sensors, replace=False)
        return sorted(cells[i] for i in picked)

    # clustered: most sensors in the lower-left quadrant
    inside = [cell for cell in cells if cell[0] * 2 < cfg.height and cell[1] * 2 < cfg.width]
    outside = [cell for cell in cells if cell not in set(inside)]
    n_inside = min(int(np.ceil(CLUSTER_SHARE * cfg.n_sensors)), len(inside))
    n_outside = cfg.n_sensors - n_inside
    if n_outside > len(outside):
        n_inside, n_outside = cfg.n_sensors - len(outside), len(outside)
    picked = [inside[i] for i in rng.choice(len(inside), size=n_inside, replace=False)]
    picked += [outside[i] for i in rng.choice(len(outside), size=n_outside, replace=False)]
    return sorted(picked)


def generate_scene(cfg: SceneConfig, period: int = 0) -> SyntheticScene:
    """
    Build a deterministic scene. Static features, relevant features and sensor sites depend on
    the seed only; dynamic features, residual and observation noise also depend on the period,
    so periods of one scene share their geography.
    """
    validate_scene_config(cfg)
    spec = GridSpec(0.0, 0.0, cfg.cell_size, cfg.height, cfg.width)
    shape = (cfg.time_steps, cfg.height, cfg.width)

    static_rng = _rng(cfg, _STATIC)
    static = np.stack([_smooth_noise(static_rng, shape[1:], cfg.corr_length)
                       for _ in range(cfg.static_features)] or [np.zeros(shape[1:])], axis=-1)
    static = static[..., :cfg.static_features]
    dynamic_rng = _rng(cfg, _DYNAMIC, period)
    dynamic = np.stack([_ar1(_smooth_noise(dynamic_rng, shape, cfg.corr_length), cfg.temporal_ar)
                        for _ in range(cfg.dynamic_features)] or [np.zeros(shape)], axis=-1)
    dynamic = dynamic[..., :cfg.dynamic_features]
    names = [f"dyn_{i}" for i in range(cfg.dynamic_features)] + \
        [f"static_{i}" for i in range(cfg.static_features)]
    features = FeatureGrid(spec, dynamic, static, names)

    relevant = choose_relevant(cfg)
    residual = RESIDUAL_STD * _ar1(_smooth_noise(_rng(cfg, _RESIDUAL, period), shape,
                                                 cfg.corr_length), cfg.temporal_ar)
    truth = compute_truth(features.full(), relevant, residual, cfg.corr_length)

    sites = place_sensors(cfg)
    site_rng = _rng(cfg, _OFFSETS)
    offsets = site_rng.uniform(0.05, 0.95, size=(len(sites), 2))
    noise_rng = _rng(cfg, _NOISE, period)
    readings = []
    for t in range(cfg.time_steps):
        noise = noise_rng.normal(0.0, cfg.noise_std, size=len(sites)) if cfg.noise_std > 0 \
            else np.zeros(len(sites))
        for s, ((r, c), (dx, dy)) in enumerate(zip(sites, offsets)):
            readings.append(SensorReading(
                f"S{s:03d}", (c + dx) * cfg.cell_size, (r + dy) * cfg.cell_size, t,
                float(truth[t, r, c] + noise[s])))

    labels, _ = map_sensors_to_labels(readings, spec, cfg.time_steps)
    return SyntheticScene(features, labels, readings, truth, relevant)
