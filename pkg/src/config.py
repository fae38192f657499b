"""
File: Configuration Options

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import hashlib
import json
from typing import List, Dict, Any

import yaml


class LatteException(Exception):
    """ Root of all errors raised by the library """
    exit_code: int = 1


class ValidationError(LatteException):
    """ Invalid input: files, shapes, configuration values """
    exit_code = 2


class NumericError(LatteException):
    """ Non-finite numbers and a diverging optimization """
    exit_code = 3


class ConfigError(ValidationError):
    pass


class ConfCls:
    config_path: str = ""
    # ==============================================================================================
    # General
    seed: int = 0
    """ seed: the only source of randomness; every generator in the pipeline derives from it """

    # ==============================================================================================
    # Grid
    grid_origin_easting: float = 0.0
    """ grid_origin_easting: easting of the lower-left grid corner [m] """
    grid_origin_northing: float = 0.0
    """ grid_origin_northing: northing of the lower-left grid corner [m] """
    grid_cell_size: float = 500.0
    """ grid_cell_size: side of a square cell [m] """
    grid_height: int = 24
    """ grid_height: number of cell rows """
    grid_width: int = 24
    """ grid_width: number of cell columns """
    grid_time_steps: int = 48
    """ grid_time_steps: number of hourly time steps covered by the data """

    # ==============================================================================================
    # Synthetic Scene
    scene_dynamic_features: int = 4
    """ scene_dynamic_features: number of time-varying features (P_d) """
    scene_static_features: int = 16
    """ scene_static_features: number of time-invariant features (P_s) """
    scene_relevant_features: int = 3
    """ scene_relevant_features: number of features that actually drive the ground truth """
    scene_sensors: int = 40
    """ scene_sensors: number of sensor locations """
    scene_sensor_placement: str = "clustered"
    """ scene_sensor_placement: spatial distribution of the sensors """
    scene_noise_std: float = 0.3
    """ scene_noise_std: std of the Gaussian observation noise """
    scene_spatial_corr_length: float = 2.0
    """ scene_spatial_corr_length: smoothing length of the ground truth [cells] """
    scene_temporal_ar: float = 0.6
    """ scene_temporal_ar: AR(1) coefficient of the temporal correlation, in [0, 1) """

    # ==============================================================================================
    # Model
    model_latent_dim: int = 32
    """ model_latent_dim: size of the auto-encoder embedding """
    model_ae_hidden: int = 64
    """ model_ae_hidden: width of the hidden layer of the encoder and of the decoder """
    model_hidden: int = 64
    """ model_hidden: number of hidden channels of each ConvLSTM branch """
    model_kernels: List[int] = [1, 3, 5]
    """ model_kernels: kernel sizes of the ConvLSTM branches (must be odd) """
    model_head_hidden: int = 64
    """ model_head_hidden: width of the hidden layer of the prediction head """
    model_sparse_threshold: float = 1e-4
    """ model_sparse_threshold: sparse-layer weights below this magnitude switch a feature off """
    model_window: int = 7
    """ model_window: number of time steps in an input window (t-6 ... t by default) """
    model_spatial_steps: int = 1
    """ model_spatial_steps: K_S, number of spatial neighbourhood rings in the representation
    constraint """
    model_temporal_steps: int = 1
    """ model_temporal_steps: K_T, number of temporal neighbourhood steps in the representation
    constraint """

    # ==============================================================================================
    # Loss Weights
    loss_alpha: float = 1.0
    """ loss_alpha: weight of the L1 penalty of the sparse layer """
    loss_beta: float = 5.0
    """ loss_beta: weight of the auto-encoder reconstruction loss """
    loss_lambda: float = 5.0
    """ loss_lambda: weight of the spatiotemporal representation constraint """
    loss_eta: float = 0.1
    """ loss_eta: weight of the autocorrelation loss """
    loss_lambda_spatial: float = 1.0
    """ loss_lambda_spatial: lambda_1, spatial part of the representation constraint """
    loss_lambda_temporal: float = 1.0
    """ loss_lambda_temporal: lambda_2, temporal part of the representation constraint """

    # ==============================================================================================
    # Training
    train_lr: float = 0.001
    """ train_lr: learning rate of the joint optimization """
    train_max_epochs: int = 60
    """ train_max_epochs: upper bound on the number of epochs """
    train_patience: int = 10
    """ train_patience: early-stopping patience [epochs without validation improvement] """
    train_batch: int = 2
    """ train_batch: number of windows per optimizer step """
    train_clip_norm: float = 5.0
    """ train_clip_norm: global gradient norm above which gradients are rescaled """
    pretrain_epochs: int = 50
    """ pretrain_epochs: auto-encoder pre-training epochs (zero disables pre-training) """
    pretrain_lr: float = 0.005
    """ pretrain_lr: learning rate of the auto-encoder pre-training """
    pretrain_batch: int = 256
    """ pretrain_batch: number of cell vectors per pre-training step """

    # ==============================================================================================
    # Variogram
    variogram_lag_size: float = 0.1
    """ variogram_lag_size: width of a lag bin on the rescaled [0, 1] axis """
    variogram_min_pairs: int = 5
    """ variogram_min_pairs: minimal number of pairs for a bin to enter the autocorrelation loss """
    variogram_refit_every: int = 1
    """ variogram_refit_every: refit the embedding-space semivariogram every N epochs """
    variogram_max_points: int = 2000
    """ variogram_max_points: above this number of points, pairs are subsampled """
    variogram_max_pairs: int = 2000000
    """ variogram_max_pairs: number of pairs drawn when subsampling """
    variogram_step_pairs: int = 100000
    """ variogram_step_pairs: pair budget of the prediction side on every training step """

    # ==============================================================================================
    # Baselines
    idw_power: float = 2.0
    """ idw_power: power parameter of inverse distance weighting """
    kriging_bins: int = 10
    """ kriging_bins: number of lag bins of the ordinary kriging variogram """

    # ==============================================================================================
    # Output
    logging_modes: List[str] = ["info", "stat"]
    """ logging_modes: """

    # ==============================================================================================
    # Internal
    _borg_shared_state: Dict = {}
    _option_values: Dict[str, List] = {
        "scene_sensor_placement": ["uniform", "clustered"],
        "logging_modes": ["info", "stat", "dbg_training", "dbg_variogram", "dbg_timestamp", ""],
    }
    _positive: List[str] = [
        "grid_cell_size", "grid_height", "grid_width", "grid_time_steps", "model_latent_dim",
        "model_ae_hidden", "model_hidden", "model_head_hidden", "model_window",
        "model_spatial_steps", "model_temporal_steps", "train_lr", "train_patience",
        "train_batch", "pretrain_batch", "variogram_lag_size", "variogram_refit_every",
        "kriging_bins", "idw_power", "train_clip_norm", "variogram_max_points",
        "variogram_max_pairs", "variogram_step_pairs"
    ]

    # Implementation of Borg pattern
    def __init__(self) -> None:
        self.setattr_internal("__dict__", self._borg_shared_state)

    def __setattr__(self, name, value):
        # Sanity checks
        if name[0] == "_":
            raise ConfigError(
                f"ERROR: Attempting to set an internal configuration variable {name}.")
        if getattr(self, name, None) is None:
            raise ConfigError(f"ERROR: Unknown configuration variable {name}.\n"
                              f"It's likely a typo in the configuration file.")
        current = self.__getattribute__(name)
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if type(current) != type(value):
            raise ConfigError(f"ERROR: Wrong type of the configuration variable {name}.\n"
                              f"It's likely a typo in the configuration file.")

        # value checks
        if self._option_values.get(name, '') != '':
            invalid = False
            if isinstance(value, List):
                for v in value:
                    if v not in self._option_values[name]:
                        invalid = True
                        break
            else:
                invalid = value not in self._option_values[name]
            if invalid:
                raise ConfigError(
                    f"ERROR: Unknown value '{value}' of config variable '{name}'\n"
                    f"Possible options: {self._option_values[name]}")
        if name in self._positive and value <= 0:
            raise ConfigError(f"ERROR: Configuration variable {name} must be positive")
        if name.startswith("loss_") and value < 0:
            raise ConfigError(f"ERROR: Loss weight {name} must be non-negative")
        if name == "model_kernels":
            if not value or any(not isinstance(k, int) or k < 1 or k % 2 == 0 for k in value):
                raise ConfigError("ERROR: ConvLSTM kernel sizes must be odd positive integers")
        if name == "scene_temporal_ar" and not 0 <= value < 1:
            raise ConfigError("ERROR: scene_temporal_ar must be in [0, 1)")
        if name == "variogram_lag_size" and value > 1:
            raise ConfigError("ERROR: variogram_lag_size must be in (0, 1]")

        super().__setattr__(name, value)

    def setattr_internal(self, name, val):
        """ Bypass value checks and set an internal config variable. Use with caution! """
        super().__setattr__(name, val)

    def load(self, path: str) -> None:
        """ Apply a YAML (or JSON) configuration file on top of the current values """
        with open(path, "r") as f:
            config_update = yaml.safe_load(f)
        if config_update is None:
            config_update = {}
        if not isinstance(config_update, dict):
            raise ConfigError(f"ERROR: {path} must contain a mapping of configuration options")
        self.setattr_internal("config_path", path)
        for var, value in config_update.items():
            setattr(self, var, value)

    def options(self) -> Dict[str, Any]:
        """ All public options with their current values """
        names = [n for n in dir(ConfCls) if not n.startswith("_") and n != "config_path"]
        return {
            n: getattr(self, n) for n in sorted(names) if not callable(getattr(ConfCls, n))
        }

    def digest(self) -> str:
        canonical = json.dumps(self.options(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


CONF = ConfCls()
