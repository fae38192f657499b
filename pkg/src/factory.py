"""
File: Configuration factory

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""

from typing import Dict, Type, Callable, Optional, Iterable

from . import baselines, interfaces
from .interfaces import ModelConfig, TrainConfig, SceneConfig, LossWeights, GridDataset, Cell
from .network import LatteModel
from .config import CONF, ConfigError

PREDICTORS: Dict[str, Type[interfaces.Predictor]] = {
    "idw": baselines.IdwPredictor,
    "ok": baselines.KrigingPredictor,
}

# each ablation switches one loss term off
ABLATIONS: Dict[str, Callable[[LossWeights], LossWeights]] = {
    "feature_selection": lambda w: w._replace(alpha=0.0),
    "autocorrelation": lambda w: w._replace(eta=0.0),
}


def _get_from_config(options: Dict, key: str, conf_option_name: str, *args):
    GenCls = options.get(key, None)
    if GenCls:
        return GenCls(*args)

    raise ConfigError(
        f"ERROR: unknown value {key} of `{conf_option_name}` configuration option")


def get_predictor(method: str, data: GridDataset,
                  cells: Optional[Iterable[Cell]] = None) -> interfaces.Predictor:
    predictor = _get_from_config(PREDICTORS, method, "method", data, cells)
    if isinstance(predictor, baselines.IdwPredictor):
        predictor.power = CONF.idw_power
    elif isinstance(predictor, baselines.KrigingPredictor):
        predictor.n_bins = CONF.kriging_bins
        predictor.seed = CONF.seed
    return predictor


def get_model(n_features: int) -> LatteModel:
    return LatteModel(ModelConfig.from_conf(n_features))


def get_train_config(drop: Optional[str] = None) -> TrainConfig:
    cfg = TrainConfig.from_conf()
    if drop is None:
        return cfg
    if drop not in ABLATIONS:
        raise ConfigError(f"ERROR: unknown value {drop} of `drop` option. "
                          f"Possible options: {sorted(ABLATIONS)}")
    return cfg._replace(weights=ABLATIONS[drop](cfg.weights))


def get_scene_config() -> SceneConfig:
    return SceneConfig.from_conf()
