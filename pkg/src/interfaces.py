"""
File: Custom data types

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from typing import List, Dict, Tuple, Optional, NamedTuple, FrozenSet, Set, Sequence, Any

import numpy as np

from .config import CONF
from .util import ShapeError, EmptyLabelSet, InsufficientObservations

Cell = Tuple[int, int]


# ==================================================================================================
# Grid
# ==================================================================================================
class GridSpec(NamedTuple):
    """
    A regular raster of square cells. The origin is the lower-left corner of cell (0, 0);
    rows grow northward, columns grow eastward.
    """
    origin_easting: float
    origin_northing: float
    cell_size: float
    height: int
    width: int

    @classmethod
    def from_conf(cls) -> GridSpec:
        return cls(CONF.grid_origin_easting, CONF.grid_origin_northing, CONF.grid_cell_size,
                   CONF.grid_height, CONF.grid_width).validated()

    def validated(self) -> GridSpec:
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"Grid must have at least one cell, got {self.height}x{self.width}")
        if not self.cell_size > 0:
            raise ShapeError(f"Cell size must be positive, got {self.cell_size}")
        return self

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        """ (min easting, min northing, max easting, max northing) """
        return (self.origin_easting, self.origin_northing,
                self.origin_easting + self.width * self.cell_size,
                self.origin_northing + self.height * self.cell_size)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._asdict())


class GeoPrimitive(NamedTuple):
    kind: str  # point | polyline | polygon
    coordinates: List[Tuple[float, float]]
    attribute: float = 1.0


class SensorReading(NamedTuple):
    sensor_id: str
    easting: float
    northing: float
    time_index: int
    value: float


class FeatureGrid:
    """
    Per-cell feature vectors: dynamic features [T, H, W, P_d] followed by static ones [H, W, P_s].
    Feature names list the dynamic features first.
    """
    spec: GridSpec
    dynamic: np.ndarray
    static: np.ndarray
    feature_names: List[str]

    def __init__(self, spec: GridSpec, dynamic: np.ndarray, static: np.ndarray,
                 feature_names: List[str]) -> None:
        dynamic = np.asarray(dynamic, dtype=np.float64)
        static = np.asarray(static, dtype=np.float64)
        if dynamic.ndim != 4 or dynamic.shape[1:3] != (spec.height, spec.width):
            raise ShapeError(f"Dynamic features must be [T, {spec.height}, {spec.width}, P_d], "
                             f"got {list(dynamic.shape)}")
        if static.ndim != 3 or static.shape[:2] != (spec.height, spec.width):
            raise ShapeError(f"Static features must be [{spec.height}, {spec.width}, P_s], "
                             f"got {list(static.shape)}")
        n_features = dynamic.shape[3] + static.shape[2]
        if n_features < 1:
            raise ShapeError("A feature grid needs at least one feature")
        if len(feature_names) != n_features:
            raise ShapeError(f"{len(feature_names)} feature names for {n_features} features")
        if len(set(feature_names)) != len(feature_names):
            raise ShapeError("Feature names must be unique")
        if not np.all(np.isfinite(dynamic)) or not np.all(np.isfinite(static)):
            raise ShapeError("Feature grid contains NaN or infinite values")
        self.spec = spec
        self.dynamic = dynamic
        self.static = static
        self.feature_names = list(feature_names)

    @property
    def time_steps(self) -> int:
        return self.dynamic.shape[0]

    @property
    def n_dynamic(self) -> int:
        return self.dynamic.shape[3]

    @property
    def n_static(self) -> int:
        return self.static.shape[2]

    @property
    def n_features(self) -> int:
        return self.n_dynamic + self.n_static

    def at(self, times: Sequence[int]) -> np.ndarray:
        """ Full feature vectors [len(times), H, W, P] """
        times = list(times)
        static = np.broadcast_to(self.static, (len(times),) + self.static.shape)
        return np.concatenate([self.dynamic[times], static], axis=-1)

    def full(self) -> np.ndarray:
        return self.at(range(self.time_steps))


class LabelGrid:
    """ Sparse labels: values [T, H, W] are meaningful only where mask is true """
    values: np.ndarray
    mask: np.ndarray

    def __init__(self, values: np.ndarray, mask: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 3:
            raise ShapeError(f"Label values {list(values.shape)} and mask {list(mask.shape)} must "
                             f"be equal [T, H, W] arrays")
        if not np.all(np.isfinite(values[mask])):
            raise ShapeError("Labels contain non-finite values at observed cells")
        self.values = np.where(mask, values, 0.0)
        self.mask = mask

    @property
    def time_steps(self) -> int:
        return self.values.shape[0]

    def labeled_cells(self) -> Set[Cell]:
        rows, cols = np.nonzero(self.mask.any(axis=0))
        return {(int(r), int(c)) for r, c in zip(rows, cols)}

    def restricted(self, cells: Sequence[Cell] | FrozenSet[Cell]) -> LabelGrid:
        """ A copy in which only the given cells stay observed """
        return LabelGrid(self.values, self.mask & cell_mask(cells, self.values.shape[1:]))

    def observations(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """ (cell indices [n, 2], values [n]) observed at time t """
        rows, cols = np.nonzero(self.mask[t])
        return np.stack([rows, cols], axis=1), self.values[t, rows, cols]


def cell_mask(cells, shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for r, c in cells:
        mask[r, c] = True
    return mask


class LocationSplit(NamedTuple):
    train: FrozenSet[Cell]
    val: FrozenSet[Cell]
    test: FrozenSet[Cell]

    def all_cells(self) -> FrozenSet[Cell]:
        return self.train | self.val | self.test

    def to_dict(self) -> Dict[str, List[List[int]]]:
        return {name: [list(c) for c in sorted(cells)] for name, cells in self._asdict().items()}

    @classmethod
    def from_dict(cls, data: Dict) -> LocationSplit:
        return cls(*(frozenset((int(r), int(c)) for r, c in data.get(name, []))
                     for name in cls._fields))


class GridDataset:
    """ Everything a period of data brings: features, sensor readings, their labels """
    features: FeatureGrid
    labels: LabelGrid
    readings: List[SensorReading]
    truth: Optional[np.ndarray]
    relevant_feature_ids: Optional[List[int]]

    def __init__(self, features: FeatureGrid, labels: LabelGrid,
                 readings: Optional[List[SensorReading]] = None,
                 truth: Optional[np.ndarray] = None,
                 relevant_feature_ids: Optional[List[int]] = None) -> None:
        if labels.values.shape != (features.time_steps, features.spec.height,
                                   features.spec.width):
            raise ShapeError(f"Labels {list(labels.values.shape)} do not match the feature grid")
        if truth is not None and truth.shape != labels.values.shape:
            raise ShapeError(f"Truth {list(truth.shape)} does not match the labels")
        self.features = features
        self.labels = labels
        self.readings = readings or []
        self.truth = truth
        self.relevant_feature_ids = relevant_feature_ids

    @property
    def spec(self) -> GridSpec:
        return self.features.spec

    @property
    def time_steps(self) -> int:
        return self.features.time_steps


class SyntheticScene(GridDataset):
    """ A generated world: the same as a dataset, except the full ground-truth field is known """
    truth: np.ndarray
    relevant_feature_ids: List[int]


# ==================================================================================================
# Variogram
# ==================================================================================================
class VariogramBins(NamedTuple):
    lag_size: float
    centers: np.ndarray
    counts: np.ndarray
    gamma: np.ndarray
    populated: np.ndarray  # false where N(h) == 0; gamma is undefined there

    @property
    def n_bins(self) -> int:
        return len(self.centers)


class VariogramModel(NamedTuple):
    nugget: float
    sill: float
    range: float
    pinned: bool = False  # the range was pushed onto a bound of the search interval
    residual: float = 0.0

    def __call__(self, h):
        h = np.asarray(h, dtype=np.float64)
        return self.nugget + self.sill * (1.0 - np.exp(-(h / (self.range / 2.0)) ** 2))


class BinDistribution(NamedTuple):
    bin_id: int
    center: float
    mu: Any  # float, or a Tensor on the prediction side
    sigma: Any
    count: int
    valid: bool


# ==================================================================================================
# Configuration records
# ==================================================================================================
class LossWeights(NamedTuple):
    alpha: float = 1.0
    beta: float = 5.0
    lam: float = 5.0
    eta: float = 0.1
    lambda_1: float = 1.0
    lambda_2: float = 1.0

    @classmethod
    def from_conf(cls) -> LossWeights:
        return cls(CONF.loss_alpha, CONF.loss_beta, CONF.loss_lambda, CONF.loss_eta,
                   CONF.loss_lambda_spatial, CONF.loss_lambda_temporal)


class NeighborhoodSpec(NamedTuple):
    k_s: int = 1
    k_t: int = 1

    @classmethod
    def from_conf(cls) -> NeighborhoodSpec:
        return cls(CONF.model_spatial_steps, CONF.model_temporal_steps)


class ModelConfig(NamedTuple):
    n_features: int
    latent_dim: int = 32
    ae_hidden: int = 64
    hidden: int = 64
    kernels: Tuple[int, ...] = (1, 3, 5)
    head_hidden: int = 64
    threshold: float = 1e-4
    window: int = 7
    seed: int = 0

    @classmethod
    def from_conf(cls, n_features: int) -> ModelConfig:
        return cls(n_features, CONF.model_latent_dim, CONF.model_ae_hidden, CONF.model_hidden,
                   tuple(CONF.model_kernels), CONF.model_head_hidden, CONF.model_sparse_threshold,
                   CONF.model_window, CONF.seed)

    @property
    def embedding_dim(self) -> int:
        return self.hidden * len(self.kernels)


class TrainConfig(NamedTuple):
    weights: LossWeights = LossWeights()
    neighborhood: NeighborhoodSpec = NeighborhoodSpec()
    lr: float = 0.001
    max_epochs: int = 60
    patience: int = 10
    batch: int = 2
    clip_norm: float = 5.0
    refit_every: int = 1
    lag_size: float = 0.1
    min_pairs: int = 5
    max_points: int = 2000
    max_pairs: int = 2_000_000
    step_pairs: int = 100_000
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.005
    pretrain_batch: int = 256
    seed: int = 0

    @classmethod
    def from_conf(cls) -> TrainConfig:
        return cls(LossWeights.from_conf(), NeighborhoodSpec.from_conf(), CONF.train_lr,
                   CONF.train_max_epochs, CONF.train_patience, CONF.train_batch,
                   CONF.train_clip_norm, CONF.variogram_refit_every, CONF.variogram_lag_size,
                   CONF.variogram_min_pairs, CONF.variogram_max_points, CONF.variogram_max_pairs,
                   CONF.variogram_step_pairs, CONF.pretrain_epochs, CONF.pretrain_lr,
                   CONF.pretrain_batch, CONF.seed)


class SceneConfig(NamedTuple):
    height: int = 24
    width: int = 24
    time_steps: int = 48
    dynamic_features: int = 4
    static_features: int = 16
    n_relevant: int = 3
    n_sensors: int = 40
    placement: str = "clustered"
    noise_std: float = 0.3
    corr_length: float = 2.0
    temporal_ar: float = 0.6
    cell_size: float = 500.0
    seed: int = 0

    @classmethod
    def from_conf(cls) -> SceneConfig:
        return cls(CONF.grid_height, CONF.grid_width, CONF.grid_time_steps,
                   CONF.scene_dynamic_features, CONF.scene_static_features,
                   CONF.scene_relevant_features, CONF.scene_sensors, CONF.scene_sensor_placement,
                   CONF.scene_noise_std, CONF.scene_spatial_corr_length, CONF.scene_temporal_ar,
                   CONF.grid_cell_size, CONF.seed)


# ==================================================================================================
# Results
# ==================================================================================================
class Metrics(NamedTuple):
    rmse: float
    r2: float  # NaN when the labels have zero variance
    r2_defined: bool
    count: int

    def to_dict(self) -> Dict[str, Any]:
        return {"rmse": self.rmse, "r2": self.r2 if self.r2_defined else None,
                "count": self.count}


class EpochRecord(NamedTuple):
    epoch: int
    pred: float
    sp: float
    ae: float
    stc: float
    ac: Optional[float]  # None when the autocorrelation term was not evaluated
    total: float
    val_rmse: float
    best_val_rmse: float
    nugget: Optional[float]
    sill: Optional[float]
    range: Optional[float]
    selected: int


class TrainHistory:
    records: List[EpochRecord]
    variogram_reports: List[Dict]
    best_epoch: int
    stopped_early: bool

    def __init__(self) -> None:
        self.records = []
        self.variogram_reports = []
        self.best_epoch = -1
        self.stopped_early = False

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def best_val_rmse(self) -> float:
        if not self.records:
            return float("inf")
        return min(r.val_rmse for r in self.records)

    def rows(self) -> List[Dict[str, Any]]:
        return [r._asdict() for r in self.records]


class RunManifest(NamedTuple):
    command: str
    config_hash: str
    seed: int
    inputs: Dict[str, str]  # path -> sha256
    outputs: List[str]
    wall_time: float


# ==================================================================================================
# Predictors
# ==================================================================================================
class ObservationSet(NamedTuple):
    """ Observations of a single time step: coordinates [n, 2] in meters and values [n] """
    coordinates: np.ndarray
    values: np.ndarray

    @classmethod
    def of(cls, coordinates, values) -> ObservationSet:
        coordinates = np.asarray(coordinates, dtype=np.float64).reshape(-1, 2)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(coordinates) != len(values):
            raise ShapeError(f"{len(coordinates)} coordinates for {len(values)} values")
        if len(values) == 0:
            raise InsufficientObservations("At least one observation is required")
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(coordinates)):
            raise ShapeError("Observations must be finite")
        return cls(coordinates, values)


class Predictor(ABC):
    """ Produces a full-grid field for any time step of the dataset it was built on """
    name: str = ""

    @abstractmethod
    def predict(self, time_index: int) -> np.ndarray:
        """ Prediction [H, W] at one time step """
        pass

    def predict_range(self, times: Sequence[int]) -> np.ndarray:
        times = list(times)
        if not times:
            raise EmptyLabelSet("Empty time range")
        return np.stack([self.predict(t) for t in times])
