"""
File: Reference spatial interpolators: inverse distance weighting and ordinary kriging

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from typing import Optional, Iterable, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial.distance import cdist, pdist, squareform

from .interfaces import ObservationSet, Predictor, GridDataset, VariogramModel, Cell
from .grid_data import cell_centers
from .variogram import semivariogram_from_pairs, fit_gaussian_model
from .util import InsufficientObservations, SingularKrigingSystem

COINCIDENT = 1e-9  # [m]


def idw_predict(obs: ObservationSet, targets: np.ndarray, power: float = 2.0) -> np.ndarray:
    """ Weighted mean with weights d^-p; a target on an observation takes its value """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    distances = cdist(targets, obs.coordinates)
    nearest = distances.argmin(axis=1)
    exact = distances[np.arange(len(targets)), nearest] < COINCIDENT

    safe = np.where(exact[:, None], 1.0, distances)
    weights = safe ** -power
    out = (weights / weights.sum(axis=1, keepdims=True)) @ obs.values
    out[exact] = obs.values[nearest[exact]]
    return out


def factorize(system: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """ LU factors of the kriging system; singular to working precision raises """
    lu = lu_factor(system, check_finite=True)
    pivots = np.abs(np.diag(lu[0]))
    tolerance = len(pivots) * np.finfo(np.float64).eps * pivots.max()
    if not np.all(np.isfinite(pivots)) or pivots.min() <= tolerance:
        raise SingularKrigingSystem("The kriging system is singular (duplicate or "
                                    "nearly coincident locations)")
    return lu


class OrdinaryKriging:
    """
    Ordinary kriging with a Gaussian variogram (nugget 0) fitted on the observations.
    Lags are binned in equal-width bins up to the largest observed distance, so the fitted
    range is relative to that distance.
    """
    model: VariogramModel
    scale: float

    def __init__(self, obs: ObservationSet, n_bins: int = 10, seed: int = 0) -> None:
        coords, inverse = np.unique(obs.coordinates, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        values = np.bincount(inverse, weights=obs.values) / np.bincount(inverse)
        if len(coords) < 2:
            raise InsufficientObservations(f"Kriging needs at least two distinct locations, got "
                                           f"{len(coords)}")
        self.coordinates = coords
        self.values = values

        distances = pdist(coords)
        self.scale = float(distances.max())
        lags = distances / self.scale
        squared = (values[:, None] - values[None, :])[np.triu_indices(len(values), k=1)] ** 2
        self.bins = semivariogram_from_pairs(lags, squared, 1.0 / n_bins)
        if len(coords) == 2:
            # a single pair leaves nothing to fit
            self.model = VariogramModel(0.0, max(float(squared[0]), 1e-12), 1.0)
        else:
            self.model = fit_gaussian_model(self.bins, fix_nugget_zero=True, seed=seed)

        n = len(coords)
        system = np.ones((n + 1, n + 1))
        system[:n, :n] = self.model(squareform(lags))
        np.fill_diagonal(system[:n, :n], self.model.nugget)
        system[n, n] = 0.0
        self._lu = factorize(system)

    def _solve(self, targets: np.ndarray) -> np.ndarray:
        n = len(self.coordinates)
        rhs = np.ones((n + 1, len(targets)))
        rhs[:n] = self.model(cdist(self.coordinates, targets) / self.scale)
        return lu_solve(self._lu, rhs)

    def weights(self, target: Tuple[float, float]) -> Tuple[np.ndarray, float]:
        """ Kriging weights of the (deduplicated) observations and the Lagrange multiplier """
        solution = self._solve(np.asarray(target, dtype=np.float64).reshape(1, 2))[:, 0]
        return solution[:-1], float(solution[-1])

    def predict(self, targets: np.ndarray) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
        out = self.values @ self._solve(targets)[:-1]

        distances = cdist(targets, self.coordinates)
        nearest = distances.argmin(axis=1)
        exact = distances[np.arange(len(targets)), nearest] < COINCIDENT
        out[exact] = self.values[nearest[exact]]
        return out


def ok_predict(obs: ObservationSet, targets: np.ndarray, n_bins: int = 10,
               seed: int = 0) -> np.ndarray:
    return OrdinaryKriging(obs, n_bins, seed).predict(targets)


# ==================================================================================================
# Grid predictors
# ==================================================================================================
class _InterpolationPredictor(Predictor):
    """ Interpolates the labels of the chosen cells onto every cell center """

    def __init__(self, data: GridDataset, cells: Optional[Iterable[Cell]] = None) -> None:
        self.spec = data.spec
        self.labels = data.labels
        if cells is not None:
            self.labels = data.labels.restricted(frozenset(cells))
        self.centers = cell_centers(self.spec)
        self.targets = self.centers.reshape(-1, 2)

    def observations(self, time_index: int) -> ObservationSet:
        idx, values = self.labels.observations(time_index)
        if len(values) == 0:
            raise InsufficientObservations(f"No observations at time step {time_index}")
        return ObservationSet.of(self.centers[idx[:, 0], idx[:, 1]], values)

    def predict(self, time_index: int) -> np.ndarray:
        field = self.interpolate(self.observations(time_index))
        return field.reshape(self.spec.height, self.spec.width)

    def interpolate(self, obs: ObservationSet) -> np.ndarray:
        raise NotImplementedError()


class IdwPredictor(_InterpolationPredictor):
    name = "idw"

    def __init__(self, data: GridDataset, cells: Optional[Iterable[Cell]] = None,
                 power: float = 2.0) -> None:
        super().__init__(data, cells)
        self.power = power

    def interpolate(self, obs: ObservationSet) -> np.ndarray:
        return idw_predict(obs, self.targets, self.power)


class KrigingPredictor(_InterpolationPredictor):
    name = "ok"

    def __init__(self, data: GridDataset, cells: Optional[Iterable[Cell]] = None,
                 n_bins: int = 10, seed: int = 0) -> None:
        super().__init__(data, cells)
        self.n_bins = n_bins
        self.seed = seed

    def interpolate(self, obs: ObservationSet) -> np.ndarray:
        return ok_predict(obs, self.targets, self.n_bins, self.seed)

