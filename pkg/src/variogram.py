"""
File: Semivariogram machinery: rescaled pairwise lags, empirical semivariance bins,
Gaussian model fit and per-bin Gaussian statistics of squared differences

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from typing import List, Dict, Tuple, Optional, NamedTuple, Any

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import pdist, squareform

from . import autodiff as ad
from .autodiff import Tensor
from .interfaces import VariogramBins, VariogramModel, BinDistribution
from .util import Logger, DegenerateEmbeddings, InsufficientBins, InsufficientSamples, \
    FitDiverged, ShapeError

RANGE_BOUNDS = (0.01, 1.0)
START_RANGES = (0.2, 0.5, 0.8)
RANDOM_STARTS = 2
RELATIVE_FLOOR = 0.01
STEP_PAIRS = 100_000
PAIR_CHUNK = 20000

Pairs = Tuple[np.ndarray, np.ndarray]


# ==================================================================================================
# Lags
# ==================================================================================================
def pairwise_lags(points: np.ndarray) -> np.ndarray:
    """ Euclidean distance matrix divided by its maximum """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"Points must be a [n, d] array, got {list(points.shape)}")
    if len(points) < 2:
        raise InsufficientSamples("At least two points are needed for a lag")
    distances = squareform(pdist(points))
    largest = distances.max()
    if largest == 0:
        raise DegenerateEmbeddings("All points coincide")
    return distances / largest


def sample_pairs(n: int, rng: np.random.Generator, max_points: int = 2000,
                 max_pairs: int = 2_000_000) -> Pairs:
    """
    Ordered pairs (i, j), i != j. All of them up to max_points points; above that, max_pairs
    pairs drawn uniformly.
    """
    if n < 2:
        raise InsufficientSamples("At least two points are needed for a pair")
    if n <= max_points:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        return i, j
    i = rng.integers(0, n, size=max_pairs)
    j = (i + rng.integers(1, n, size=max_pairs)) % n
    return i, j


def pair_distances(points: np.ndarray, pairs: Pairs) -> np.ndarray:
    i, j = pairs
    out = np.empty(len(i))
    for start in range(0, len(i), PAIR_CHUNK):
        stop = start + PAIR_CHUNK
        out[start:stop] = np.linalg.norm(points[i[start:stop]] - points[j[start:stop]], axis=1)
    return out


def n_bins_for(lag_size: float) -> int:
    if not 0 < lag_size <= 1:
        raise ShapeError(f"Lag size must be in (0, 1], got {lag_size}")
    return int(np.ceil(round(1.0 / lag_size, 9)))


def bin_index(lags: np.ndarray, lag_size: float) -> np.ndarray:
    """ Lag 1.0 belongs to the last bin """
    return np.minimum((lags / lag_size).astype(int), n_bins_for(lag_size) - 1)


def bin_centers(lag_size: float) -> np.ndarray:
    edges = np.minimum(np.arange(n_bins_for(lag_size) + 1) * lag_size, 1.0)
    return (edges[:-1] + edges[1:]) / 2


def _matrix_pairs(lags: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lags = np.asarray(lags, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    n = len(values)
    if lags.shape != (n, n):
        raise ShapeError(f"Lag matrix {list(lags.shape)} does not match {n} values")
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return lags[i, j], (values[i] - values[j]) ** 2


# ==================================================================================================
# Semivariogram
# ==================================================================================================
def semivariogram_from_pairs(lags: np.ndarray, squared_diffs: np.ndarray,
                             lag_size: float) -> VariogramBins:
    n_bins = n_bins_for(lag_size)
    index = bin_index(lags, lag_size)
    counts = np.bincount(index, minlength=n_bins)
    sums = np.bincount(index, weights=squared_diffs, minlength=n_bins)
    populated = counts > 0
    gamma = np.divide(sums, counts, out=np.zeros(n_bins), where=populated)
    return VariogramBins(lag_size, bin_centers(lag_size), counts, gamma, populated)


def empirical_semivariogram(lags: np.ndarray, values: np.ndarray,
                            lag_size: float = 0.1) -> VariogramBins:
    """
    gamma(h) = mean of (Y_i - Y_j)^2 over the ordered pairs whose lag falls into the bin.
    lags is the square matrix returned by pairwise_lags.
    """
    pair_lags, squared = _matrix_pairs(lags, values)
    return semivariogram_from_pairs(pair_lags, squared, lag_size)


def gaussian_model(h: np.ndarray, nugget: float, sill: float, range_: float) -> np.ndarray:
    return nugget + sill * (1.0 - np.exp(-(np.asarray(h) / (range_ / 2.0)) ** 2))


def fit_gaussian_model(bins: VariogramBins, fix_nugget_zero: bool = True, seed: int = 0,
                       range_bounds: Tuple[float, float] = RANGE_BOUNDS) -> VariogramModel:
    """
    Weighted least-squares fit (weights N(h)) of the Gaussian model to the populated bins.
    Residuals are relative to the observed semivariance, floored at RELATIVE_FLOOR of its
    maximum. Local searches start from several ranges plus a few seeded random points; the
    best converged one wins.
    """
    populated = bins.populated
    needed = 2 if fix_nugget_zero else 3
    if populated.sum() < needed:
        raise InsufficientBins(f"{int(populated.sum())} populated bins, need at least {needed}")
    h = bins.centers[populated]
    gamma = bins.gamma[populated]
    top = max(float(gamma.max()), 1e-12)
    scale = np.maximum(gamma, RELATIVE_FLOOR * top)
    sqrt_w = np.sqrt(bins.counts[populated].astype(np.float64)) / scale
    r_lo, r_hi = range_bounds

    def unpack(x):
        return (0.0, x[0], x[1]) if fix_nugget_zero else (x[2], x[0], x[1])

    def residuals(x):
        return sqrt_w * (gaussian_model(h, *unpack(x)) - gamma)

    rng = np.random.default_rng(seed)
    starts = [(top, r) for r in START_RANGES]
    starts += [(top * rng.uniform(0.5, 1.5), rng.uniform(r_lo, r_hi)) for _ in range(RANDOM_STARTS)]
    lower = [1e-12, r_lo] + ([] if fix_nugget_zero else [0.0])
    upper = [np.inf, r_hi] + ([] if fix_nugget_zero else [np.inf])

    best = None
    for sill0, range0 in starts:
        x0 = [sill0, range0] + ([] if fix_nugget_zero else [float(gamma.min()) * 0.5])
        x0 = np.clip(x0, lower, upper)
        try:
            result = least_squares(residuals, x0, bounds=(lower, upper), method="trf",
                                   x_scale="jac", ftol=1e-15, xtol=1e-15, gtol=1e-15,
                                   max_nfev=2000)
        except ValueError:
            continue
        if result.status <= 0 or not np.all(np.isfinite(result.x)):
            continue
        if best is None or result.cost < best.cost:
            best = result
    if best is None:
        raise FitDiverged("No start of the variogram fit converged", residuals=gamma)

    nugget, sill, range_ = unpack(best.x)
    cost = float(best.cost)
    tolerance = 5e-13 * float((sqrt_w * gamma) @ (sqrt_w * gamma))
    # a range on a bound is only approached asymptotically, so the bounds are solved directly
    for bound in range_bounds:
        candidate = _fit_at_range(h, gamma, sqrt_w, bound, fix_nugget_zero)
        if candidate is not None and candidate[2] <= cost * (1 + 1e-9) + tolerance:
            nugget, sill, cost = candidate
            range_ = bound
    weights = sqrt_w ** 2
    residual = float(np.sqrt(2 * cost / weights.sum()))
    pinned = bool(min(abs(range_ - r_lo), abs(range_ - r_hi)) < 1e-6)
    if pinned:
        Logger().warning("variogram", f"Fitted range {range_:.4g} sits on a bound of "
                         f"[{r_lo}, {r_hi}]")
    return VariogramModel(float(nugget), float(sill), float(range_), pinned, residual)


def _fit_at_range(h: np.ndarray, gamma: np.ndarray, sqrt_w: np.ndarray, range_: float,
                  fix_nugget_zero: bool) -> Optional[Tuple[float, float, float]]:
    """ Weighted linear least squares for (nugget, sill) at a fixed range; None if infeasible """
    shape = 1.0 - np.exp(-(h / (range_ / 2.0)) ** 2)
    columns = [shape] if fix_nugget_zero else [shape, np.ones_like(shape)]
    design = np.stack(columns, axis=1) * sqrt_w[:, None]
    solution = np.linalg.lstsq(design, sqrt_w * gamma, rcond=None)[0]
    sill = float(solution[0])
    nugget = 0.0 if fix_nugget_zero else float(solution[1])
    if sill < 1e-12 or nugget < 0:
        return None
    residuals = sqrt_w * (gaussian_model(h, nugget, sill, range_) - gamma)
    return nugget, sill, 0.5 * float(residuals @ residuals)


# ==================================================================================================
# Per-bin distributions
# ==================================================================================================
def distributions_from_pairs(lags: np.ndarray, squared_diffs: np.ndarray, model: VariogramModel,
                             lag_size: float, min_pairs: int) -> List[BinDistribution]:
    index = bin_index(lags, lag_size)
    out = []
    for b, center in enumerate(bin_centers(lag_size)):
        members = squared_diffs[index == b]
        count = len(members)
        mu = float(members.mean()) if count else 0.0
        sigma = float(members.std()) if count else 0.0
        valid = bool(center <= model.range and count >= min_pairs)
        out.append(BinDistribution(b, float(center), mu, sigma, count, valid))
    return out


def bin_distributions(lags: np.ndarray, values: np.ndarray, model: VariogramModel,
                      lag_size: float = 0.1, min_pairs: int = 5) -> List[BinDistribution]:
    """
    Mean and (population) std of the squared differences per bin. Only bins centered within
    the fitted range and with at least min_pairs pairs are valid.
    """
    pair_lags, squared = _matrix_pairs(lags, values)
    return distributions_from_pairs(pair_lags, squared, model, lag_size, min_pairs)


class AutocorrelationState(NamedTuple):
    """ Label-side statistics, fixed between two refits """
    lag_scale: float
    model: VariogramModel
    bins: VariogramBins
    label_bins: List[BinDistribution]
    lag_size: float
    min_pairs: int

    @property
    def valid_bins(self) -> int:
        return sum(b.valid for b in self.label_bins)


def fit_autocorrelation(embeddings: np.ndarray, values: np.ndarray, lag_size: float,
                        min_pairs: int, rng: np.random.Generator, max_points: int = 2000,
                        max_pairs: int = 2_000_000, seed: int = 0) -> AutocorrelationState:
    """
    Semivariogram of the labels in embedding space. The lag axis is rescaled by the largest
    distance between labeled points; the same scale is then used for prediction pairs.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if embeddings.ndim != 2 or len(embeddings) != len(values):
        raise ShapeError(f"{len(values)} values for embeddings of shape {embeddings.shape}")
    pairs = sample_pairs(len(values), rng, max_points, max_pairs)
    distances = pair_distances(embeddings, pairs)
    scale = float(distances.max())
    if scale == 0:
        raise DegenerateEmbeddings("All labeled embeddings coincide")
    lags = np.minimum(distances / scale, 1.0)
    squared = (values[pairs[0]] - values[pairs[1]]) ** 2

    bins = semivariogram_from_pairs(lags, squared, lag_size)
    model = fit_gaussian_model(bins, fix_nugget_zero=True, seed=seed)
    label_bins = distributions_from_pairs(lags, squared, model, lag_size, min_pairs)
    return AutocorrelationState(scale, model, bins, label_bins, lag_size, min_pairs)


def prediction_distributions(embeddings: np.ndarray, prediction: Tensor,
                             state: AutocorrelationState, rng: np.random.Generator,
                             max_pairs: int = STEP_PAIRS) -> List[BinDistribution]:
    """
    Per-bin statistics of squared prediction differences, differentiable w.r.t. the predictions.
    embeddings: [m, C] constants, one per entry of the flattened prediction tensor.
    Bin membership is computed on the label lag scale and treated as constant.
    This runs on every training step: all ordered pairs are used while they fit in max_pairs,
    otherwise max_pairs pairs are drawn.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or len(embeddings) != prediction.size:
        raise ShapeError(f"{prediction.size} predictions for embeddings of shape "
                         f"{embeddings.shape}")
    n = len(embeddings)
    pairs = sample_pairs(n, rng, n if n * (n - 1) <= max_pairs else 0, max_pairs)
    lags = np.minimum(pair_distances(embeddings, pairs) / state.lag_scale, 1.0)
    index = bin_index(lags, state.lag_size)

    out = []
    for label_bin in state.label_bins:
        b = label_bin.bin_id
        selected = np.flatnonzero(index == b)
        count = len(selected)
        if not label_bin.valid or count < state.min_pairs:
            out.append(BinDistribution(b, label_bin.center, 0.0, 0.0, count, False))
            continue
        diff = ad.take(prediction, pairs[0][selected]) - ad.take(prediction, pairs[1][selected])
        squared = ad.square(diff)
        mu = ad.mean(squared)
        variance = ad.mean(ad.square(squared - mu))
        # unfloored; kl_gaussian adds the floor
        sigma = ad.sqrt(variance) if variance.item() > 0 else Tensor(0.0)
        out.append(BinDistribution(b, label_bin.center, mu, sigma, count, True))
    return out


# ==================================================================================================
# Reports
# ==================================================================================================
def _model_dict(model: VariogramModel) -> Dict[str, Any]:
    return {"nugget": model.nugget, "sill": model.sill, "range": model.range,
            "pinned": model.pinned, "residual": model.residual}


def variogram_report(bins: VariogramBins, model: Optional[VariogramModel],
                     distributions: Optional[List[BinDistribution]] = None,
                     prediction_model: Optional[VariogramModel] = None) -> Dict[str, Any]:
    report: Dict[str, Any] = {
        "lag_size": bins.lag_size,
        "bins": [
            {"center": float(c), "count": int(n), "gamma": float(g) if p else None}
            for c, n, g, p in zip(bins.centers, bins.counts, bins.gamma, bins.populated)
        ],
        "fitted": _model_dict(model) if model is not None else None,
    }
    if distributions is not None:
        report["distributions"] = [
            {"bin": d.bin_id, "center": d.center, "count": d.count, "valid": d.valid,
             "mu": float(d.mu.item() if isinstance(d.mu, Tensor) else d.mu),
             "sigma": float(d.sigma.item() if isinstance(d.sigma, Tensor) else d.sigma)}
            for d in distributions
        ]
    if prediction_model is not None:
        report["prediction_fit"] = _model_dict(prediction_model)
    return report


def variogram_curve_rows(bins: VariogramBins,
                         model: Optional[VariogramModel]) -> List[Dict[str, Any]]:
    """ Plot-ready rows: lag center, empirical gamma (empty for unpopulated bins), fitted f(h) """
    rows = []
    for center, gamma, populated in zip(bins.centers, bins.gamma, bins.populated):
        rows.append({
            "lag_center": float(center),
            "gamma": float(gamma) if populated else None,
            "fitted": float(model(center)) if model is not None else None,
        })
    return rows
