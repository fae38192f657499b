"""
File: Loss terms of the joint objective and their weighted sum

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from typing import List, Tuple, Optional, NamedTuple, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .interfaces import LossWeights, NeighborhoodSpec, BinDistribution
from .network import SparseLayer
from .util import ShapeError, EmptyLabelSet, DomainError

SIGMA_FLOOR = 1e-6
Scalar = Union[Tensor, float]


class AcLoss(NamedTuple):
    value: Tensor
    valid_bins: int  # zero means the term carried no information


class LossParts(NamedTuple):
    """ A part is None when the term was not evaluated """
    pred: Optional[Scalar]
    sp: Optional[Scalar] = None
    ae: Optional[Scalar] = None
    stc: Optional[Scalar] = None
    ac: Optional[Scalar] = None


def loss_sp(layer: SparseLayer) -> Tensor:
    """ L1 norm of all sparse-layer weights, masked or not """
    return ad.sum_(ad.abs_(layer.weights))


def loss_ae(x_sp: Tensor, x_hat: Tensor) -> Tensor:
    x_sp, x_hat = ad.as_tensor(x_sp), ad.as_tensor(x_hat)
    if x_sp.shape != x_hat.shape:
        raise ShapeError(f"Reconstruction {x_hat.shape} does not match its input {x_sp.shape}")
    return ad.mean(ad.square(x_sp - x_hat))


def _ring(k: int) -> List[Tuple[int, int]]:
    """ Half of the Chebyshev ring at distance k; the other half are the negated offsets """
    offsets = []
    for dr in range(-k, k + 1):
        for dc in range(-k, k + 1):
            if max(abs(dr), abs(dc)) == k and (dr > 0 or (dr == 0 and dc > 0)):
                offsets.append((dr, dc))
    return offsets


def _shifted_pair(r: Tensor, axis: int, offset: int) -> Optional[Tuple[Tensor, Tensor]]:
    size = r.shape[axis]
    if abs(offset) >= size:
        return None
    lo = [slice(None)] * r.ndim
    hi = [slice(None)] * r.ndim
    lo[axis] = slice(max(0, -offset), size - max(0, offset))
    hi[axis] = slice(max(0, offset), size + min(0, offset))
    return r[tuple(lo)], r[tuple(hi)]


def loss_stc(r: Tensor, spec: NeighborhoodSpec, lambda_1: float = 1.0,
             lambda_2: float = 1.0) -> Tensor:
    """
    Pull neighbouring embeddings together. r is [T, H, W, C] or [N, T, H, W, C].
    Spatial neighbours at step k form the Chebyshev ring k around a cell; temporal neighbours at
    step k are the same cell at t +- k. Every ordered pair contributes MSE / k; missing neighbours
    at the borders are skipped.
    """
    r = ad.as_tensor(r)
    if r.ndim not in (4, 5) or min(r.shape[-4:-1]) < 1:
        raise ShapeError(f"Embeddings must be [T, H, W, C], got {r.shape}")
    t_axis, h_axis, w_axis = r.ndim - 4, r.ndim - 3, r.ndim - 2
    channels = r.shape[-1]
    total: Tensor = Tensor(0.0)

    if lambda_1 > 0:
        for k in range(1, spec.k_s + 1):
            for dr, dc in _ring(k):
                rows = _shifted_pair(r, h_axis, dr)
                if rows is None:
                    continue
                a = _shifted_pair(rows[0], w_axis, dc)
                b = _shifted_pair(rows[1], w_axis, dc)
                if a is None or b is None:
                    continue
                # a[0] holds cells i, b[1] their neighbours at offset (dr, dc)
                diff = ad.sum_(ad.square(a[0] - b[1]))
                total = total + diff * (2.0 * lambda_1 / (k * channels))

    if lambda_2 > 0:
        for k in range(1, spec.k_t + 1):
            pair = _shifted_pair(r, t_axis, k)
            if pair is None:
                continue
            diff = ad.sum_(ad.square(pair[0] - pair[1]))
            total = total + diff * (2.0 * lambda_2 / (k * channels))
    return total


def loss_pred(y_hat: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """ Mean squared error over the observed entries """
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if y_hat.shape != y.shape or y.shape != mask.shape:
        raise ShapeError(f"Prediction {y_hat.shape}, labels {y.shape} and mask {mask.shape} "
                         f"must agree")
    index = np.flatnonzero(mask)
    if index.size == 0:
        raise EmptyLabelSet("No observed entries in the mask")
    return ad.mean(ad.square(ad.take(y_hat, index) - y.reshape(-1)[index]))


def _check_finite(name: str, value) -> None:
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{name} is not finite")


def kl_gaussian(mu_y: Scalar, sigma_y: Scalar, mu_p: Scalar, sigma_p: Scalar,
                floor: float = SIGMA_FLOOR) -> Tensor:
    """
    KL divergence of N(mu_p, sigma_p) from N(mu_y, sigma_y); the floor is added in quadrature
    to both standard deviations.
    """
    for name, v in (("mu_y", mu_y), ("sigma_y", sigma_y), ("mu_p", mu_p), ("sigma_p", sigma_p)):
        _check_finite(name, v)
    var_y = ad.square(sigma_y) + floor * floor
    var_p = ad.square(sigma_p) + floor * floor
    spread = (var_y + ad.square(ad.sub(mu_y, mu_p))) / var_p
    return (ad.log(var_p / var_y) - 1.0 + spread) * 0.5


def loss_ac(bins: Sequence[Tuple[BinDistribution, BinDistribution]]) -> AcLoss:
    """ Sum of the KL terms over bins that are valid on both the label and the prediction side """
    total: Tensor = Tensor(0.0)
    valid = 0
    for label_bin, pred_bin in bins:
        if not (label_bin.valid and pred_bin.valid):
            continue
        total = total + kl_gaussian(label_bin.mu, label_bin.sigma, pred_bin.mu, pred_bin.sigma)
        valid += 1
    return AcLoss(total, valid)


def loss_total(parts: LossParts, weights: LossWeights) -> Tensor:
    """ L_pred + alpha L_sp + beta L_ae + lambda L_stc + eta L_ac; skipped terms count as zero """
    scaled = [
        ("pred", parts.pred, 1.0),
        ("sp", parts.sp, weights.alpha),
        ("ae", parts.ae, weights.beta),
        ("stc", parts.stc, weights.lam),
        ("ac", parts.ac, weights.eta),
    ]
    if parts.pred is None:
        raise ShapeError("The supervised term is mandatory")
    total: Tensor = Tensor(0.0)
    for name, value, weight in scaled:
        if value is None:
            continue
        try:
            _check_finite(name, value)
        except DomainError:
            raise DomainError(f"Loss term '{name}' is not finite")
        if weight == 0:
            continue
        total = total + ad.mul(value, weight)
    return total

