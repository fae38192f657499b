"""
File: Model training: auto-encoder pre-training, joint optimization with periodic variogram
refits and early stopping, fine-tuning on a new period, and evaluation

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from datetime import datetime
from typing import List, Dict, Tuple, Optional, Sequence, Callable, Any

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import Tensor, Tape, Gradients, parameters_norm
from .interfaces import GridDataset, FeatureGrid, LocationSplit, TrainConfig, TrainHistory, \
    EpochRecord, Metrics, GridSpec, cell_mask
from .grid_data import standardize, cell_centers
from .network import LatteModel, sparse_forward, encode, decode
from .losses import LossParts, loss_pred, loss_sp, loss_ae, loss_stc, loss_ac, loss_total
from .variogram import AutocorrelationState, fit_autocorrelation, prediction_distributions, \
    variogram_report
from .util import Logger, STAT, DomainError, DivergenceError, EmptyLabelSet, SplitLeakError, \
    InsufficientObservations, LatteException, ShapeError


# ==================================================================================================
# Optimizer
# ==================================================================================================
class AdamOptimizer:
    """ Adaptive moment estimation with global-norm gradient clipping """

    def __init__(self, params: List[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float = 5.0) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: Gradients) -> float:
        """ Update the parameters that received a gradient; returns the pre-clipping norm """
        present = [(k, grads.get(p)) for k, p in enumerate(self.params) if p in grads]
        norm = parameters_norm(g for _, g in present)
        if not np.isfinite(norm):
            raise DivergenceError("Non-finite gradient", term="gradient")
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0

        self.steps += 1
        correction1 = 1 - self.beta1 ** self.steps
        correction2 = 1 - self.beta2 ** self.steps
        for k, g in present:
            g = g * scale
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / correction1) / (np.sqrt(self.v[k] / correction2) +
                                                           self.eps)
            self.params[k].data = self.params[k].data - update
        STAT.optimizer_steps += 1
        return norm


# ==================================================================================================
# Helpers
# ==================================================================================================
def window_ends(time_steps: int, window: int) -> Tuple[List[int], int]:
    """ End times of the full windows and the window length (shortened for short periods) """
    length = min(window, time_steps)
    return list(range(length - 1, time_steps)), length


def fit_scalers(model: LatteModel, data: GridDataset, train_cells) -> None:
    _, mean, std = standardize(data.features)
    model.feature_mean, model.feature_std = mean, std
    model.feature_names = list(data.features.feature_names)
    mask = data.labels.mask & cell_mask(train_cells, data.labels.mask.shape[1:])
    values = data.labels.values[mask]
    if values.size == 0:
        raise EmptyLabelSet("No training labels to fit the label scaler")
    model.label_mean = float(values.mean())
    std_value = float(values.std())
    model.label_std = std_value if std_value > 1e-12 else 1.0
    model.scalers_fitted = True


def _term(name: str, fn: Callable[[], Any]):
    try:
        return fn()
    except DomainError as e:
        raise DivergenceError(f"Loss term '{name}' diverged: {e}", term=name)


def check_split(split: LocationSplit) -> None:
    overlaps = (split.train & split.val) | (split.train & split.test) | (split.val & split.test)
    if overlaps:
        raise SplitLeakError(f"Split roles overlap on cells {sorted(overlaps)[:5]}")
    if not split.train:
        raise EmptyLabelSet("The split has no training cells")


# ==================================================================================================
# Pre-training
# ==================================================================================================
def pretrain_autoencoder(model: LatteModel, data: FeatureGrid, cfg: TrainConfig,
                         epochs: Optional[int] = None) -> LatteModel:
    """ Minimize the reconstruction loss over cell vectors; only the auto-encoder moves """
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    if epochs <= 0:
        return model
    log = Logger()
    vectors = model.scale_features(data).reshape(-1, model.config.n_features)
    if not np.all(np.isfinite(vectors)):
        raise DivergenceError("Pre-training data is not finite", term="ae")
    optimizer = AdamOptimizer(model.autoencoder.parameters(), cfg.pretrain_lr,
                              clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 1])

    for epoch in range(epochs):
        order = rng.permutation(len(vectors))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.pretrain_batch):
            batch = Tensor(vectors[order[start:start + cfg.pretrain_batch]])
            with Tape() as tape:
                x_sp = sparse_forward(batch, model.sparse)
                loss = _term("ae", lambda: loss_ae(x_sp, decode(encode(x_sp, model.autoencoder),
                                                                model.autoencoder)))
            optimizer.step(tape.backward(loss))
            total += loss.item() * len(batch.data)
            count += len(batch.data)
        model.pretrain_history.append(total / count)
        log.pretrain_epoch(epoch, total / count)
    return model


def reconstruction_error(model: LatteModel, data: FeatureGrid) -> float:
    vectors = Tensor(model.scale_features(data).reshape(-1, model.config.n_features))
    x_sp = sparse_forward(vectors, model.sparse)
    return loss_ae(x_sp, decode(encode(x_sp, model.autoencoder), model.autoencoder)).item()


# ==================================================================================================
# Training
# ==================================================================================================
class Snapshot:
    """ Predictions and last-step embeddings for every window end, without gradients """
    predictions: np.ndarray  # [n_ends, H, W]
    embeddings: np.ndarray  # [n_ends, H, W, C]

    def __init__(self, predictions: np.ndarray, embeddings: np.ndarray) -> None:
        self.predictions = predictions
        self.embeddings = embeddings


class Trainer:
    """ Joint optimization of all loss terms on sliding windows of one period """
    history: TrainHistory
    ac_state: Optional[AutocorrelationState] = None

    def __init__(self, model: LatteModel, cfg: TrainConfig) -> None:
        self.LOG = Logger()
        self.model = model
        self.cfg = cfg
        self.optimizer = AdamOptimizer(model.parameters(), cfg.lr, clip_norm=cfg.clip_norm)

    def train(self, data: GridDataset, split: LocationSplit,
              fit_model_scalers: bool = True) -> Tuple[LatteModel, TrainHistory]:
        cfg, model = self.cfg, self.model
        check_split(split)
        if fit_model_scalers or not model.scalers_fitted:
            fit_scalers(model, data, split.train)
            pretrain_autoencoder(model, data.features, cfg)

        self.scaled = model.scale_features(data.features)
        self.ends, self.length = window_ends(data.time_steps, model.config.window)
        shape = data.labels.mask.shape[1:]
        self.train_mask = data.labels.mask & cell_mask(split.train, shape)
        self.val_mask = data.labels.mask & cell_mask(split.val or split.train, shape)
        if not self.train_mask[self.ends].any():
            raise EmptyLabelSet("No training labels inside the training windows")
        self.values = data.labels.values
        self.history = TrainHistory()
        self.ac_state = None

        rng = np.random.default_rng([cfg.seed, 2])
        best_val = np.inf
        best_state = model.state_dict()
        stale = 0
        snapshot = self.full_pass()
        self.LOG.training_start(cfg.max_epochs, datetime.today())

        for epoch in range(cfg.max_epochs):
            if cfg.weights.eta > 0 and epoch % cfg.refit_every == 0:
                self.ac_state = self.refit(epoch, snapshot)

            sums = np.zeros(6)
            evaluated = [False] * 6
            batches = 0
            order = [self.ends[i] for i in rng.permutation(len(self.ends))]
            for start in range(0, len(order), cfg.batch):
                parts = self.step(order[start:start + cfg.batch], rng, epoch)
                if parts is None:
                    STAT.skipped_batches += 1
                    continue
                batches += 1
                for k, value in enumerate(parts):
                    if value is not None:
                        sums[k] += value
                        evaluated[k] = True
            STAT.epochs += 1

            snapshot = self.full_pass()
            val_rmse = self.rmse_on(snapshot, self.val_mask)
            means: List[Optional[float]] = [
                float(s / max(batches, 1)) if e else None for s, e in zip(sums, evaluated)
            ]
            if val_rmse < best_val:
                best_val = val_rmse
                best_state = model.state_dict()
                self.history.best_epoch = epoch
                stale = 0
            else:
                stale += 1

            fitted = self.ac_state.model if self.ac_state is not None else None
            record = EpochRecord(
                epoch=epoch, pred=means[0] or 0.0, sp=means[1] or 0.0, ae=means[2] or 0.0,
                stc=means[3] or 0.0, ac=means[4], total=means[5] or 0.0,
                val_rmse=val_rmse, best_val_rmse=best_val,
                nugget=fitted.nugget if fitted else None, sill=fitted.sill if fitted else None,
                range=fitted.range if fitted else None, selected=int(model.sparse.mask().sum()))
            self.history.append(record)
            self.LOG.training_epoch(record)

            if stale >= cfg.patience:
                STAT.early_stops += 1
                self.history.stopped_early = True
                self.LOG.training_early_stop(epoch, cfg.patience)
                break

        model.load_state_dict(best_state)
        self.LOG.training_finish()
        return model, self.history

    def step(self, ends: Sequence[int], rng: np.random.Generator,
             epoch: int) -> Optional[Tuple[Optional[float], ...]]:
        """
        One optimizer step on a batch of windows. Returns the values of (pred, sp, ae, stc, ac,
        total), skipped terms as None; None if the batch holds no labels
        """
        cfg, model, w = self.cfg, self.model, self.cfg.weights
        mask = self.train_mask[list(ends)]
        if not mask.any():
            return None
        windows = np.stack([self.scaled[t - self.length + 1:t + 1] for t in ends])
        labels = self.values[list(ends)]

        with Tape() as tape:
            fp = _term("forward", lambda: model.forward(windows))
            pred = _term("pred", lambda: loss_pred(fp.prediction, labels, mask))
            sp = _term("sp", lambda: loss_sp(model.sparse)) if w.alpha > 0 else None
            ae = _term("ae", lambda: loss_ae(fp.x_sp, fp.x_hat)) if w.beta > 0 else None
            stc = _term("stc", lambda: loss_stc(fp.r, cfg.neighborhood, w.lambda_1, w.lambda_2)) \
                if w.lam > 0 else None
            ac = None
            if w.eta > 0 and self.ac_state is not None:
                ac = _term("ac", lambda: self.autocorrelation_term(fp, rng))
            parts = LossParts(pred, sp, ae, stc, ac)
            total = _term("total", lambda: loss_total(parts, w))
        self.optimizer.step(tape.backward(total))
        return tuple(None if p is None else p.item() for p in parts) + (total.item(),)

    def autocorrelation_term(self, fp, rng: np.random.Generator) -> Tensor:
        assert self.ac_state is not None
        embeddings = fp.r.data[:, -1].reshape(-1, fp.r.shape[-1])
        predicted = prediction_distributions(embeddings, fp.prediction, self.ac_state, rng,
                                             self.cfg.step_pairs)
        self.LOG.dbg_variogram_bins(self.ac_state.label_bins, predicted)
        ac = loss_ac(list(zip(self.ac_state.label_bins, predicted)))
        STAT.ac_bins += ac.valid_bins
        STAT.ac_evaluations += 1
        return ac.value

    def refit(self, epoch: int, snapshot: Snapshot) -> Optional[AutocorrelationState]:
        """ Refit the label semivariogram in embedding space; failures skip the term """
        cfg = self.cfg
        mask = self.train_mask[self.ends]
        embeddings = snapshot.embeddings[mask]
        values = self.values[self.ends][mask]
        predictions = snapshot.predictions[mask]
        try:
            state = fit_autocorrelation(embeddings, values, cfg.lag_size, cfg.min_pairs,
                                        np.random.default_rng([cfg.seed, 3, epoch]),
                                        cfg.max_points, cfg.max_pairs, seed=cfg.seed)
        except LatteException as e:
            STAT.failed_fits += 1
            self.LOG.warning("training", f"epoch {epoch}: variogram fit failed ({e}); "
                             f"autocorrelation term skipped")
            return None
        STAT.variogram_fits += 1
        self.LOG.dbg_variogram_fit(epoch, state.model, state.valid_bins)

        prediction_model = None
        try:
            # same pairs as the label fit
            prediction_model = fit_autocorrelation(
                embeddings, predictions, cfg.lag_size, cfg.min_pairs,
                np.random.default_rng([cfg.seed, 3, epoch]), cfg.max_points, cfg.max_pairs,
                seed=cfg.seed).model
        except LatteException:
            pass
        report = variogram_report(state.bins, state.model, state.label_bins, prediction_model)
        report["epoch"] = epoch
        report["lag_scale"] = state.lag_scale
        self.history.variogram_reports.append(report)
        return state

    def full_pass(self, batch: int = 8) -> Snapshot:
        preds, embeds = [], []
        for start in range(0, len(self.ends), batch):
            chunk = self.ends[start:start + batch]
            windows = np.stack([self.scaled[t - self.length + 1:t + 1] for t in chunk])
            fp = _term("forward", lambda: self.model.forward(windows))
            preds.append(fp.prediction.data)
            embeds.append(fp.r.data[:, -1])
        return Snapshot(np.concatenate(preds), np.concatenate(embeds))

    def rmse_on(self, snapshot: Snapshot, mask: np.ndarray) -> float:
        m = mask[self.ends]
        if not m.any():
            return float("inf")
        return float(np.sqrt(np.mean((snapshot.predictions[m] - self.values[self.ends][m]) ** 2)))


def train(model: LatteModel, data: GridDataset, split: LocationSplit,
          cfg: TrainConfig) -> Tuple[LatteModel, TrainHistory]:
    return Trainer(model, cfg).train(data, split)


def fine_tune(model: LatteModel, data: GridDataset, split: LocationSplit, cfg: TrainConfig,
              prior_splits: Sequence[LocationSplit] = ()) -> Tuple[LatteModel, TrainHistory]:
    """
    Continue optimizing a trained model on a new period. Locations must keep mutually exclusive
    roles across periods.
    """
    for prior in prior_splits:
        leaked = (split.test & prior.train) | (split.train & prior.test)
        if leaked:
            raise SplitLeakError(f"Cells {sorted(leaked)[:5]} switch between train and test "
                                 f"across periods")
    if not model.scalers_fitted:
        raise ShapeError("Fine-tuning needs a trained model")
    trainer = Trainer(model, cfg._replace(pretrain_epochs=0))
    return trainer.train(data, split, fit_model_scalers=False)


# ==================================================================================================
# Evaluation
# ==================================================================================================
def evaluate(y_hat: np.ndarray, y: np.ndarray, mask: np.ndarray) -> Metrics:
    """ RMSE and R^2 over the masked entries; R^2 is undefined for constant labels """
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if y_hat.shape != y.shape or y.shape != mask.shape:
        raise ShapeError(f"Prediction {y_hat.shape}, labels {y.shape} and mask {mask.shape} "
                         f"must agree")
    if not mask.any():
        raise EmptyLabelSet("Nothing to evaluate: the mask is empty")
    residual = y_hat[mask] - y[mask]
    ss_res = float(np.sum(residual ** 2))
    ss_tot = float(np.sum((y[mask] - y[mask].mean()) ** 2))
    rmse = float(np.sqrt(ss_res / mask.sum()))
    if ss_tot == 0:
        return Metrics(rmse, float("nan"), False, int(mask.sum()))
    return Metrics(rmse, 1.0 - ss_res / ss_tot, True, int(mask.sum()))


def proximity_profile(predictions: np.ndarray, feature: np.ndarray, spec: GridSpec,
                      radii: Sequence[float] = (500.0, 1000.0)) -> Dict[str, float]:
    """
    Mean prediction over the cells within each radius [m] of a cell where the feature is present
    (non-zero), and over the cells beyond the largest radius.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.ndim == 2:
        predictions = predictions[None]
    if predictions.shape[1:] != (spec.height, spec.width) or \
            np.shape(feature) != (spec.height, spec.width):
        raise ShapeError("Predictions and feature layer must cover the grid")
    present = np.asarray(feature) != 0
    if not present.any():
        raise InsufficientObservations("The feature is absent from every cell")

    centers = cell_centers(spec).reshape(-1, 2)
    nearest = cdist(centers, centers[present.reshape(-1)]).min(axis=1).reshape(spec.height,
                                                                                spec.width)
    per_cell = predictions.mean(axis=0)
    profile = {}
    for radius in radii:
        profile[f"within_{radius:g}m"] = float(per_cell[nearest <= radius].mean())
    beyond = nearest > max(radii)
    profile["beyond"] = float(per_cell[beyond].mean()) if beyond.any() else float("nan")
    return profile


def selected_feature_report(model: LatteModel,
                            names: Optional[List[str]] = None) -> List[Dict[str, Any]]:
    """ Names and sparse-layer weights of the features the model keeps """
    names = names or model.feature_names
    weights = model.sparse.weights.data
    return [{"index": int(i), "name": names[i], "weight": float(weights[i])}
            for i in np.flatnonzero(model.sparse.mask())]
