"""
File: Learnable blocks: sparse feature-selection layer, auto-encoder, multi-kernel ConvLSTM stack
and the prediction head, plus their composition into a full model

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from typing import List, Dict, Tuple, Optional, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .interfaces import ModelConfig, FeatureGrid
from .util import ShapeError

State = Tuple[Tensor, Tensor]


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """ Fully-connected layer applied over the last axis """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str) -> None:
        self.weight = Tensor(_uniform(rng, (n_in, n_out), n_in), trainable=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), trainable=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


# ==================================================================================================
# Sparse layer
# ==================================================================================================
class SparseLayer:
    """
    Diagonal layer with one weight per input feature. A feature whose weight magnitude drops
    below the threshold is switched off.
    """

    def __init__(self, n_features: int, threshold: float = 1e-4) -> None:
        self.weights = Tensor(np.ones(n_features), trainable=True, name="sparse.weights")
        self.threshold = threshold

    @property
    def n_features(self) -> int:
        return self.weights.size

    def mask(self) -> np.ndarray:
        return np.abs(self.weights.data) >= self.threshold

    def parameters(self) -> List[Tensor]:
        return [self.weights]


def sparse_forward(x: Tensor, layer: SparseLayer) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != layer.n_features:
        raise ShapeError(f"Sparse layer expects {layer.n_features} features, got shape {x.shape}")
    return x * (layer.weights * layer.mask().astype(np.float64))


def selected_features(layer: SparseLayer) -> np.ndarray:
    return layer.mask()


# ==================================================================================================
# Auto-encoder
# ==================================================================================================
class Autoencoder:
    """ Per-cell MLP encoder P -> hidden -> latent (tanh) and a mirrored decoder """

    def __init__(self, n_features: int, latent_dim: int, hidden: int,
                 rng: np.random.Generator) -> None:
        self.n_features = n_features
        self.latent_dim = latent_dim
        self.enc_hidden = Dense(n_features, hidden, rng, "encoder.hidden")
        self.enc_out = Dense(hidden, latent_dim, rng, "encoder.out")
        self.dec_hidden = Dense(latent_dim, hidden, rng, "decoder.hidden")
        self.dec_out = Dense(hidden, n_features, rng, "decoder.out")

    def encoder_parameters(self) -> List[Tensor]:
        return self.enc_hidden.parameters() + self.enc_out.parameters()

    def decoder_parameters(self) -> List[Tensor]:
        return self.dec_hidden.parameters() + self.dec_out.parameters()

    def parameters(self) -> List[Tensor]:
        return self.encoder_parameters() + self.decoder_parameters()


def encode(x_sp: Tensor, ae: Autoencoder) -> Tensor:
    x_sp = ad.as_tensor(x_sp)
    if x_sp.ndim == 0 or x_sp.shape[-1] != ae.n_features:
        raise ShapeError(f"Encoder expects {ae.n_features} features, got shape {x_sp.shape}")
    return ad.tanh(ae.enc_out(ad.tanh(ae.enc_hidden(x_sp))))


def decode(embedding: Tensor, ae: Autoencoder) -> Tensor:
    embedding = ad.as_tensor(embedding)
    if embedding.ndim == 0 or embedding.shape[-1] != ae.latent_dim:
        raise ShapeError(f"Decoder expects {ae.latent_dim} channels, got shape {embedding.shape}")
    return ae.dec_out(ad.tanh(ae.dec_hidden(embedding)))


# ==================================================================================================
# ConvLSTM
# ==================================================================================================
class ConvLstmBranch:
    """
    One ConvLSTM layer. A single kernel [k, k, C_in + hidden, 4 * hidden] produces the
    pre-activations of the input, forget, output and candidate gates, in this order.
    """

    def __init__(self, kernel_size: int, in_channels: int, hidden: int,
                 rng: np.random.Generator) -> None:
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ShapeError(f"ConvLSTM kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.hidden = hidden
        fan_in = kernel_size * kernel_size * (in_channels + hidden)
        self.kernel = Tensor(
            _uniform(rng, (kernel_size, kernel_size, in_channels + hidden, 4 * hidden), fan_in),
            trainable=True, name=f"convlstm.k{kernel_size}.kernel")
        self.bias = Tensor(np.zeros(4 * hidden), trainable=True,
                           name=f"convlstm.k{kernel_size}.bias")

    def parameters(self) -> List[Tensor]:
        return [self.kernel, self.bias]

    def zero_state(self, batch: int, height: int, width: int) -> State:
        zeros = np.zeros((batch, height, width, self.hidden))
        return Tensor(zeros), Tensor(zeros.copy())


def convlstm_step(state: State, e_t: Tensor, branch: ConvLstmBranch) -> State:
    """ One recurrence step; inputs are [H, W, C] or batched [N, H, W, C] """
    h, c = state
    e_t = ad.as_tensor(e_t)
    unbatched = e_t.ndim == 3
    if unbatched:
        e_t = ad.reshape(e_t, (1,) + e_t.shape)
        h = ad.reshape(h, (1,) + h.shape)
        c = ad.reshape(c, (1,) + c.shape)
    if e_t.ndim != 4 or h.shape != c.shape or h.shape[:3] != e_t.shape[:3]:
        raise ShapeError(f"ConvLSTM state {h.shape} does not match input {e_t.shape}")
    if e_t.shape[3] != branch.in_channels or h.shape[3] != branch.hidden:
        raise ShapeError(f"ConvLSTM branch expects {branch.in_channels} input and "
                         f"{branch.hidden} hidden channels")

    n = branch.hidden
    z = ad.conv2d_same(ad.concat([e_t, h], axis=-1), branch.kernel) + branch.bias
    i = ad.sigmoid(z[..., 0:n])
    f = ad.sigmoid(z[..., n:2 * n])
    o = ad.sigmoid(z[..., 2 * n:3 * n])
    g = ad.tanh(z[..., 3 * n:4 * n])
    c_next = f * c + i * g
    h_next = o * ad.tanh(c_next)

    if unbatched:
        return ad.reshape(h_next, h_next.shape[1:]), ad.reshape(c_next, c_next.shape[1:])
    return h_next, c_next


class ConvLstmStack:
    """ Parallel ConvLSTM branches with different kernel sizes; outputs are concatenated """

    def __init__(self, kernels: Sequence[int], in_channels: int, hidden: int,
                 rng: np.random.Generator) -> None:
        self.branches = [ConvLstmBranch(k, in_channels, hidden, rng) for k in kernels]
        self.in_channels = in_channels
        self.hidden = hidden

    @property
    def out_channels(self) -> int:
        return self.hidden * len(self.branches)

    def parameters(self) -> List[Tensor]:
        return [p for b in self.branches for p in b.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def st_embed(e_window: Tensor, stack: ConvLstmStack) -> Tensor:
    """
    Unroll every branch over the window from a zero state.
    [T', H, W, C] -> [T', H, W, hidden * branches], also accepts a leading batch axis.
    """
    e_window = ad.as_tensor(e_window)
    unbatched = e_window.ndim == 4
    if unbatched:
        e_window = ad.reshape(e_window, (1,) + e_window.shape)
    if e_window.ndim != 5 or e_window.shape[1] < 1:
        raise ShapeError(f"Embedding window must be [T', H, W, C], got {e_window.shape}")
    batch, steps, height, width, _ = e_window.shape

    outputs = []
    for branch in stack.branches:
        state = branch.zero_state(batch, height, width)
        hidden_seq = []
        for t in range(steps):
            state = convlstm_step(state, e_window[:, t], branch)
            hidden_seq.append(state[0])
        outputs.append(ad.stack(hidden_seq, axis=1))
    embedding = ad.concat(outputs, axis=-1)

    if unbatched:
        return ad.reshape(embedding, embedding.shape[1:])
    return embedding


# ==================================================================================================
# Prediction head
# ==================================================================================================
class PredictionHead:
    """ Per-cell MLP: embedding -> hidden (tanh) -> 1 """

    def __init__(self, in_channels: int, hidden: int, rng: np.random.Generator) -> None:
        self.in_channels = in_channels
        self.hidden = Dense(in_channels, hidden, rng, "head.hidden")
        self.out = Dense(hidden, 1, rng, "head.out")

    def parameters(self) -> List[Tensor]:
        return self.hidden.parameters() + self.out.parameters()


def predict(r_t: Tensor, head: PredictionHead) -> Tensor:
    """ [..., H, W, C] -> [..., H, W] """
    r_t = ad.as_tensor(r_t)
    if r_t.ndim < 1 or r_t.shape[-1] != head.in_channels:
        raise ShapeError(f"Prediction head expects {head.in_channels} channels, "
                         f"got shape {r_t.shape}")
    out = head.out(ad.tanh(head.hidden(r_t)))
    return ad.reshape(out, out.shape[:-1])


# ==================================================================================================
# Full model
# ==================================================================================================
class ForwardPass(NamedTuple):
    x_sp: Tensor  # [N, T', H, W, P]
    x_hat: Tensor  # [N, T', H, W, P]
    embedding: Tensor  # [N, T', H, W, latent]
    r: Tensor  # [N, T', H, W, C]
    prediction: Tensor  # [N, H, W], label units, at the last step of each window


class LatteModel:
    """
    Sparse layer -> encoder -> ConvLSTM stack -> prediction head. The model also carries the
    feature scaler and the label scaler it was trained with.
    """
    config: ModelConfig
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: float = 0.0
    label_std: float = 1.0
    feature_names: List[str]

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.sparse = SparseLayer(config.n_features, config.threshold)
        self.autoencoder = Autoencoder(config.n_features, config.latent_dim, config.ae_hidden,
                                       rng)
        self.stack = ConvLstmStack(config.kernels, config.latent_dim, config.hidden, rng)
        self.head = PredictionHead(self.stack.out_channels, config.head_hidden, rng)
        self.feature_mean = np.zeros(config.n_features)
        self.feature_std = np.ones(config.n_features)
        self.feature_names = [f"f{i}" for i in range(config.n_features)]
        self.scalers_fitted = False
        self.pretrain_history: List[float] = []

    # ==============================================================================================
    # Parameters
    def named_parameters(self) -> Dict[str, Tensor]:
        params = self.sparse.parameters() + self.autoencoder.parameters() + \
            self.stack.parameters() + self.head.parameters()
        return {p.name: p for p in params}

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"Checkpoint misses parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"Parameter {name} has shape {list(p.shape)}, checkpoint "
                                 f"holds {list(value.shape)}")
            p.data = value.copy()

    def scaler_state(self) -> Dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
            "feature_names": self.feature_names,
        }

    def load_scaler_state(self, state: Dict) -> None:
        self.feature_mean = np.asarray(state["feature_mean"], dtype=np.float64)
        self.feature_std = np.asarray(state["feature_std"], dtype=np.float64)
        self.label_mean = float(state["label_mean"])
        self.label_std = float(state["label_std"])
        self.feature_names = list(state.get("feature_names", self.feature_names))
        self.scalers_fitted = True

    # ==============================================================================================
    # Forward
    def forward(self, windows: np.ndarray) -> ForwardPass:
        """ windows: standardized features [N, T', H, W, P] """
        x = Tensor(windows)
        if x.ndim != 5:
            raise ShapeError(f"Model input must be [N, T', H, W, P], got {x.shape}")
        x_sp = sparse_forward(x, self.sparse)
        embedding = encode(x_sp, self.autoencoder)
        x_hat = decode(embedding, self.autoencoder)
        r = st_embed(embedding, self.stack)
        standardized = predict(r[:, -1], self.head)
        return ForwardPass(x_sp, x_hat, embedding, r, standardized * self.label_std +
                           self.label_mean)

    def scale_features(self, grid: FeatureGrid) -> np.ndarray:
        """ Standardized full feature tensor [T, H, W, P] """
        if grid.n_features != self.config.n_features:
            raise ShapeError(f"Model was built for {self.config.n_features} features, the grid "
                             f"has {grid.n_features}")
        return (grid.full() - self.feature_mean) / self.feature_std

    def predict_grid(self, grid: FeatureGrid, times: Optional[Sequence[int]] = None,
                     batch: int = 8) -> np.ndarray:
        """ Predictions for all cells [len(times), H, W] """
        return self.infer(grid, times, batch)[0]

    def infer(self, grid: FeatureGrid, times: Optional[Sequence[int]] = None,
              batch: int = 8) -> Tuple[np.ndarray, np.ndarray]:
        """
        Predictions [len(times), H, W] and last-step embeddings [len(times), H, W, C].
        Time steps earlier than a full window are predicted from the shorter history available.
        """
        times = list(range(grid.time_steps)) if times is None else list(times)
        for t in times:
            if not 0 <= t < grid.time_steps:
                raise ShapeError(f"Time step {t} outside [0, {grid.time_steps})")
        scaled = self.scale_features(grid)
        window = self.config.window
        out = np.zeros((len(times), grid.spec.height, grid.spec.width))
        embeddings = np.zeros(out.shape + (self.config.embedding_dim,))

        full = [i for i, t in enumerate(times) if t >= window - 1]
        for i, t in enumerate(times):
            if t < window - 1:
                fp = self.forward(scaled[None, :t + 1])
                out[i] = fp.prediction.data[0]
                embeddings[i] = fp.r.data[0, -1]
        for start in range(0, len(full), batch):
            chunk = full[start:start + batch]
            windows = np.stack([scaled[times[i] - window + 1:times[i] + 1] for i in chunk])
            fp = self.forward(windows)
            out[chunk] = fp.prediction.data
            embeddings[chunk] = fp.r.data[:, -1]
        return out, embeddings
