"""
Forecasting models: the Bi-LSTM embedding -> denoising autoencoder ->
transformer encoder pipeline (BDT) and the five benchmark networks.

Every model consumes a WindowBatch and emits [B x H] normalized forecasts
in one pass (direct multi-step output).
"""
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigurationError, DimensionError
from ..models import BENCHMARK_KINDS, MODEL_KINDS, Hyperparams
from . import autodiff as ad
from .autodiff import Tensor
from .dataset import HOUR, HourlySeries, Normalizer, WindowBatch, check_hourly, time_value_features
from .layers import (BiLstmLayer, DaeParams, Dense, EncoderBlock, LstmCell, Module, bilstm_forward,
                     corrupt, dae_decode, dae_encode, encoder_block_forward, glorot_uniform, lstm_scan)

Mode = Literal["train", "eval"]
EMBEDDING_WIDTH = 4


def build_embedding_input(values: Sequence[float], timestamps: Sequence, normalizer: Normalizer) -> Tensor:
    """[L x 4] rows of (normalized load, hour/23, weekday/6, norm(t))"""
    stamps = pd.DatetimeIndex(timestamps)
    values = np.asarray(values, dtype=np.float64)
    if len(stamps) != len(values):
        raise DimensionError(f"{len(values)} load values but {len(stamps)} timestamps")
    if stamps.tz is None:
        stamps = stamps.tz_localize("UTC")
    check_hourly(stamps)
    feats = time_value_features(stamps, normalizer)
    return Tensor(np.column_stack([normalizer.normalize(values), feats]))


class Forecaster(Module):
    kind = "base"

    def __init__(self, hp: Hyperparams):
        super().__init__()
        self.hp = hp

    @property
    def horizon(self) -> int:
        return self.hp.horizon

    def forward(self, batch: WindowBatch, mode: Mode = "eval",
                rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def predict(self, batch: WindowBatch) -> np.ndarray:
        with ad.suspended():
            return self.forward(batch, "eval").numpy()

    def _head_input(self, seq: Tensor) -> Tensor:
        batch = seq.shape[0]
        return ad.reshape(seq, (batch, seq.shape[1] * seq.shape[2]))


def _staged(stage: str, fn, *args):
    try:
        return fn(*args)
    except DimensionError as e:
        raise DimensionError(f"{stage}: {e}") from e


# --- BDT --------------------------------------------------------------------

class BdtModel(Forecaster):
    kind = "bdt"

    def __init__(self, hp: Hyperparams, rng: np.random.Generator, dae: Optional[DaeParams] = None):
        super().__init__(hp)
        d = hp.model_dim
        self.add_module("embedding", BiLstmLayer(EMBEDDING_WIDTH, hp.hidden_dim, d, rng))
        self.add_module("dae", dae or DaeParams(d, hp.effective_latent_dim, rng,
                                                activation=hp.dae_activation, corruption=hp.corruption))
        self.encoders: List[EncoderBlock] = []
        for i in range(hp.num_layers):
            block = EncoderBlock(d, hp.num_heads, rng, hp.ff_multiplier, hp.layer_norm_eps)
            self.encoders.append(self.add_module(f"encoder_{i}", block))
        self.add_module("head", Dense(hp.lookback * d, hp.horizon, rng))

    def forward(self, batch: WindowBatch, mode: Mode = "eval",
                rng: Optional[np.random.Generator] = None) -> Tensor:
        return bdt_forward(self, Tensor(batch.embedding), mode, rng)


def bdt_reconstruct(model: BdtModel, e: Tensor, mode: Mode = "train",
                    rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """(X_em, X_hat_em): the embedding and its per-timestep DAE reconstruction"""
    x_em = _staged("bi-lstm embedding", bilstm_forward, model.embedding, e)
    x_tilde = x_em
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng(model.hp.corruption.seed)
        x_tilde = corrupt(x_em, model.dae.corruption, rng)
    h = _staged("dae encoder", dae_encode, model.dae, x_tilde)
    return x_em, _staged("dae decoder", dae_decode, model.dae, h)


def bdt_forward(model: BdtModel, e: Tensor, mode: Mode = "eval",
                rng: Optional[np.random.Generator] = None, with_reconstruction: bool = False):
    """
    e is [L x 4] (returns [H]) or [B x L x 4] (returns [B x H]). Corruption is
    applied only in train mode. With `with_reconstruction` the result is
    (forecast, X_em, X_hat_em) so callers can add the reconstruction loss.
    """
    e = ad.as_tensor(e)
    single = e.ndim == 2
    if single:
        e = ad.reshape(e, (1,) + e.shape)
    if e.ndim != 3 or e.shape[-1] != EMBEDDING_WIDTH:
        raise DimensionError(f"input: expected [.. x L x {EMBEDDING_WIDTH}], got {e.shape}")
    if e.shape[1] != model.hp.lookback:
        raise DimensionError(f"input: window length {e.shape[1]} differs from lookback {model.hp.lookback}")
    x_em, x_hat = bdt_reconstruct(model, e, mode, rng)
    z = x_hat
    for i, block in enumerate(model.encoders):
        z = _staged(f"encoder block {i}", encoder_block_forward, block, z)
    out = _staged("forecast head", model.head, model._head_input(z))
    if single:
        out = ad.reshape(out, (out.shape[-1],))
    return (out, x_em, x_hat) if with_reconstruction else out


# --- benchmarks --------------------------------------------------------------

def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerForecaster(Forecaster):
    kind = "transformer"

    def __init__(self, hp: Hyperparams, rng: np.random.Generator):
        super().__init__(hp)
        d = hp.model_dim
        self.positional = sinusoidal_encoding(hp.lookback, d)
        self.add_module("input", Dense(1, d, rng))
        self.encoders = [self.add_module(f"encoder_{i}", EncoderBlock(d, hp.num_heads, rng, hp.ff_multiplier,
                                                                       hp.layer_norm_eps))
                         for i in range(hp.num_layers)]
        self.add_module("head", Dense(hp.lookback * d, hp.horizon, rng))

    def forward(self, batch, mode="eval", rng=None) -> Tensor:
        x = self.input(Tensor(batch.values))
        z = ad.add(x, ad.constant(np.broadcast_to(self.positional, x.shape)))
        for block in self.encoders:
            z = encoder_block_forward(block, z)
        return self.head(self._head_input(z))


class RnnCell(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.register("W", glorot_uniform(rng, input_dim, hidden_dim))
        self.register("U", glorot_uniform(rng, hidden_dim, hidden_dim))
        self.register("b", np.zeros(hidden_dim))


class GruCell(Module):
    """Update gate z, reset gate r, candidate n; h' = h + z * (n - h)"""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for g in ("z", "r", "n"):
            self.register(f"W_{g}", glorot_uniform(rng, input_dim, hidden_dim))
            self.register(f"U_{g}", glorot_uniform(rng, hidden_dim, hidden_dim))
            self.register(f"b_{g}", np.zeros(hidden_dim))


def rnn_scan(cell: RnnCell, seq: Tensor) -> List[Tensor]:
    batch, steps, _ = seq.shape
    xw = ad.matmul(seq, cell.W)
    h = ad.constant(np.zeros((batch, cell.hidden_dim)))
    states = []
    for t in range(steps):
        h = ad.tanh(ad.add(ad.add(ad.index_axis(xw, t, axis=1), ad.matmul(h, cell.U)), cell.b))
        states.append(h)
    return states


def gru_step(cell: GruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    def gate(g, h):
        return ad.add(ad.add(ad.matmul(x_t, getattr(cell, f"W_{g}")), ad.matmul(h, getattr(cell, f"U_{g}"))),
                      getattr(cell, f"b_{g}"))

    z = ad.sigmoid(gate("z", h_prev))
    r = ad.sigmoid(gate("r", h_prev))
    n = ad.tanh(gate("n", ad.mul(r, h_prev)))
    return ad.add(h_prev, ad.mul(z, ad.sub(n, h_prev)))


def gru_scan(cell: GruCell, seq: Tensor) -> List[Tensor]:
    batch, steps, _ = seq.shape
    h = ad.constant(np.zeros((batch, cell.hidden_dim)))
    states = []
    for t in range(steps):
        h = gru_step(cell, ad.index_axis(seq, t, axis=1), h)
        states.append(h)
    return states


class RecurrentForecaster(Forecaster):
    """Stack of num_layers recurrent layers; the last hidden state feeds the head"""

    _cells = {"rnn": (RnnCell, rnn_scan), "lstm": (LstmCell, lstm_scan), "gru": (GruCell, gru_scan)}

    def __init__(self, kind: str, hp: Hyperparams, rng: np.random.Generator):
        super().__init__(hp)
        self.kind = kind
        cell_cls, self._scan = self._cells[kind]
        width = 1
        self.cells = []
        for i in range(hp.num_layers):
            self.cells.append(self.add_module(f"cell_{i}", cell_cls(width, hp.model_dim, rng)))
            width = hp.model_dim
        self.add_module("head", Dense(hp.model_dim, hp.horizon, rng))

    def features(self, batch: WindowBatch) -> Tensor:
        """Final hidden state of the top layer, [B x model_dim]"""
        seq = Tensor(batch.values)
        states = None
        for cell in self.cells:
            states = self._scan(cell, seq)
            seq = ad.stack(states, axis=1)
        return states[-1]

    def forward(self, batch, mode="eval", rng=None) -> Tensor:
        return self.head(self.features(batch))


class CausalConv1d(Module):
    """Kernel taps stacked into W [kernel*in x out]; output t sees inputs t-kernel+1 .. t"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        self.kernel = kernel
        self.register("W", glorot_uniform(rng, kernel * in_channels, out_channels))
        self.register("b", np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        length = x.shape[1]
        padded = ad.pad_front(x, self.kernel - 1, axis=1)
        taps = ad.slice_axis(padded, 0, length, axis=1)
        for j in range(1, self.kernel):
            taps = ad.concat_last(taps, ad.slice_axis(padded, j, j + length, axis=1))
        return ad.add(ad.matmul(taps, self.W), self.b)


class CnnForecaster(Forecaster):
    kind = "cnn"

    def __init__(self, hp: Hyperparams, rng: np.random.Generator):
        super().__init__(hp)
        d = hp.model_dim
        self.add_module("conv1", CausalConv1d(1, d, rng))
        self.add_module("conv2", CausalConv1d(d, d, rng))
        self.add_module("head", Dense(hp.lookback * d, hp.horizon, rng))

    def features(self, batch: WindowBatch) -> Tensor:
        x = ad.relu(self.conv1(Tensor(batch.values)))
        return ad.relu(self.conv2(x))

    def forward(self, batch, mode="eval", rng=None) -> Tensor:
        return self.head(self._head_input(self.features(batch)))


def build_benchmark(kind: str, hp: Hyperparams, rng: Optional[np.random.Generator] = None) -> Forecaster:
    rng = rng if rng is not None else np.random.default_rng(hp.seed)
    if kind == "transformer":
        return TransformerForecaster(hp, rng)
    if kind in ("rnn", "lstm", "gru"):
        return RecurrentForecaster(kind, hp, rng)
    if kind == "cnn":
        return CnnForecaster(hp, rng)
    raise ConfigurationError(f"unknown benchmark kind {kind!r}; expected one of {BENCHMARK_KINDS}")


def build_model(kind: str, hp: Hyperparams, rng: Optional[np.random.Generator] = None) -> Forecaster:
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    rng = rng if rng is not None else np.random.default_rng(hp.seed)
    if kind == "bdt":
        return BdtModel(hp, rng)
    return build_benchmark(kind, hp, rng)


def parameter_count(model: Module) -> int:
    return model.parameter_count()


def forecast_after(model: Forecaster, series: HourlySeries, normalizer: Normalizer) -> pd.DataFrame:
    """
    Forecast the H hours following the end of `series` from its last L hours.
    Returns timestamp,load_kwh rows on the kWh scale, clipped at zero.
    """
    lookback = model.hp.lookback
    if len(series) < lookback:
        raise DimensionError(f"series has {len(series)} hours but the model reads {lookback}")
    stamps = series.timestamps[-lookback:]
    e = build_embedding_input(series.values[-lookback:], stamps, normalizer).numpy()[None]
    batch = WindowBatch(e, e[..., :1].copy(), None)
    pred = normalizer.denormalize(model.predict(batch)[0])
    future = pd.date_range(stamps[-1] + HOUR, periods=model.horizon, freq=HOUR)
    return pd.DataFrame({"timestamp": future.strftime("%Y-%m-%dT%H:%M:%SZ"),
                         "load_kwh": np.clip(pred, 0.0, None)})
