"""
Differentiable building blocks: LSTM cell, Bi-LSTM embedding, denoising
autoencoder, scaled dot-product and multi-head attention, encoder block.

Layers are Modules: named trees of immutable parameter tensors. Training
replaces tensors through load_state(); forward passes only read them.
"""
import math
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ..errors import ConfigurationError, ContractError, DimensionError
from ..models import CorruptionConfig
from . import autodiff as ad
from .autodiff import ParamSet, Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Named container of parameters and child modules"""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def register(self, name: str, value) -> Tensor:
        t = ad.as_tensor(value)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def __getattr__(self, name: str):
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        children = self.__dict__.get("_children", {})
        if name in children:
            return children[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> ParamSet:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def load_state(self, params: Mapping[str, Tensor], strict: bool = False) -> None:
        """Replace parameters by dotted name; unknown names are errors"""
        own = self.parameters()
        unknown = set(params) - set(own)
        if unknown:
            raise ContractError(f"unknown parameter names: {sorted(unknown)[:5]}")
        if strict and set(own) - set(params):
            raise ContractError(f"missing parameters: {sorted(set(own) - set(params))[:5]}")
        for name, value in params.items():
            t = ad.as_tensor(value)
            if t.shape != own[name].shape:
                raise DimensionError(f"parameter {name}: expected shape {own[name].shape}, got {t.shape}")
            self._assign(name.split("."), t)

    def _assign(self, path: List[str], t: Tensor) -> None:
        if len(path) == 1:
            self._params[path[0]] = t
        else:
            self._children[path[0]]._assign(path[1:], t)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return x
    return ad.map_unary(x, kind)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.register("W", glorot_uniform(rng, in_dim, out_dim))
        self.register("b", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.register("scale", np.ones(width))
        self.register("shift", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.scale, self.shift, self.eps)


# --- recurrent ------------------------------------------------------------

GATES = ("i", "f", "o", "c")


class LstmCell(Module):
    """Weights W_g [input x hidden], U_g [hidden x hidden], b_g [hidden] for g in i, f, o, c"""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for g in GATES:
            self.register(f"W_{g}", glorot_uniform(rng, input_dim, hidden_dim))
            self.register(f"U_{g}", glorot_uniform(rng, hidden_dim, hidden_dim))
            self.register(f"b_{g}", np.ones(hidden_dim) if g == "f" else np.zeros(hidden_dim))

    def project_inputs(self, seq: Tensor) -> Dict[str, Tensor]:
        return {g: ad.matmul(seq, getattr(self, f"W_{g}")) for g in GATES}

    def step(self, xw: Dict[str, Tensor], h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
        def pre(g):
            return ad.add(ad.add(xw[g], ad.matmul(h_prev, getattr(self, f"U_{g}"))), getattr(self, f"b_{g}"))

        i = ad.sigmoid(pre("i"))
        f = ad.sigmoid(pre("f"))
        o = ad.sigmoid(pre("o"))
        c_tilde = ad.tanh(pre("c"))
        c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, c_tilde))
        h_t = ad.mul(o, ad.tanh(c_t))
        return h_t, c_t


def lstm_step(cell: LstmCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
    """One LSTM update on row-batched inputs x_t [B x input_dim]"""
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    if x_t.ndim != 2 or x_t.shape[-1] != cell.input_dim:
        raise DimensionError(f"lstm_step: input {x_t.shape} does not match input_dim {cell.input_dim}")
    expected = (x_t.shape[0], cell.hidden_dim)
    if h_prev.shape != expected or c_prev.shape != expected:
        raise DimensionError(f"lstm_step: states {h_prev.shape}/{c_prev.shape}, expected {expected}")
    return cell.step(cell.project_inputs(x_t), h_prev, c_prev)


def _batched(seq: Tensor) -> Tuple[Tensor, bool]:
    if seq.ndim == 2:
        return ad.reshape(seq, (1,) + seq.shape), True
    if seq.ndim == 3:
        return seq, False
    raise DimensionError(f"sequence must be [T x dim] or [B x T x dim], got {seq.shape}")


def lstm_scan(cell: LstmCell, seq: Tensor, reverse: bool = False) -> List[Tensor]:
    """Hidden states [B x hidden] for every step of seq [B x T x input], in time order"""
    batch, steps, width = seq.shape
    if width != cell.input_dim:
        raise DimensionError(f"lstm_scan: input width {width} does not match input_dim {cell.input_dim}")
    xw = cell.project_inputs(seq)
    h = c = ad.constant(np.zeros((batch, cell.hidden_dim)))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    states: List[Optional[Tensor]] = [None] * steps
    for t in order:
        h, c = cell.step({g: ad.index_axis(xw[g], t, axis=1) for g in GATES}, h, c)
        states[t] = h
    return states


class BiLstmLayer(Module):
    def __init__(self, input_dim: int, hidden_dim: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.add_module("forward_cell", LstmCell(input_dim, hidden_dim, rng))
        self.add_module("backward_cell", LstmCell(input_dim, hidden_dim, rng))
        self.add_module("projection", Dense(2 * hidden_dim, embed_dim, rng))


def bilstm_states(layer: BiLstmLayer, seq: Tensor) -> Tensor:
    """Per-step [forward ; backward] hidden states, [.. x T x 2*hidden]"""
    seq = ad.as_tensor(seq)
    if seq.ndim in (2, 3) and seq.shape[-2] == 0:
        raise ContractError("bilstm_forward needs a sequence of at least one step")
    batched, squeeze = _batched(seq)
    fwd = ad.stack(lstm_scan(layer.forward_cell, batched), axis=1)
    bwd = ad.stack(lstm_scan(layer.backward_cell, batched, reverse=True), axis=1)
    states = ad.concat_last(fwd, bwd)
    if squeeze:
        states = ad.reshape(states, states.shape[1:])
    return states


def bilstm_forward(layer: BiLstmLayer, seq: Tensor) -> Tensor:
    return layer.projection(bilstm_states(layer, seq))


# --- denoising autoencoder ------------------------------------------------

def corrupt(x: Tensor, cfg: CorruptionConfig, rng: np.random.Generator) -> Tensor:
    """Zero-mask each element with probability p, or add N(0, sigma^2) noise"""
    if cfg.kind == "zero_mask":
        if cfg.mask_probability == 0:
            return x
        keep = (rng.random(x.shape) >= cfg.mask_probability).astype(np.float64)
        return ad.mul(x, ad.constant(keep))
    if cfg.sigma == 0:
        return x
    return ad.add(x, ad.constant(rng.normal(0.0, cfg.sigma, size=x.shape)))


class DaeParams(Module):
    """Encoder W [d x latent], b; decoder W_prime [latent x d], b_hat"""

    def __init__(self, d: int, latent_dim: int, rng: np.random.Generator,
                 activation: str = "sigmoid", corruption: Optional[CorruptionConfig] = None):
        super().__init__()
        if latent_dim >= d:
            raise ConfigurationError(f"latent_dim {latent_dim} must be smaller than input dim {d}")
        self.d = d
        self.latent_dim = latent_dim
        self.activation = activation
        self.corruption = corruption or CorruptionConfig()
        self.register("W", glorot_uniform(rng, d, latent_dim))
        self.register("b", np.zeros(latent_dim))
        self.register("W_prime", glorot_uniform(rng, latent_dim, d))
        self.register("b_hat", np.zeros(d))

    @classmethod
    def identity(cls, d: int, corruption: Optional[CorruptionConfig] = None) -> "DaeParams":
        """latent_dim = d, linear activation, identity weights"""
        dae = cls.__new__(cls)
        Module.__init__(dae)
        dae.d = dae.latent_dim = d
        dae.activation = "linear"
        dae.corruption = corruption or CorruptionConfig()
        dae.register("W", np.eye(d))
        dae.register("b", np.zeros(d))
        dae.register("W_prime", np.eye(d))
        dae.register("b_hat", np.zeros(d))
        return dae


def dae_encode(dae: DaeParams, x_tilde: Tensor) -> Tensor:
    x_tilde = ad.as_tensor(x_tilde)
    if x_tilde.ndim < 2 or x_tilde.shape[-1] != dae.d:
        raise DimensionError(f"dae_encode: input {x_tilde.shape} does not end in d = {dae.d}")
    return activate(ad.add(ad.matmul(x_tilde, dae.W), dae.b), dae.activation)


def dae_decode(dae: DaeParams, h: Tensor) -> Tensor:
    h = ad.as_tensor(h)
    if h.ndim < 2 or h.shape[-1] != dae.latent_dim:
        raise DimensionError(f"dae_decode: latent {h.shape} does not end in latent_dim = {dae.latent_dim}")
    return activate(ad.add(ad.matmul(h, dae.W_prime), dae.b_hat), dae.activation)


def dae_loss(original: Tensor, reconstructed: Tensor) -> Tensor:
    """(1/N) * sum over the N vectors of the squared reconstruction norm"""
    original, reconstructed = ad.as_tensor(original), ad.as_tensor(reconstructed)
    if original.shape != reconstructed.shape:
        raise DimensionError(f"dae_loss: original {original.shape} and reconstruction {reconstructed.shape} differ")
    n = max(1, original.size // original.shape[-1]) if original.ndim else 1
    return ad.scale(ad.sum_all(ad.square(ad.sub(original, reconstructed))), 1.0 / n)


# --- attention ------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_qk)) V over the last two axes"""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.ndim < 2 or q.shape != k.shape or v.shape[:-1] != k.shape[:-1]:
        raise DimensionError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} are not aligned")
    d_qk = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose_last(k)), 1.0 / math.sqrt(d_qk))
    weights = ad.softmax_rows(scores)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        if num_heads <= 0 or d_model % num_heads != 0:
            raise ConfigurationError(f"d_model {d_model} is not divisible by num_heads {num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_qk = d_model // num_heads
        for h in range(num_heads):
            for name in ("W_Q", "W_K", "W_V"):
                self.register(f"{name}_{h}", glorot_uniform(rng, d_model, self.d_qk))
        self.register("W_O", glorot_uniform(rng, num_heads * self.d_qk, d_model))


def mha_forward(mha: MultiHeadAttention, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != mha.d_model:
        raise DimensionError(f"mha_forward: input {x.shape} does not end in d_model = {mha.d_model}")
    heads = None
    for h in range(mha.num_heads):
        q = ad.matmul(x, getattr(mha, f"W_Q_{h}"))
        k = ad.matmul(x, getattr(mha, f"W_K_{h}"))
        v = ad.matmul(x, getattr(mha, f"W_V_{h}"))
        out = attention(q, k, v)
        heads = out if heads is None else ad.concat_last(heads, out)
    return ad.matmul(heads, mha.W_O)


class EncoderBlock(Module):
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator,
                 ff_multiplier: int = 4, eps: float = 1e-5):
        super().__init__()
        self.d_model = d_model
        self.add_module("attention", MultiHeadAttention(d_model, num_heads, rng))
        self.add_module("ff_in", Dense(d_model, ff_multiplier * d_model, rng))
        self.add_module("ff_out", Dense(ff_multiplier * d_model, d_model, rng))
        self.add_module("norm1", LayerNorm(d_model, eps))
        self.add_module("norm2", LayerNorm(d_model, eps))


def encoder_block_forward(block: EncoderBlock, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != block.d_model:
        raise DimensionError(f"encoder block: input {x.shape} does not end in d_model = {block.d_model}")
    y1 = block.norm1(ad.add(x, mha_forward(block.attention, x)))
    ff = block.ff_out(ad.relu(block.ff_in(y1)))
    return block.norm2(ad.add(y1, ff))
