"""
Optimization: adaptive-moment updates, DAE reconstruction pretraining,
forecasting training with best-validation retention, hyperparameter grid
search and repeated runs.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import ValidationError
from sklearn.model_selection import ParameterGrid

from ..errors import ConfigurationError, ContractError
from ..models import DEFAULT_GRID, Hyperparams, RunResult, TrainConfig
from . import autodiff as ad
from .autodiff import GradientMap, ParamSet, Tensor
from .dataset import WindowedDataset
from .evaluator import evaluate_model, mae, predict_indices, rmse
from .forecasters import BdtModel, Forecaster, bdt_forward, bdt_reconstruct, build_model
from .layers import dae_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], cfg: Optional[TrainConfig] = None) -> "OptimizerState":
        cfg = cfg or TrainConfig()
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, 0,
                   {k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(state: OptimizerState, params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray]) -> Tuple[ParamSet, OptimizerState]:
    """One bias-corrected adaptive-moment update; inputs are left untouched"""
    missing = set(params) - set(grads)
    if missing:
        raise ContractError(f"no gradient for {sorted(missing)[:5]}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m_prev = m.get(name, np.zeros(p.shape))
        v_prev = v.get(name, np.zeros(p.shape))
        if m_prev.shape != p.shape:
            raise ContractError(f"moment for {name} has shape {m_prev.shape}, parameter has {p.shape}")
        m[name] = b1 * m_prev + (1.0 - b1) * g
        v[name] = b2 * v_prev + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1 ** t)
        v_hat = v[name] / (1.0 - b2 ** t)
        new_params[name] = Tensor(p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return new_params, replace(state, step=t, m=m, v=v)


def clip_gradients(grads: GradientMap, max_norm: Optional[float]) -> GradientMap:
    if max_norm is None:
        return grads
    norm = grads.global_norm()
    if norm > max_norm:
        return grads.scaled(max_norm / norm)
    return grads


@dataclass
class TrainingResult:
    pretrain_losses: List[float] = field(default_factory=list)
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def epochs_completed(self) -> int:
        return len(self.train_losses)

    @property
    def best_val_loss(self) -> Optional[float]:
        return None if self.best_epoch is None else self.val_losses[self.best_epoch]

    def to_dict(self) -> dict:
        return {"pretrain_losses": self.pretrain_losses, "train_losses": self.train_losses,
                "val_losses": self.val_losses, "best_epoch": self.best_epoch,
                "epochs_completed": self.epochs_completed, "stopped_early": self.stopped_early}


def _minibatches(order: np.ndarray, batch_size: int):
    for s in range(0, order.size, batch_size):
        yield order[s:s + batch_size]


class _Updater:
    """Owns the optimizer state for a named subset of a model's parameters"""

    def __init__(self, model: Forecaster, names: Sequence[str], cfg: TrainConfig):
        self.model = model
        self.names = list(names)
        self.cfg = cfg
        self.state = OptimizerState.for_params(self._subset(), cfg)

    def _subset(self) -> ParamSet:
        own = self.model.parameters()
        return {k: own[k] for k in self.names}

    def step(self, loss_fn: Callable[[], Tensor]) -> float:
        params = self._subset()
        with ad.ComputeTape() as tape:
            loss = loss_fn()
        grads = clip_gradients(ad.backward(tape, loss, params), self.cfg.clip_norm)
        updated, self.state = adam_step(self.state, params, grads)
        self.model.load_state(updated)
        return loss.item()


def _noise_rng(model: Forecaster, cfg: TrainConfig) -> np.random.Generator:
    seed = model.hp.corruption.seed
    return np.random.default_rng([cfg.seed, 1] if seed is None else seed)


def reconstruction_loss(model: BdtModel, ds: WindowedDataset, indices: Sequence[int]) -> float:
    """Eval-mode (uncorrupted) reconstruction loss averaged over embedding vectors"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("no windows to reconstruct")
    total, vectors = 0.0, 0
    with ad.suspended():
        for chunk in _minibatches(idx, 256):
            x_em, x_hat = bdt_reconstruct(model, Tensor(ds.batch(chunk, with_targets=False).embedding), "eval")
            n = chunk.size * ds.lookback
            total += dae_loss(x_em, x_hat).item() * n
            vectors += n
    return total / vectors


def pretrain_dae(model: BdtModel, ds: WindowedDataset, cfg: TrainConfig) -> List[float]:
    """
    Train the DAE to rebuild Bi-LSTM embeddings from corrupted copies.

    The embedding layer is updated alongside unless `freeze_embedding` is
    set. Returns the mean reconstruction loss of every epoch.
    """
    if cfg.pretrain_epochs == 0:
        return []
    if ds.train_order.size == 0:
        raise ContractError("pretraining needs a non-empty training split")
    prefixes = ("dae.",) if cfg.freeze_embedding else ("dae.", "embedding.")
    names = [k for k in model.parameters() if k.startswith(prefixes)]
    updater = _Updater(model, names, cfg)
    order_rng = np.random.default_rng(cfg.seed)
    noise = _noise_rng(model, cfg)
    curve = []
    for epoch in range(cfg.pretrain_epochs):
        order = order_rng.permutation(ds.train_order)
        total = 0.0
        for chunk in _minibatches(order, cfg.batch_size):
            e = Tensor(ds.batch(chunk, with_targets=False).embedding)

            def loss_fn(e=e):
                x_em, x_hat = bdt_reconstruct(model, e, "train", noise)
                return dae_loss(x_em, x_hat)

            total += updater.step(loss_fn) * chunk.size
        curve.append(total / order.size)
        logger.debug("pretrain epoch %d: reconstruction %.6g", epoch + 1, curve[-1])
    logger.info("DAE pretraining: %d epochs, reconstruction %.6g -> %.6g",
                len(curve), curve[0], curve[-1])
    return curve


def _validation_loss(model: Forecaster, ds: WindowedDataset) -> Optional[float]:
    if ds.val_idx.size == 0:
        return None
    pred = predict_indices(model, ds, ds.val_idx)
    return float(np.mean((pred - ds.batch(ds.val_idx).targets) ** 2))


def train_forecaster(model: Forecaster, ds: WindowedDataset, cfg: TrainConfig) -> TrainingResult:
    """
    Minibatch MSE training on the shuffled training windows. Validation loss
    is computed each epoch in eval mode and the best-validation parameters are
    restored at the end; without a validation split the training loss decides.
    """
    if model.horizon != ds.horizon:
        raise ConfigurationError(f"model forecasts {model.horizon} h but the dataset targets {ds.horizon} h")
    if model.hp.lookback != ds.lookback:
        raise ConfigurationError(f"model reads {model.hp.lookback} h windows but the dataset has {ds.lookback} h")
    epochs = model.hp.num_epochs if cfg.epochs is None else cfg.epochs
    result = TrainingResult()
    if epochs == 0:
        return result
    if ds.train_order.size == 0:
        raise ContractError("training needs a non-empty training split")

    joint = cfg.joint_dae and isinstance(model, BdtModel)
    updater = _Updater(model, list(model.parameters()), cfg)
    order_rng = np.random.default_rng(cfg.seed)
    noise = _noise_rng(model, cfg)
    best_score, best_params, since_best = np.inf, model.parameters(), 0
    started = time.perf_counter()

    for epoch in range(epochs):
        order = order_rng.permutation(ds.train_order)
        total = 0.0
        for chunk in _minibatches(order, cfg.batch_size):
            batch = ds.batch(chunk)

            def loss_fn(batch=batch):
                if joint:
                    out, x_em, x_hat = bdt_forward(model, Tensor(batch.embedding), "train", noise,
                                                   with_reconstruction=True)
                    return ad.add(ad.mse(out, batch.targets),
                                  ad.scale(dae_loss(x_em, x_hat), cfg.joint_dae_weight))
                return ad.mse(model.forward(batch, "train", noise), batch.targets)

            total += updater.step(loss_fn) * chunk.size
        train_loss = total / order.size
        val_loss = _validation_loss(model, ds)
        result.train_losses.append(train_loss)
        result.val_losses.append(train_loss if val_loss is None else val_loss)
        logger.debug("epoch %d: train %.6g validation %s", epoch + 1, train_loss, val_loss)

        score = result.val_losses[-1]
        if score < best_score:
            best_score, best_params, since_best = score, model.parameters(), 0
            result.best_epoch = epoch
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                result.stopped_early = True
                logger.info("early stop after epoch %d (best epoch %d)", epoch + 1, result.best_epoch + 1)
                break

    model.load_state(best_params)
    result.seconds = time.perf_counter() - started
    logger.info("%s trained %d epochs, best validation %.6g at epoch %s",
                model.kind, result.epochs_completed, best_score,
                None if result.best_epoch is None else result.best_epoch + 1)
    return result


def fit_model(kind: str, hp: Hyperparams, ds: WindowedDataset,
              cfg: TrainConfig) -> Tuple[Forecaster, TrainingResult]:
    """Build, pretrain (BDT, two-phase mode) and train one model"""
    if hp.horizon != ds.horizon or hp.lookback != ds.lookback:
        raise ConfigurationError(
            f"hyperparameters ask for L={hp.lookback}, H={hp.horizon} but the dataset has "
            f"L={ds.lookback}, H={ds.horizon}")
    started = time.perf_counter()
    model = build_model(kind, hp, np.random.default_rng(hp.seed))
    pretrain = []
    if isinstance(model, BdtModel) and not cfg.joint_dae:
        pretrain = pretrain_dae(model, ds, cfg)
    result = train_forecaster(model, ds, cfg)
    result.pretrain_losses = pretrain
    result.seconds = time.perf_counter() - started
    return model, result


# --- grid search ----------------------------------------------------------------

class GridScore(NamedTuple):
    mae: float
    rmse: float
    parameters: int


@dataclass
class GridSearchResult:
    best: Hyperparams
    table: pd.DataFrame


def validation_score(kind: str, hp: Hyperparams, ds: WindowedDataset, cfg: TrainConfig) -> GridScore:
    model, _ = fit_model(kind, hp, ds, cfg)
    split = ds.val_idx if ds.val_idx.size else ds.train_idx
    pred = predict_indices(model, ds, split)
    actual = ds.batch(split).targets
    return GridScore(mae(pred, actual), rmse(pred, actual), model.parameter_count())


def grid_points(base_hp: Hyperparams, grid: Mapping[str, Sequence]) -> List[Hyperparams]:
    if not grid or any(len(values) == 0 for values in grid.values()):
        raise ContractError("hyperparameter grid is empty")
    unknown = set(grid) - set(Hyperparams.model_fields)
    if unknown:
        raise ConfigurationError(f"grid names unknown hyperparameters: {sorted(unknown)}")
    base = base_hp.model_dump()
    points = []
    for point in ParameterGrid({k: list(v) for k, v in grid.items()}):
        try:
            points.append(Hyperparams(**{**base, **point}))
        except ValidationError as e:
            raise ConfigurationError(f"grid point {point} is invalid: {e.errors()[0]['msg']}") from e
    return points


def grid_search(ds: WindowedDataset, base_hp: Hyperparams, base_cfg: TrainConfig, kind: str = "bdt",
                grid: Mapping[str, Sequence] = DEFAULT_GRID,
                evaluate: Optional[Callable[[Hyperparams], GridScore]] = None,
                jobs: int = 1) -> GridSearchResult:
    """
    Score every grid point and pick the lowest validation MAE; ties fall to
    lower validation RMSE, then to fewer parameters, then to grid order.
    """
    points = grid_points(base_hp, grid)
    if evaluate is None:
        def evaluate(hp: Hyperparams) -> GridScore:
            return validation_score(kind, hp, ds, base_cfg)

    logger.info("grid search over %d configurations (%s, jobs=%d)", len(points), kind, jobs)
    scores = Parallel(n_jobs=jobs, prefer="threads")(delayed(evaluate)(hp) for hp in points)
    scores = [GridScore(*s) for s in scores]

    keys = sorted(grid)
    rows = [{**{k: getattr(hp, k) for k in keys}, **s._asdict()} for hp, s in zip(points, scores)]
    table = pd.DataFrame(rows, columns=keys + ["mae", "rmse", "parameters"])
    best_at = min(range(len(points)), key=lambda i: (scores[i].mae, scores[i].rmse, scores[i].parameters, i))
    table["selected"] = [i == best_at for i in range(len(points))]
    return GridSearchResult(points[best_at], table)


# --- repeated runs ----------------------------------------------------------------

@dataclass
class RunOutcome:
    result: RunResult
    model: Forecaster
    training: TrainingResult


def run_repeats(kind: str, hp: Hyperparams, ds: WindowedDataset, cfg: TrainConfig, runs: int,
                scale: str = "normalized", jobs: int = 1) -> List[RunOutcome]:
    """Independent trainings with seeds seed+0 .. seed+runs-1, each scored on the test split"""
    if runs < 1:
        raise ContractError(f"need at least one run, got {runs}")

    def one(k: int) -> RunOutcome:
        seed = hp.seed + k
        model, training = fit_model(kind, hp.model_copy(update={"seed": seed}), ds,
                                    cfg.model_copy(update={"seed": cfg.seed + k}))
        result = evaluate_model(model, ds, "test", scale, seed=seed, seconds=training.seconds)
        return RunOutcome(result, model, training)

    return Parallel(n_jobs=jobs, prefer="threads")(delayed(one)(k) for k in range(runs))
