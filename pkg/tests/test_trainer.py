import itertools

import numpy as np
import pytest

from app.errors import ConfigurationError, ContractError
from app.models import DEFAULT_GRID, CorruptionConfig, Hyperparams, TrainConfig
from app.services import trainer
from app.services.autodiff import GradientMap, Tensor
from app.services.dataset import build_dataset
from app.services.forecasters import bdt_reconstruct, build_model
from app.services.layers import dae_loss
from app.services.trainer import (GridScore, OptimizerState, adam_step, clip_gradients, fit_model, grid_points,
                                  grid_search, pretrain_dae, reconstruction_loss, run_repeats, train_forecaster)


def _arrays(model):
    return {k: t.numpy().copy() for k, t in model.parameters().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_adam_zero_gradient_leaves_params():
    params = {"w": Tensor([1.0, -2.0])}
    state = OptimizerState.for_params(params)
    new, state = adam_step(state, params, {"w": np.zeros(2)})
    assert np.array_equal(new["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": Tensor([1.0, 1.0, 1.0])}
    state = OptimizerState.for_params(params, TrainConfig(learning_rate=0.01))
    new, _ = adam_step(state, params, {"w": np.array([3.0, -0.5, 1e-3])})
    assert np.allclose(new["w"].data, [0.99, 1.01, 0.99], atol=1e-6)
    assert np.array_equal(params["w"].data, [1.0, 1.0, 1.0])


def test_adam_is_deterministic(rng):
    params = {"w": Tensor(rng.normal(size=(3, 2)))}
    grads = [{"w": rng.normal(size=(3, 2))} for _ in range(4)]

    def run():
        p, s = params, OptimizerState.for_params(params)
        for g in grads:
            p, s = adam_step(s, p, g)
        return p["w"].data

    assert np.array_equal(run(), run())


def test_adam_rejects_missing_or_misshapen_gradients():
    params = {"w": Tensor([1.0]), "b": Tensor([0.0])}
    state = OptimizerState.for_params(params)
    with pytest.raises(ContractError):
        adam_step(state, params, {"w": np.zeros(1)})
    with pytest.raises(ContractError):
        adam_step(state, params, {"w": np.zeros(1), "b": np.zeros(2)})


def test_clip_gradients():
    grads = GradientMap({"a": np.array([3.0]), "b": np.array([4.0])})
    assert clip_gradients(grads, None) is grads
    assert clip_gradients(grads, 10.0) is grads
    assert clip_gradients(grads, 1.0).global_norm() == pytest.approx(1.0)


def test_pretrain_with_zero_epochs_is_a_no_op(tiny_hp, tiny_ds):
    model = build_model("bdt", tiny_hp)
    before = _arrays(model)
    assert pretrain_dae(model, tiny_ds, TrainConfig(pretrain_epochs=0)) == []
    assert _same(before, _arrays(model))


def test_pretrain_needs_training_windows(tiny_hp, tiny_ds):
    model = build_model("bdt", tiny_hp)
    with pytest.raises(ContractError):
        pretrain_dae(model, tiny_ds.with_split([], [], [0]), TrainConfig(pretrain_epochs=1))


def test_pretrain_touches_only_embedding_and_dae(tiny_hp, tiny_ds, tiny_cfg):
    model = build_model("bdt", tiny_hp)
    before = _arrays(model)
    curve = pretrain_dae(model, tiny_ds, tiny_cfg)
    after = _arrays(model)
    assert len(curve) == tiny_cfg.pretrain_epochs
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.startswith(("dae.", "embedding.")) for k in changed)

    frozen = build_model("bdt", tiny_hp)
    before = _arrays(frozen)
    pretrain_dae(frozen, tiny_ds, tiny_cfg.model_copy(update={"freeze_embedding": True}))
    after = _arrays(frozen)
    assert all(np.array_equal(before[k], after[k]) for k in before if not k.startswith("dae."))


def test_train_with_zero_epochs_is_a_no_op(tiny_hp, tiny_ds):
    model = build_model("lstm", tiny_hp)
    before = _arrays(model)
    result = train_forecaster(model, tiny_ds, TrainConfig(epochs=0))
    assert result.epochs_completed == 0 and result.best_epoch is None
    assert _same(before, _arrays(model))


def test_train_rejects_a_horizon_mismatch(tiny_hp, tiny_ds, tiny_cfg):
    model = build_model("gru", tiny_hp.model_copy(update={"horizon": 12}))
    with pytest.raises(ConfigurationError):
        train_forecaster(model, tiny_ds, tiny_cfg)
    with pytest.raises(ConfigurationError):
        fit_model("gru", tiny_hp.model_copy(update={"lookback": 12}), tiny_ds, tiny_cfg)


def test_training_keeps_the_best_validation_parameters(tiny_hp, tiny_ds):
    model = build_model("cnn", tiny_hp)
    result = train_forecaster(model, tiny_ds, TrainConfig(epochs=4, learning_rate=0.05, seed=1))
    assert result.epochs_completed == 4
    assert result.best_epoch == int(np.argmin(result.val_losses))
    assert trainer._validation_loss(model, tiny_ds) == result.best_val_loss


def test_patience_stops_training(tiny_hp, tiny_ds, monkeypatch):
    losses = itertools.count(1.0)
    monkeypatch.setattr(trainer, "_validation_loss", lambda model, ds: next(losses))
    result = train_forecaster(build_model("rnn", tiny_hp), tiny_ds, TrainConfig(epochs=10, patience=2))
    assert result.stopped_early
    assert result.best_epoch == 0
    assert result.epochs_completed == 3


def test_same_seed_gives_identical_parameters(tiny_hp, tiny_ds, tiny_cfg):
    a, ra = fit_model("bdt", tiny_hp, tiny_ds, tiny_cfg)
    b, rb = fit_model("bdt", tiny_hp, tiny_ds, tiny_cfg)
    assert _same(_arrays(a), _arrays(b))
    assert ra.train_losses == rb.train_losses
    assert len(ra.pretrain_losses) == tiny_cfg.pretrain_epochs
    c, _ = fit_model("bdt", tiny_hp.model_copy(update={"seed": 4}), tiny_ds, tiny_cfg)
    assert not _same(_arrays(a), _arrays(c))


def test_joint_mode_skips_pretraining(tiny_hp, tiny_ds, tiny_cfg):
    _, result = fit_model("bdt", tiny_hp, tiny_ds, tiny_cfg.model_copy(update={"joint_dae": True}))
    assert result.pretrain_losses == []
    assert result.epochs_completed == tiny_cfg.epochs


def test_epochs_default_to_the_hyperparameters(tiny_hp, tiny_ds):
    _, result = fit_model("transformer", tiny_hp.model_copy(update={"num_epochs": 3}), tiny_ds, TrainConfig())
    assert result.epochs_completed == 3


def test_dae_loss_falls_on_a_fixed_batch(tiny_hp, tiny_ds):
    hp = tiny_hp.model_copy(update={"corruption": CorruptionConfig(mask_probability=0.0)})
    model = build_model("bdt", hp)
    names = [k for k in model.parameters() if k.startswith("dae.")]
    updater = trainer._Updater(model, names, TrainConfig(learning_rate=1e-3))
    e = Tensor(tiny_ds.batch(np.arange(16), with_targets=False).embedding)

    def loss_fn():
        x_em, x_hat = bdt_reconstruct(model, e, "eval")
        return dae_loss(x_em, x_hat)

    losses = [updater.step(loss_fn) for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.slow
def test_bdt_memorizes_a_single_window(tiny_hp, tiny_ds):
    hp = tiny_hp.model_copy(update={"corruption": CorruptionConfig(mask_probability=0.0)})
    single = tiny_ds.with_split([0], [], [])
    model = build_model("bdt", hp)
    result = train_forecaster(model, single, TrainConfig(epochs=500, learning_rate=5e-3, batch_size=1))
    losses = np.asarray(result.train_losses)
    assert losses.size == 500
    assert losses[-1] < 1e-3
    # non-increasing from one 20-epoch window to the next, up to round-off
    windows = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(windows) <= 1e-5)


@pytest.mark.slow
def test_dae_pretraining_cuts_reconstruction_loss(tiny_hp, synthetic_series):
    ds = build_dataset(synthetic_series, tiny_hp.lookback, tiny_hp.horizon)
    model = build_model("bdt", tiny_hp)
    before = reconstruction_loss(model, ds, ds.train_idx)
    pretrain_dae(model, ds, TrainConfig(pretrain_epochs=200, learning_rate=1e-2, batch_size=32))
    assert reconstruction_loss(model, ds, ds.train_idx) <= 0.1 * before


def test_default_grid_has_36_points():
    points = grid_points(Hyperparams(), DEFAULT_GRID)
    assert len(points) == 36
    assert len({(p.num_layers, p.num_epochs, p.num_heads, p.model_dim) for p in points}) == 36


def test_grid_points_validation():
    with pytest.raises(ContractError):
        grid_points(Hyperparams(), {})
    with pytest.raises(ContractError):
        grid_points(Hyperparams(), {"num_layers": []})
    with pytest.raises(ConfigurationError):
        grid_points(Hyperparams(), {"depth": [1]})
    with pytest.raises(ConfigurationError):
        grid_points(Hyperparams(model_dim=6), {"num_heads": [4]})


def test_grid_search_matches_brute_force(tiny_hp, tiny_ds, tiny_cfg):
    grid = {"num_layers": [1, 2, 3], "num_heads": [1, 2], "model_dim": [4, 8]}
    rng = np.random.default_rng(9)
    scores = {}

    def evaluate(hp):
        key = (hp.num_layers, hp.num_heads, hp.model_dim)
        return scores.setdefault(key, GridScore(float(rng.integers(0, 4)), float(rng.random()), hp.model_dim))

    found = grid_search(tiny_ds, tiny_hp, tiny_cfg, grid=grid, evaluate=evaluate)
    best = min(scores, key=lambda k: (scores[k].mae, scores[k].rmse, scores[k].parameters))
    assert (found.best.num_layers, found.best.num_heads, found.best.model_dim) == best
    assert len(found.table) == 12
    assert found.table["selected"].sum() == 1
    assert list(found.table.columns) == ["model_dim", "num_heads", "num_layers", "mae", "rmse", "parameters",
                                         "selected"]


def test_grid_search_ties_go_to_the_smaller_model(tiny_hp, tiny_ds, tiny_cfg):
    found = grid_search(tiny_ds, tiny_hp, tiny_cfg, grid={"model_dim": [8, 4]},
                        evaluate=lambda hp: GridScore(0.5, 0.5, hp.model_dim * 10))
    assert found.best.model_dim == 4


def test_grid_search_single_point_trains(tiny_hp, tiny_ds, tiny_cfg):
    found = grid_search(tiny_ds, tiny_hp, tiny_cfg, kind="cnn", grid={"num_epochs": [1]})
    assert found.best.num_epochs == 1
    row = found.table.iloc[0]
    assert row["selected"] and row["mae"] > 0 and row["rmse"] >= row["mae"]


def test_run_repeats_seeds_and_threads(tiny_hp, tiny_ds, tiny_cfg):
    serial = run_repeats("lstm", tiny_hp, tiny_ds, tiny_cfg, runs=2)
    threaded = run_repeats("lstm", tiny_hp, tiny_ds, tiny_cfg, runs=2, jobs=2)
    assert [o.result.seed for o in serial] == [tiny_hp.seed, tiny_hp.seed + 1]
    assert [o.result.mae for o in serial] == [o.result.mae for o in threaded]
    assert serial[0].result.mae != serial[1].result.mae
    with pytest.raises(ContractError):
        run_repeats("lstm", tiny_hp, tiny_ds, tiny_cfg, runs=0)
