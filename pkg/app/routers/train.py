from ..services.checkpoint import save_checkpoint
from ..services.dataset import build_dataset
from ..services.evaluator import aggregate_runs, write_runs
from ..services.trainer import run_repeats
from .common import checkpoint_path, load_data, output_dir, resolve_config, run_dir, summary, write_resolved


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("train", parents=parents,
                              help="train a model per horizon over repeated seeds and score the test split")
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = resolve_config(args)
    series = load_data(cfg)
    hp = cfg.hyperparams
    datasets = {h: build_dataset(series, hp.lookback, h, cfg.fit_scope, shuffle_seed=cfg.train.seed)
                for h in cfg.horizons}
    write_resolved(cfg)
    out = output_dir(cfg)

    for h, ds in datasets.items():
        outcomes = run_repeats(cfg.model, hp.model_copy(update={"horizon": h}), ds, cfg.train,
                               cfg.runs, scale=cfg.scale, jobs=cfg.jobs)
        for k, o in enumerate(outcomes):
            save_checkpoint(o.model, checkpoint_path(out, cfg.model, h, k), {
                "normalizer": ds.normalizer.to_dict(),
                "train": cfg.train.model_dump(mode="json"),
                "training": o.training.to_dict(),
                "run": k,
            })
        results = [o.result for o in outcomes]
        write_runs(results, run_dir(out, cfg.model, h) / "runs.csv")
        m = aggregate_runs(results)
        summary(f"{cfg.model} {h}-h: MAE {m.mae_mean:.4f}±{m.mae_std:.4f}, RMSE {m.rmse_mean:.4f}±{m.rmse_std:.4f} "
                f"({m.runs} run{'s' if m.runs > 1 else ''}, {cfg.scale}) -> {run_dir(out, cfg.model, h)}",
                low_confidence=m.low_confidence)
    return 0
