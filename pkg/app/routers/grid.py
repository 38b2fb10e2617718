import json

from ..models import DEFAULT_GRID
from ..services.dataset import build_dataset
from ..services.trainer import grid_points, grid_search
from .common import load_data, output_dir, resolve_config, run_dir, summary, write_resolved


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("grid", parents=parents,
                              help="grid-search hyperparameters on the validation split (first horizon)")
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = resolve_config(args)
    grid = cfg.grid or DEFAULT_GRID
    h = cfg.horizons[0]
    base = cfg.hyperparams.model_copy(update={"horizon": h})
    grid_points(base, grid)
    series = load_data(cfg)
    ds = build_dataset(series, base.lookback, h, cfg.fit_scope, shuffle_seed=cfg.train.seed)
    write_resolved(cfg)

    result = grid_search(ds, base, cfg.train, kind=cfg.model, grid=grid, jobs=cfg.jobs)
    target = run_dir(output_dir(cfg), cfg.model, h)
    target.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(target / "grid.csv", index=False, float_format="%.6g", lineterminator="\n")
    (target / "best_hyperparams.json").write_text(
        json.dumps(result.best.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    chosen = ", ".join(f"{k}={getattr(result.best, k)}" for k in sorted(grid))
    summary(f"grid {cfg.model} {h}-h: {len(result.table)} configurations, best {chosen} -> {target / 'grid.csv'}")
    return 0
