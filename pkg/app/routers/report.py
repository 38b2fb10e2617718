from pathlib import Path

from ..errors import ContractError
from ..models import MODEL_KINDS
from ..services.dataset import build_dataset
from ..services.evaluator import (aggregate_runs, count_wins, emit_plot_data, emit_report, evaluate_persistence,
                                  published_metrics, read_runs)
from .common import load_data, output_dir, resolve_config, summary


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("report", parents=parents,
                              help="aggregate trained runs into the comparison table and plot data")
    p.add_argument("--published", action="store_true", help="tabulate the published reference means instead")
    p.set_defaults(handler=run)


def _collected(out: Path):
    cells = []
    for path in sorted(out.glob("*/h*/runs.csv")):
        results = read_runs(path)
        if results:
            cells.append(aggregate_runs(results))
    return cells


def run(args) -> int:
    cfg = resolve_config(args, need_data=False)
    out = output_dir(cfg)
    cells = published_metrics() if args.published else _collected(out)
    if not cells:
        raise ContractError(f"no runs.csv files under {out}; run `train` first")
    horizons = sorted({c.horizon for c in cells})

    baseline = []
    if not args.published and (cfg.data or cfg.sessions):
        series = load_data(cfg)
        for h in horizons:
            ds = build_dataset(series, cfg.hyperparams.lookback, h, cfg.fit_scope, shuffle_seed=cfg.train.seed)
            baseline.append(aggregate_runs([evaluate_persistence(ds, "test", cfg.scale)])
                            .model_copy(update={"low_confidence": False}))

    present = {c.model for c in cells}
    models = [m for m in MODEL_KINDS if m in present]
    table = count_wins(cells, models=models, horizons=horizons, references=baseline)
    name = "published_report.txt" if args.published else "report.txt"
    csv_path = emit_report(table, out / name)
    emit_plot_data(table, out)
    wins = ", ".join(f"{m}={table.wins[m]}" for m in table.models)
    summary(f"report: {len(table.models)} models x {len(horizons)} horizons, wins {wins} -> {csv_path}",
            low_confidence=any(c.low_confidence for c in table.cells))
    return 0
