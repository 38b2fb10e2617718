"""
Forecast scoring: RMSE/MAE per run, mean and sample deviation across runs,
per-horizon win counts, and the report and plot-data files.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..errors import ConfigurationError, ContractError, FormatError
from ..models import ComparisonTable, HorizonMetrics, RunResult
from .dataset import WindowedDataset, persistence_forecast
from .forecasters import Forecaster

logger = logging.getLogger(__name__)

METRICS = ("RMSE", "MAE")

# Published mean RMSE/MAE per horizon for the six models (normalized scale)
PUBLISHED_TABLE: Dict[str, Dict[int, Dict[str, float]]] = {
    "bdt": {24: {"RMSE": 0.145, "MAE": 0.085}, 48: {"RMSE": 0.092, "MAE": 0.066},
            72: {"RMSE": 0.100, "MAE": 0.069}, 96: {"RMSE": 0.09, "MAE": 0.06},
            120: {"RMSE": 0.120, "MAE": 0.089}},
    "transformer": {24: {"RMSE": 0.083, "MAE": 0.06}, 48: {"RMSE": 0.122, "MAE": 0.103},
                    72: {"RMSE": 0.122, "MAE": 0.103}, 96: {"RMSE": 0.130, "MAE": 0.110},
                    120: {"RMSE": 0.165, "MAE": 0.139}},
    "rnn": {24: {"RMSE": 0.552, "MAE": 0.185}, 48: {"RMSE": 0.57, "MAE": 0.211},
            72: {"RMSE": 0.543, "MAE": 0.289}, 96: {"RMSE": 0.624, "MAE": 0.33},
            120: {"RMSE": 0.609, "MAE": 0.342}},
    "lstm": {24: {"RMSE": 0.13, "MAE": 0.084}, 48: {"RMSE": 0.241, "MAE": 0.159},
             72: {"RMSE": 0.314, "MAE": 0.209}, 96: {"RMSE": 0.357, "MAE": 0.238},
             120: {"RMSE": 0.367, "MAE": 0.246}},
    "gru": {24: {"RMSE": 0.102, "MAE": 0.098}, 48: {"RMSE": 0.235, "MAE": 0.154},
            72: {"RMSE": 0.256, "MAE": 0.178}, 96: {"RMSE": 0.231, "MAE": 0.188},
            120: {"RMSE": 0.23, "MAE": 0.156}},
    "cnn": {24: {"RMSE": 0.512, "MAE": 0.39}, 48: {"RMSE": 0.518, "MAE": 0.387},
            72: {"RMSE": 0.548, "MAE": 0.343}, 96: {"RMSE": 0.521, "MAE": 0.384},
            120: {"RMSE": 0.609, "MAE": 0.376}},
}


def published_metrics() -> List[HorizonMetrics]:
    """The published means as single-run HorizonMetrics (deviations not carried)"""
    return [HorizonMetrics(model=model, horizon=h, rmse_mean=m["RMSE"], rmse_std=0.0,
                           mae_mean=m["MAE"], mae_std=0.0, runs=1)
            for model, by_h in PUBLISHED_TABLE.items() for h, m in by_h.items()]


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise ContractError(f"prediction has {pred.size} values but actual has {actual.size}")
    if pred.size == 0:
        raise ContractError("cannot score an empty forecast")
    return pred, actual


def rmse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def mae(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.abs(pred - actual)))


def predict_indices(model: Forecaster, ds: WindowedDataset, indices: Sequence[int],
                    batch_size: int = 256) -> np.ndarray:
    """Eval-mode forecasts [n x H] for the given windows, on the normalized scale"""
    idx = np.asarray(indices, dtype=np.int64)
    chunks = [model.predict(ds.batch(idx[s:s + batch_size], with_targets=False))
              for s in range(0, idx.size, batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, ds.horizon))


def _score(name: str, horizon: int, seed: int, pred: np.ndarray, actual: np.ndarray,
           ds: WindowedDataset, scale: str, seconds: float) -> RunResult:
    if scale == "kwh":
        pred, actual = ds.normalizer.denormalize(pred), ds.normalizer.denormalize(actual)
    elif scale != "normalized":
        raise ConfigurationError(f"unknown metric scale {scale!r}")
    return RunResult(model=name, horizon=horizon, seed=seed, rmse=rmse(pred, actual),
                     mae=mae(pred, actual), seconds=seconds, scale=scale)


def evaluate_model(model: Forecaster, ds: WindowedDataset, split: str = "test",
                   scale: str = "normalized", seed: Optional[int] = None,
                   seconds: float = 0.0) -> RunResult:
    """Score eval-mode forecasts over every window of a split"""
    if model.horizon != ds.horizon:
        raise ConfigurationError(f"model forecasts {model.horizon} h but the dataset targets {ds.horizon} h")
    if model.hp.lookback != ds.lookback:
        raise ConfigurationError(f"model reads {model.hp.lookback} h windows but the dataset has {ds.lookback} h")
    idx = ds.split(split)
    if idx.size == 0:
        raise ContractError(f"{split} split is empty")
    pred = predict_indices(model, ds, idx)
    actual = ds.batch(idx).targets
    return _score(model.kind, ds.horizon, model.hp.seed if seed is None else seed,
                  pred, actual, ds, scale, seconds)


def evaluate_persistence(ds: WindowedDataset, split: str = "test", scale: str = "normalized") -> RunResult:
    idx = ds.split(split)
    if idx.size == 0:
        raise ContractError(f"{split} split is empty")
    return _score("persistence", ds.horizon, 0, persistence_forecast(ds, idx),
                  ds.batch(idx).targets, ds, scale, 0.0)


def aggregate_runs(results: Sequence[RunResult]) -> HorizonMetrics:
    """Mean and sample (n-1) deviation; a single run reports zero deviation, flagged"""
    if not results:
        raise ContractError("no runs to aggregate")
    keys = {(r.model, r.horizon) for r in results}
    if len(keys) > 1:
        raise ContractError(f"runs mix model/horizon pairs: {sorted(keys)}")
    model, horizon = keys.pop()
    rmses = np.array([r.rmse for r in results])
    maes = np.array([r.mae for r in results])
    n = len(results)
    if n == 1:
        return HorizonMetrics(model=model, horizon=horizon, rmse_mean=float(rmses[0]), rmse_std=0.0,
                              mae_mean=float(maes[0]), mae_std=0.0, runs=1, low_confidence=True)
    return HorizonMetrics(model=model, horizon=horizon,
                          rmse_mean=float(rmses.mean()), rmse_std=float(rmses.std(ddof=1)),
                          mae_mean=float(maes.mean()), mae_std=float(maes.std(ddof=1)), runs=n)


def count_wins(metrics: Iterable[HorizonMetrics], models: Optional[Sequence[str]] = None,
               horizons: Optional[Sequence[int]] = None,
               references: Iterable[HorizonMetrics] = ()) -> ComparisonTable:
    """
    Per horizon the lowest MAE mean wins; equal MAE falls to the lower RMSE mean.
    `references` (e.g. the persistence baseline) are carried into the table
    for display but take no part in the ranking.
    """
    cells = list(metrics)
    if not cells:
        raise ContractError("comparison needs at least one cell")
    if models is None:
        models = list(dict.fromkeys(c.model for c in cells))
    horizons = sorted(set(horizons if horizons is not None else (c.horizon for c in cells)))
    lookup = {(c.model, c.horizon): c for c in cells}
    winners: Dict[int, str] = {}
    wins = {m: 0 for m in models}
    for h in horizons:
        row = []
        for m in models:
            cell = lookup.get((m, h))
            if cell is None:
                raise ContractError(f"missing cell: model {m!r} at horizon {h} h")
            row.append(cell)
        best = min(row, key=lambda c: (c.mae_mean, c.rmse_mean))
        winners[h] = best.model
        wins[best.model] += 1
    kept = [lookup[(m, h)] for h in horizons for m in models]
    extra = [c for c in references if c.horizon in winners]
    clash = {c.model for c in extra} & set(models)
    if clash:
        raise ContractError(f"reference rows reuse ranked model names: {sorted(clash)}")
    return ComparisonTable(horizons=horizons, models=list(models), cells=kept, winners=winners, wins=wins,
                           references=extra)


def relative_improvement(table: ComparisonTable, model: str, baseline: str) -> Dict[int, float]:
    """1 - MAE(model) / MAE(baseline) per horizon, from the means"""
    out = {}
    for h in table.horizons:
        base = table.cell(baseline, h).mae_mean
        if base == 0:
            raise ContractError(f"{baseline} has zero MAE at {h} h; improvement is undefined")
        out[h] = 1.0 - table.cell(model, h).mae_mean / base
    return out


def _cell_text(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def report_frame(table: ComparisonTable) -> pd.DataFrame:
    rows = []
    for c in table.cells + table.references:
        rows.append({"horizon": c.horizon, "metric": "RMSE", "model": c.model, "mean": c.rmse_mean, "std": c.rmse_std})
        rows.append({"horizon": c.horizon, "metric": "MAE", "model": c.model, "mean": c.mae_mean, "std": c.mae_std})
    frame = pd.DataFrame(rows, columns=["horizon", "metric", "model", "mean", "std"])
    return frame.sort_values(["horizon", "metric", "model"], kind="mergesort").reset_index(drop=True)


def render_report(table: ComparisonTable) -> str:
    columns = table.models + table.reference_models
    width = max(13, *(len(m) + 2 for m in columns))
    lines = ["Horizon  Metric " + "".join(m.rjust(width) for m in columns)]
    for h in table.horizons:
        for metric in METRICS:
            cells = []
            for m in columns:
                try:
                    c = table.cell(m, h)
                except KeyError:
                    cells.append("-".rjust(width))
                    continue
                mean, std = (c.rmse_mean, c.rmse_std) if metric == "RMSE" else (c.mae_mean, c.mae_std)
                cells.append(_cell_text(mean, std).rjust(width))
            label = f"{h}-h" if metric == "RMSE" else ""
            lines.append(f"{label:<8} {metric:<6} " + "".join(cells))
    lines.append(f"{'Total Win':<15} " + "".join(str(table.wins[m]).rjust(width) for m in table.models)
                 + "".join("-".rjust(width) for _ in table.reference_models))

    lead = table.models[0]
    for other in table.models[1:]:
        try:
            gains = relative_improvement(table, lead, other)
        except ContractError:
            continue
        parts = ", ".join(f"{h}-h {100.0 * g:.1f}%" for h, g in gains.items())
        lines.append(f"MAE reduction of {lead} vs {other}: {parts}")
    if table.reference_models:
        lines.append(f"not ranked: {', '.join(table.reference_models)}")
    if any(c.low_confidence for c in table.cells):
        lines.append("note: cells from a single run report zero deviation (low confidence)")
    return "\n".join(lines) + "\n"


def emit_report(table: ComparisonTable, path: Union[str, Path]) -> Path:
    """Write the text table to `path` and the CSV next to it; returns the CSV path"""
    if not table.cells:
        raise ContractError("cannot report an empty table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report(table))
    csv_path = path.with_suffix(".csv")
    report_frame(table).to_csv(csv_path, index=False, float_format="%.6g", lineterminator="\n")
    logger.info("report written to %s and %s", path, csv_path)
    return csv_path


def emit_plot_data(table: ComparisonTable, directory: Union[str, Path]) -> List[Path]:
    """plot_rmse.csv and plot_mae.csv with columns horizon,model,mean,std"""
    if not table.cells:
        raise ContractError("cannot emit plot data for an empty table")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame = report_frame(table)
    written = []
    for metric in METRICS:
        part = frame[frame["metric"] == metric].drop(columns="metric")
        out = directory / f"plot_{metric.lower()}.csv"
        part.to_csv(out, index=False, float_format="%.6g", lineterminator="\n")
        written.append(out)
    return written


RUN_COLUMNS = ["model", "horizon", "seed", "rmse", "mae", "seconds", "scale"]


def write_runs(results: Sequence[RunResult], path: Union[str, Path]) -> None:
    frame = pd.DataFrame([r.model_dump() for r in results], columns=RUN_COLUMNS)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_runs(path: Union[str, Path]) -> List[RunResult]:
    frame = pd.read_csv(path)
    if list(frame.columns) != RUN_COLUMNS:
        raise FormatError(f"{path}: expected header {','.join(RUN_COLUMNS)}")
    return [RunResult(**row) for row in frame.to_dict(orient="records")]
