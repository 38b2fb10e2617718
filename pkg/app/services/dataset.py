"""
EV charging data pipeline: session ingestion, hourly aggregation, min-max
normalization, sliding windows, the chronological 80/10/10 split and the
hour/weekday/month load profiles.
"""
import dataclasses
import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..errors import ConfigurationError, ContractError, DataIntegrityError, DegenerateScaleError, FormatError
from ..models import IngestReport, RowError, SessionRecord

logger = logging.getLogger(__name__)

SESSION_COLUMNS = ["session_id", "start_time", "end_time", "energy_kwh"]
HOURLY_COLUMNS = ["timestamp", "load_kwh"]
HOUR = pd.Timedelta(hours=1)
_OFFSET_RE = re.compile(r"(Z|[+-]\d{2}:?\d{2})$")
_DECIMAL_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")

Source = Union[str, Path, TextIO]


_EPOCH = pd.Timestamp(0, tz="UTC")


def _epoch_hours(stamps: pd.DatetimeIndex) -> np.ndarray:
    return np.asarray((pd.DatetimeIndex(stamps) - _EPOCH) / HOUR, dtype=np.float64)


def _format_ts(ts: pd.Timestamp) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


# --- hourly series ---------------------------------------------------------

@dataclass(frozen=True)
class HourlySeries:
    """Gap-free hourly load (kWh) starting at an hour boundary, UTC"""
    start: pd.Timestamp
    values: np.ndarray

    def __post_init__(self):
        start = pd.Timestamp(self.start)
        start = start.tz_localize("UTC") if start.tzinfo is None else start.tz_convert("UTC")
        start = start.as_unit("ns")
        if start.value % HOUR.value:
            raise DataIntegrityError(f"series start {start} is not on an hour boundary")
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise DataIntegrityError("hourly values must be a finite 1-D sequence")
        if np.any(values < 0):
            raise DataIntegrityError(f"negative load at hour index {int(np.argmax(values < 0))}")
        values.setflags(write=False)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @cached_property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=len(self.values), freq=HOUR)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "timestamp": [_format_ts(t) for t in self.timestamps],
            "load_kwh": self.values,
        })

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")

    @classmethod
    def read_csv(cls, source: Source) -> "HourlySeries":
        try:
            df = pd.read_csv(source, dtype=str, keep_default_na=False)
        except pd.errors.EmptyDataError as e:
            raise FormatError("hourly CSV is empty") from e
        if list(df.columns) != HOURLY_COLUMNS:
            raise FormatError(f"hourly CSV header must be {','.join(HOURLY_COLUMNS)}, got {','.join(df.columns)}")
        if df.empty:
            raise DataIntegrityError("hourly CSV has no rows")
        stamps = pd.DatetimeIndex([_parse_timestamp(s) for s in df["timestamp"]])
        check_hourly(stamps)
        try:
            values = df["load_kwh"].astype(float).to_numpy()
        except ValueError as e:
            raise DataIntegrityError(f"non-numeric load value: {e}") from e
        return cls(stamps[0], values)


def check_hourly(stamps: Sequence) -> None:
    """Consecutive timestamps must be exactly one hour apart"""
    stamps = pd.DatetimeIndex(stamps)
    if len(stamps) < 2:
        return
    steps = stamps[1:] - stamps[:-1]
    bad = np.nonzero(np.asarray(steps != HOUR))[0]
    if bad.size:
        i = int(bad[0])
        raise DataIntegrityError(
            f"timestamps are not hourly and gap-free: {stamps[i]} is followed by {stamps[i + 1]}")


def _parse_timestamp(text: str) -> pd.Timestamp:
    text = text.strip()
    if not _OFFSET_RE.search(text):
        raise ValueError(f"timestamp {text!r} has no explicit UTC offset")
    ts = pd.Timestamp(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no explicit UTC offset")
    return ts.tz_convert("UTC")


# --- sessions ----------------------------------------------------------------

_OVERLONG = "\x00overlong"


def _mark_overlong(fields: List[str]) -> List[str]:
    # keeps the row in place so positions still map to physical lines
    return [_OVERLONG, str(len(fields)), "", ""]


def ingest_sessions(source: Source) -> Tuple[List[SessionRecord], IngestReport]:
    """
    Parse a sessions CSV. Malformed rows (wrong field count, bad values) are
    skipped and reported with their physical 1-based line number, the header
    being line 1. Blank lines are skipped but still counted.
    """
    try:
        df = pd.read_csv(source, header=None, names=SESSION_COLUMNS, dtype=object, keep_default_na=False,
                         skipinitialspace=True, skip_blank_lines=False, engine="python",
                         on_bad_lines=_mark_overlong)
    except pd.errors.EmptyDataError as e:
        raise FormatError("sessions CSV is empty; expected a header row") from e
    except pd.errors.ParserError as e:
        raise FormatError(f"sessions CSV is malformed: {e}") from e
    if df.empty:
        raise FormatError("sessions CSV is empty; expected a header row")
    header = [v for v in df.iloc[0].tolist() if isinstance(v, str)]
    if header != SESSION_COLUMNS:
        raise FormatError(f"sessions CSV header must be {','.join(SESSION_COLUMNS)}, got {','.join(header)}")

    records: List[SessionRecord] = []
    rejected: List[RowError] = []
    rows = 0
    for pos, row in enumerate(df.iloc[1:].itertuples(index=False), start=2):
        values = list(row)
        if all(not isinstance(v, str) or not v.strip() for v in values):
            continue
        rows += 1
        if values[0] == _OVERLONG:
            rejected.append(RowError(line=pos, reason=f"expected {len(SESSION_COLUMNS)} fields, got {values[1]}"))
            continue
        if not all(isinstance(v, str) for v in values):
            got = sum(isinstance(v, str) for v in values)
            rejected.append(RowError(line=pos, reason=f"expected {len(SESSION_COLUMNS)} fields, got {got}"))
            continue
        try:
            energy = row.energy_kwh.strip()
            if not _DECIMAL_RE.match(energy):
                raise ValueError(f"energy {energy!r} is not a plain decimal")
            records.append(SessionRecord(
                session_id=row.session_id,
                start_time=_parse_timestamp(row.start_time),
                end_time=_parse_timestamp(row.end_time),
                energy_kwh=float(energy),
            ))
        except ValidationError as e:
            rejected.append(RowError(line=pos, reason="; ".join(err["msg"] for err in e.errors())))
        except ValueError as e:
            rejected.append(RowError(line=pos, reason=str(e)))

    if rejected:
        logger.warning("ingest: rejected %d of %d session rows", len(rejected), rows)
    return records, IngestReport(accepted=len(records), rejected=rejected)


def aggregate_to_hourly(sessions: Sequence[SessionRecord]) -> HourlySeries:
    """Spread each session's energy uniformly over its duration, prorated by hour overlap"""
    if not sessions:
        raise ContractError("cannot aggregate an empty session list")
    hour = 3600.0
    starts = np.array([s.start_time.timestamp() for s in sessions])
    ends = np.array([s.end_time.timestamp() for s in sessions])
    first = math.floor(starts.min() / hour)
    last = math.ceil(ends.max() / hour) - 1
    values = np.zeros(last - first + 1)

    for s, e, rec in zip(starts, ends, sessions):
        duration = e - s
        for k in range(math.floor(s / hour), math.ceil(e / hour)):
            overlap = min(e, (k + 1) * hour) - max(s, k * hour)
            if overlap > 0:
                values[k - first] += rec.energy_kwh * overlap / duration

    start = pd.Timestamp(first * 3600, unit="s", tz="UTC")
    logger.info("aggregated %d sessions into %d hours", len(sessions), len(values))
    return HourlySeries(start, values)


# --- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Min-max scale for load values plus the epoch-hour range for norm(t)"""
    x_min: float
    x_max: float
    fit_scope: Literal["all_data", "train_only"] = "all_data"
    t_min: float = 0.0
    t_max: float = 1.0

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_min) / (self.x_max - self.x_min)

    def denormalize(self, x_norm):
        return np.asarray(x_norm, dtype=np.float64) * (self.x_max - self.x_min) + self.x_min

    def normalize_time(self, epoch_hours):
        return (np.asarray(epoch_hours, dtype=np.float64) - self.t_min) / (self.t_max - self.t_min)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**d)


def fit_normalizer(series: HourlySeries, scope: str = "all_data",
                   train_end: Optional[int] = None) -> Normalizer:
    """
    Fit x_min/x_max on the whole series ("all_data") or on its first
    `train_end` hours ("train_only"). The time range always spans the series.
    """
    if scope == "all_data":
        fitted = series.values
    elif scope == "train_only":
        if train_end is None:
            raise ContractError("train_only scope needs the end of the training span")
        fitted = series.values[:train_end]
    else:
        raise ContractError(f"unknown fit scope {scope!r}")
    if fitted.size == 0:
        raise ContractError("cannot fit a normalizer on an empty span")
    x_min, x_max = float(fitted.min()), float(fitted.max())
    if x_max <= x_min:
        raise DegenerateScaleError(f"constant series (min = max = {x_min}) cannot be min-max scaled")
    hours = _epoch_hours(series.timestamps)
    t_min, t_max = float(hours[0]), float(hours[-1])
    if t_max <= t_min:
        t_max = t_min + 1.0
    return Normalizer(x_min, x_max, scope, t_min, t_max)


def time_value_features(stamps: pd.DatetimeIndex, normalizer: Normalizer) -> np.ndarray:
    """[hour/23, weekday/6, norm(t)] per timestamp; Monday is weekday 0"""
    stamps = pd.DatetimeIndex(stamps).tz_convert("UTC")
    return np.column_stack([
        np.asarray(stamps.hour, dtype=np.float64) / 23.0,
        np.asarray(stamps.dayofweek, dtype=np.float64) / 6.0,
        normalizer.normalize_time(_epoch_hours(stamps)),
    ])


# --- windows and splits ----------------------------------------------------------

@dataclass(frozen=True)
class WindowBatch:
    embedding: np.ndarray               # [B x L x 4]: load, hour, weekday, norm(t)
    values: np.ndarray                  # [B x L x 1]: load only
    targets: Optional[np.ndarray]       # [B x H]

    def __len__(self) -> int:
        return self.embedding.shape[0]


def _no_windows() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class WindowedDataset:
    series: HourlySeries
    lookback: int
    horizon: int
    normalizer: Optional[Normalizer] = None
    train_idx: np.ndarray = field(default_factory=_no_windows)
    val_idx: np.ndarray = field(default_factory=_no_windows)
    test_idx: np.ndarray = field(default_factory=_no_windows)
    train_order: np.ndarray = field(default_factory=_no_windows)

    @property
    def window_count(self) -> int:
        return len(self.series) - self.lookback - self.horizon + 1

    @cached_property
    def values(self) -> np.ndarray:
        """Series values on the model scale (normalized once a normalizer is attached)"""
        if self.normalizer is None:
            return self.series.values
        return self.normalizer.normalize(self.series.values)

    @cached_property
    def _features(self) -> np.ndarray:
        if self.normalizer is None:
            raise ContractError("dataset has no normalizer; call build_dataset or with_normalizer first")
        return np.column_stack([self.values, time_value_features(self.series.timestamps, self.normalizer)])

    def window_inputs(self, i: int) -> np.ndarray:
        return self.values[i:i + self.lookback]

    def window_targets(self, i: int) -> np.ndarray:
        return self.values[i + self.lookback:i + self.lookback + self.horizon]

    def window_timestamps(self, i: int) -> pd.DatetimeIndex:
        return self.series.timestamps[i:i + self.lookback]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "validation": self.val_idx, "test": self.test_idx}[name]

    @property
    def train_span_end(self) -> int:
        """Series index one past the last hour touched by a training window"""
        if self.train_idx.size == 0:
            raise ContractError("dataset has not been split")
        return int(self.train_idx.max()) + self.lookback + self.horizon

    def batch(self, indices: Sequence[int], with_targets: bool = True) -> WindowBatch:
        idx = np.asarray(indices, dtype=np.int64)
        feats = self._features
        rows = idx[:, None] + np.arange(self.lookback)[None, :]
        embedding = feats[rows]
        targets = None
        if with_targets:
            cols = idx[:, None] + self.lookback + np.arange(self.horizon)[None, :]
            targets = self.values[cols]
        return WindowBatch(embedding, embedding[..., :1].copy(), targets)

    def with_split(self, train: Sequence[int], validation: Sequence[int], test: Sequence[int],
                   order: Optional[Sequence[int]] = None) -> "WindowedDataset":
        train = np.asarray(train, dtype=np.int64)
        return dataclasses.replace(
            self, train_idx=train, val_idx=np.asarray(validation, dtype=np.int64),
            test_idx=np.asarray(test, dtype=np.int64),
            train_order=train if order is None else np.asarray(order, dtype=np.int64))

    def with_normalizer(self, normalizer: Normalizer) -> "WindowedDataset":
        return dataclasses.replace(self, normalizer=normalizer)


def make_windows(series: HourlySeries, lookback: int, horizon: int) -> WindowedDataset:
    """Stride-1 windows; window i reads inputs [i, i+L) and targets [i+L, i+L+H)"""
    if lookback <= 0 or horizon <= 0:
        raise ContractError(f"lookback and horizon must be positive, got {lookback} and {horizon}")
    if len(series) < lookback + horizon:
        raise ContractError(
            f"series of {len(series)} hours is shorter than lookback + horizon = {lookback + horizon}")
    return WindowedDataset(series, lookback, horizon)


def split_dataset(ds: WindowedDataset, shuffle_seed: int) -> WindowedDataset:
    """Chronological 80/10/10; only the training partition's order is shuffled"""
    n = ds.window_count
    if n < 3:
        raise ContractError(f"need at least 3 windows to split, got {n}")
    n_train, n_val = int(math.floor(0.8 * n)), int(math.floor(0.1 * n))
    idx = np.arange(n)
    train = idx[:n_train]
    order = np.random.default_rng(shuffle_seed).permutation(train)
    return ds.with_split(train, idx[n_train:n_train + n_val], idx[n_train + n_val:], order)


def build_dataset(series: HourlySeries, lookback: int, horizon: int,
                  fit_scope: str = "all_data", shuffle_seed: int = 0) -> WindowedDataset:
    ds = split_dataset(make_windows(series, lookback, horizon), shuffle_seed)
    train_end = ds.train_span_end if fit_scope == "train_only" else None
    return ds.with_normalizer(fit_normalizer(series, fit_scope, train_end))


# --- reference forecasts and fixtures ---------------------------------------------

def persistence_forecast(ds: WindowedDataset, indices: Sequence[int]) -> np.ndarray:
    """Seasonal naive: each target hour repeats the same hour of the last observed day"""
    if ds.lookback < 24:
        raise ContractError(f"persistence needs a lookback of at least 24 hours, got {ds.lookback}")
    idx = np.asarray(indices, dtype=np.int64)
    offsets = ds.lookback - 24 + (np.arange(ds.horizon) % 24)
    return ds.values[idx[:, None] + offsets[None, :]]


def make_synthetic_series(hours: int = 500, seed: int = 0,
                          start: str = "2019-01-07T00:00:00Z", noise: float = 0.2) -> HourlySeries:
    """Daily + weekly sinusoid with an evening peak, seeded Gaussian noise, clipped at zero"""
    t = np.arange(hours, dtype=np.float64)
    daily = 2.5 * np.sin(2 * np.pi * (t - 12.0) / 24.0)
    weekly = 1.5 * np.sin(2 * np.pi * t / 168.0)
    rng = np.random.default_rng(seed)
    load = np.clip(4.0 + daily + weekly + rng.normal(0.0, noise, size=hours), 0.0, None)
    return HourlySeries(pd.Timestamp(start), load)


# --- load profiles ---------------------------------------------------------------

PROFILE_KINDS = ("hour", "weekday", "month", "trend")


def load_profiles(series: HourlySeries, tz: str = "UTC") -> Dict[str, pd.DataFrame]:
    """
    Usage patterns of the hourly series in local time `tz`: mean/std/total
    load by hour of day, by weekday (0 = Monday) and by calendar month, and
    the month-by-month trend.
    """
    try:
        index = series.timestamps.tz_convert(tz)
    except KeyError as e:
        raise ConfigurationError(f"unknown time zone {tz!r}") from e
    load = pd.Series(series.values, index=index, name="load_kwh")
    keys = {"hour": index.hour, "weekday": index.dayofweek, "month": index.month}

    profiles: Dict[str, pd.DataFrame] = {}
    for kind, key in keys.items():
        grouped = load.groupby(key).agg(mean_kwh="mean", std_kwh="std", total_kwh="sum", hours="count")
        grouped.index.name = kind
        profiles[kind] = grouped.fillna({"std_kwh": 0.0}).reset_index()

    trend = load.resample("MS").agg(["sum", "mean", "count"])
    profiles["trend"] = pd.DataFrame({
        "month": trend.index.strftime("%Y-%m"),
        "total_kwh": trend["sum"].to_numpy(),
        "mean_kwh": trend["mean"].to_numpy(),
        "hours": trend["count"].to_numpy(),
    })
    return profiles


def emit_load_profiles(profiles: Dict[str, pd.DataFrame], directory: Union[str, Path]) -> List[Path]:
    """profile_<kind>.csv for each frame returned by load_profiles"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, frame in profiles.items():
        path = directory / f"profile_{kind}.csv"
        frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
        written.append(path)
    logger.info("load profiles written to %s", directory)
    return written


def load_series(path: Union[str, Path]) -> HourlySeries:
    """Read an hourly CSV, or aggregate a sessions CSV; the header decides which"""
    try:
        header = list(pd.read_csv(path, nrows=0).columns)
    except FileNotFoundError as e:
        raise ContractError(f"data file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise FormatError(f"{path} is empty") from e
    if header == HOURLY_COLUMNS:
        return HourlySeries.read_csv(path)
    if header == SESSION_COLUMNS:
        records, report = ingest_sessions(path)
        if not records:
            raise DataIntegrityError(f"{path}: no valid session rows ({len(report.rejected)} rejected)")
        return aggregate_to_hourly(records)
    raise FormatError(f"{path}: header {','.join(map(str, header))} is neither "
                      f"{','.join(HOURLY_COLUMNS)} nor {','.join(SESSION_COLUMNS)}")
