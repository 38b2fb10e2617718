import io
import math

import numpy as np
import pandas as pd
import pytest

from app.errors import ConfigurationError, ContractError, DataIntegrityError, DegenerateScaleError, FormatError
from app.services.dataset import (HourlySeries, aggregate_to_hourly, build_dataset, emit_load_profiles,
                                  fit_normalizer, ingest_sessions, load_profiles, load_series,
                                  make_synthetic_series, make_windows, persistence_forecast, split_dataset)

SESSIONS = """session_id,start_time,end_time,energy_kwh
a,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z,4.0
b,2020-01-01T01:30:00+01:00,2020-01-01T01:00:00Z,1.0
c,2020-01-01T03:00:00Z,2020-01-01T02:00:00Z,2.0
d,2020-01-01T03:00:00,2020-01-01T04:00:00Z,2.0
e,2020-01-01T03:00:00Z,2020-01-01T04:00:00Z,-1
f,2020-01-01T03:00:00Z,2020-01-01T04:00:00Z,abc
"""


def _series(values, start="2020-01-01T00:00:00Z"):
    return HourlySeries(pd.Timestamp(start), np.asarray(values, dtype=float))


def test_ingest_reports_bad_rows_by_line():
    records, report = ingest_sessions(io.StringIO(SESSIONS))
    assert [r.session_id for r in records] == ["a", "b"]
    assert report.accepted == 2
    assert [e.line for e in report.rejected] == [4, 5, 6, 7]


def test_ingest_rejects_rows_with_the_wrong_field_count():
    text = ("session_id,start_time,end_time,energy_kwh\n"
            "a,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z,4.0\n"
            "b,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z,4.0,extra\n"
            "c,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z\n"
            "d,2020-01-01T03:00:00Z,2020-01-01T04:00:00Z,1.0\n")
    records, report = ingest_sessions(io.StringIO(text))
    assert [r.session_id for r in records] == ["a", "d"]
    assert [e.line for e in report.rejected] == [3, 4]
    assert "got 5" in report.rejected[0].reason
    assert "got 3" in report.rejected[1].reason


def test_ingest_counts_blank_lines_in_line_numbers():
    text = ("session_id,start_time,end_time,energy_kwh\n"
            "a,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z,4.0\n"
            "\n"
            "b,2020-01-01T03:00:00Z,2020-01-01T02:00:00Z,1.0\n"
            "\n"
            "c,2020-01-01T03:00:00Z,2020-01-01T04:00:00Z,2.0,9\n")
    records, report = ingest_sessions(io.StringIO(text))
    assert [r.session_id for r in records] == ["a"]
    assert [e.line for e in report.rejected] == [4, 6]


def test_ingest_rejects_wrong_header():
    with pytest.raises(FormatError):
        ingest_sessions(io.StringIO("id,start,end,kwh\n1,2,3,4\n"))
    with pytest.raises(FormatError):
        ingest_sessions(io.StringIO(""))


def test_aggregation_prorates_by_overlap():
    records, _ = ingest_sessions(io.StringIO(SESSIONS))
    series = aggregate_to_hourly(records)
    assert series.start == pd.Timestamp("2020-01-01T00:00:00Z")
    # a: 2 kWh in hours 0 and 1; b: 00:30-01:00 UTC adds its full 1 kWh to hour 0
    assert series.values.tolist() == [3.0, 2.0]


def test_aggregation_conserves_energy(rng):
    rows = ["session_id,start_time,end_time,energy_kwh"]
    base = pd.Timestamp("2021-03-01T00:00:00Z")
    for i in range(200):
        start = base + pd.Timedelta(minutes=int(rng.integers(0, 60 * 24 * 10)))
        end = start + pd.Timedelta(minutes=int(rng.integers(1, 60 * 30)))
        rows.append(f"s{i},{start.isoformat()},{end.isoformat()},{rng.uniform(0, 50):.4f}")
    records, report = ingest_sessions(io.StringIO("\n".join(rows) + "\n"))
    assert not report.rejected
    series = aggregate_to_hourly(records)
    total = sum(r.energy_kwh for r in records)
    assert abs(series.values.sum() - total) <= 1e-9 * max(1.0, total)
    assert np.all(series.values >= 0)


def test_aggregation_of_nothing_is_an_error():
    with pytest.raises(ContractError):
        aggregate_to_hourly([])


def test_hourly_series_validation():
    with pytest.raises(DataIntegrityError):
        _series([1.0, -0.5])
    with pytest.raises(DataIntegrityError):
        _series([1.0, float("nan")])
    with pytest.raises(DataIntegrityError):
        _series([1.0], start="2020-01-01T00:30:00Z")


def test_hourly_csv_rejects_gaps(tmp_path):
    path = tmp_path / "hourly.csv"
    path.write_text("timestamp,load_kwh\n2020-01-01T00:00:00Z,1\n2020-01-01T02:00:00Z,2\n")
    with pytest.raises(DataIntegrityError, match="gap-free"):
        HourlySeries.read_csv(path)


def test_hourly_csv_round_trip_keeps_values(tmp_path):
    series = make_synthetic_series(hours=30)
    path = tmp_path / "hourly.csv"
    series.to_csv(path)
    back = HourlySeries.read_csv(path)
    assert back.start == series.start
    assert np.allclose(back.values, series.values, rtol=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_window_count(seed):
    rng = np.random.default_rng(seed)
    lookback, horizon = int(rng.integers(1, 30)), int(rng.integers(1, 30))
    n = lookback + horizon + int(rng.integers(0, 100))
    ds = make_windows(_series(np.arange(n)), lookback, horizon)
    assert ds.window_count == n - lookback - horizon + 1
    last = ds.window_count - 1
    assert ds.window_targets(last)[-1] == n - 1
    assert np.array_equal(ds.window_inputs(3), np.arange(3, 3 + lookback))


def test_too_short_series_has_no_windows():
    with pytest.raises(ContractError):
        make_windows(_series(np.ones(10)), 8, 3)
    assert make_windows(_series(np.ones(11)), 8, 3).window_count == 1


@pytest.mark.parametrize("n", [3, 10, 37, 100, 1001])
def test_split_sizes_and_order(n):
    ds = split_dataset(make_windows(_series(np.arange(n + 2)), 2, 1), shuffle_seed=4)
    assert ds.window_count == n
    assert len(ds.train_idx) == math.floor(0.8 * n)
    assert len(ds.val_idx) == math.floor(0.1 * n)
    assert len(ds.test_idx) == n - len(ds.train_idx) - len(ds.val_idx)
    joined = np.concatenate([ds.train_idx, ds.val_idx, ds.test_idx])
    assert np.array_equal(joined, np.arange(n))
    assert sorted(ds.train_order.tolist()) == ds.train_idx.tolist()


def test_split_needs_three_windows():
    with pytest.raises(ContractError):
        split_dataset(make_windows(_series(np.arange(4)), 2, 1), 0)


def test_shuffle_seed_only_changes_train_order():
    series = make_synthetic_series(hours=200)
    a, b = build_dataset(series, 24, 6, shuffle_seed=1), build_dataset(series, 24, 6, shuffle_seed=2)
    assert np.array_equal(a.test_idx, b.test_idx)
    assert not np.array_equal(a.train_order, b.train_order)
    assert np.array_equal(a.train_order, build_dataset(series, 24, 6, shuffle_seed=1).train_order)


def test_normalizer_scales_to_unit_range():
    series = _series([2.0, 4.0, 6.0])
    norm = fit_normalizer(series)
    assert norm.normalize([2.0, 4.0, 6.0]).tolist() == [0.0, 0.5, 1.0]
    assert norm.denormalize(0.25) == pytest.approx(3.0)
    assert norm.normalize(8.0) == pytest.approx(1.5)


def test_normalizer_round_trip(rng):
    norm = fit_normalizer(_series(rng.uniform(0, 40, size=50)))
    x = rng.uniform(0, 40, size=20)
    assert np.allclose(norm.denormalize(norm.normalize(x)), x, atol=1e-12)


def test_constant_series_cannot_be_scaled():
    with pytest.raises(DegenerateScaleError):
        fit_normalizer(_series([3.0, 3.0, 3.0]))


def test_train_only_scope_ignores_later_values():
    values = np.concatenate([np.linspace(0, 1, 90), np.full(10, 9.0)])
    ds = build_dataset(_series(values), 4, 2, fit_scope="train_only")
    assert ds.normalizer.fit_scope == "train_only"
    assert ds.normalizer.x_max < 9.0
    assert build_dataset(_series(values), 4, 2).normalizer.x_max == 9.0


def test_batch_layout(tiny_ds):
    batch = tiny_ds.batch([0, 5])
    assert batch.embedding.shape == (2, 24, 4)
    assert batch.values.shape == (2, 24, 1)
    assert batch.targets.shape == (2, 6)
    assert np.array_equal(batch.values[..., 0], batch.embedding[..., 0])
    assert np.array_equal(batch.targets[1], tiny_ds.window_targets(5))
    assert tiny_ds.batch([1], with_targets=False).targets is None


def test_persistence_repeats_the_last_day():
    values = np.arange(60, dtype=float)
    ds = make_windows(_series(values), 30, 26)
    pred = persistence_forecast(ds, [0, 2])
    assert pred[0].tolist() == [6.0 + (k % 24) for k in range(26)]
    assert pred[1, 0] == 8.0
    with pytest.raises(ContractError):
        persistence_forecast(make_windows(_series(values), 12, 2), [0])


def test_synthetic_series_is_seeded():
    a, b = make_synthetic_series(100, seed=1), make_synthetic_series(100, seed=1)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, make_synthetic_series(100, seed=2).values)
    assert a.start.dayofweek == 0


def test_load_series_sniffs_the_header(tmp_path):
    hourly = tmp_path / "hourly.csv"
    _series([1.0, 2.0, 3.0]).to_csv(hourly)
    assert load_series(hourly).values.tolist() == [1.0, 2.0, 3.0]

    sessions = tmp_path / "sessions.csv"
    sessions.write_text(SESSIONS)
    assert load_series(sessions).values.tolist() == [3.0, 2.0]

    other = tmp_path / "other.csv"
    other.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        load_series(other)
    with pytest.raises(ContractError):
        load_series(tmp_path / "missing.csv")


def test_load_profiles_by_hour_weekday_and_month():
    # two days from Monday 2024-01-01, load equal to the UTC hour of day
    profiles = load_profiles(_series(np.arange(48) % 24, start="2024-01-01T00:00:00Z"))
    assert set(profiles) == {"hour", "weekday", "month", "trend"}

    hour = profiles["hour"]
    assert hour["hour"].tolist() == list(range(24))
    assert hour["mean_kwh"].tolist() == [float(h) for h in range(24)]
    assert (hour["std_kwh"] == 0).all() and (hour["hours"] == 2).all()

    weekday = profiles["weekday"]
    assert weekday["weekday"].tolist() == [0, 1]
    assert weekday["mean_kwh"].tolist() == [11.5, 11.5]
    assert weekday["total_kwh"].tolist() == [276.0, 276.0]

    assert profiles["month"]["month"].tolist() == [1]
    assert profiles["month"]["hours"].tolist() == [48]


def test_load_trend_is_month_by_month():
    trend = load_profiles(_series(np.ones(48), start="2024-01-31T00:00:00Z"))["trend"]
    assert trend["month"].tolist() == ["2024-01", "2024-02"]
    assert trend["total_kwh"].tolist() == [24.0, 24.0]
    assert trend["hours"].tolist() == [24, 24]


def test_load_profiles_in_local_time():
    hour = load_profiles(_series(np.arange(24), start="2024-01-01T00:00:00Z"), tz="Europe/Oslo")["hour"]
    # Oslo is UTC+1 in January
    assert hour.set_index("hour")["mean_kwh"].to_dict() == {h: float((h - 1) % 24) for h in range(24)}
    with pytest.raises(ConfigurationError):
        load_profiles(_series([1.0]), tz="Mars/Olympus_Mons")


def test_profile_files(tmp_path):
    series = make_synthetic_series(200, seed=0)
    paths = emit_load_profiles(load_profiles(series), tmp_path)
    assert [p.name for p in paths] == ["profile_hour.csv", "profile_weekday.csv", "profile_month.csv",
                                       "profile_trend.csv"]
    hour = pd.read_csv(tmp_path / "profile_hour.csv")
    assert list(hour.columns) == ["hour", "mean_kwh", "std_kwh", "total_kwh", "hours"]
    assert hour["total_kwh"].sum() == pytest.approx(series.values.sum(), rel=1e-5)
