import pandas as pd

from ..errors import ConfigurationError, DataIntegrityError
from ..services.dataset import aggregate_to_hourly, emit_load_profiles, ingest_sessions, load_profiles
from .common import output_dir, resolve_config, summary


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("ingest", parents=parents, help="aggregate a sessions CSV into hourly load")
    p.add_argument("--tz", default="UTC", help="local time zone for the load profiles (e.g. Europe/Oslo)")
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = resolve_config(args)
    source = cfg.sessions if cfg.sessions is not None else cfg.data
    if source is None:
        raise ConfigurationError("ingest needs a sessions CSV")
    records, report = ingest_sessions(source)
    if not records:
        raise DataIntegrityError(f"{source}: no valid session rows ({len(report.rejected)} rejected)")
    series = aggregate_to_hourly(records)
    profiles = load_profiles(series, args.tz)

    out = output_dir(cfg)
    series.to_csv(out / "hourly.csv")
    emit_load_profiles(profiles, out)
    if report.rejected:
        pd.DataFrame([r.model_dump() for r in report.rejected], columns=["line", "reason"]).to_csv(
            out / "rejected.csv", index=False, lineterminator="\n")
    summary(f"ingested {report.accepted} sessions ({len(report.rejected)} rejected) into "
            f"{len(series)} hours -> {out / 'hourly.csv'}", low_confidence=bool(report.rejected))
    return 0
