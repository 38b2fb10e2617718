#!/usr/bin/env python3
"""
Directional check on real apartment-building charging sessions.

Trains BDT and the transformer benchmark at the 48-120 h horizons and reports
whether BDT's mean test MAE is lower at each one. The outcome is printed, not
asserted.

    python verify_directional.py --source <url-or-path> --out runs/directional

The source is the semicolon-separated charging report of the public
Norwegian residential dataset (columns session_ID, Start_plugin, End_plugout,
El_kWh; day-first local times; decimal commas). A file already in the
session_id,start_time,end_time,energy_kwh layout is used as is.
"""
import argparse
import io
import logging
import sys
from pathlib import Path

import pandas as pd
import requests

from app.main import run_cli
from app.services.dataset import SESSION_COLUMNS
from app.services.evaluator import aggregate_runs, read_runs

logger = logging.getLogger("verify_directional")

LOCAL_TZ = "Europe/Oslo"


def fetch(source: str) -> str:
    if source.startswith(("http://", "https://")):
        response = requests.get(source, timeout=60)
        response.raise_for_status()
        return response.text
    return Path(source).read_text(encoding="utf-8-sig")


def to_sessions_frame(text: str) -> pd.DataFrame:
    head = text.splitlines()[0] if text else ""
    if head.replace(" ", "").split(",") == SESSION_COLUMNS:
        return pd.read_csv(io.StringIO(text), dtype=str)
    raw = pd.read_csv(io.StringIO(text), sep=";", decimal=",", dtype={"session_ID": str})
    start = pd.to_datetime(raw["Start_plugin"], dayfirst=True)
    end = pd.to_datetime(raw["End_plugout"], dayfirst=True)

    def utc(stamps):
        local = stamps.dt.tz_localize(LOCAL_TZ, ambiguous="NaT", nonexistent="shift_forward")
        return local.dt.tz_convert("UTC").dt.strftime("%Y-%m-%dT%H:%M:%SZ")

    frame = pd.DataFrame({"session_id": raw["session_ID"], "start_time": utc(start),
                          "end_time": utc(end), "energy_kwh": raw["El_kWh"].astype(float)})
    return frame.dropna()


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--source", required=True, help="URL or path of the sessions file")
    parser.add_argument("--out", default="runs/directional")
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--config", help="JSON run config for both models")
    parser.add_argument("--horizons", type=int, nargs="+", default=[48, 72, 96, 120])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sessions = out / "sessions.csv"
    to_sessions_frame(fetch(args.source)).to_csv(sessions, index=False, lineterminator="\n")
    logger.info("sessions written to %s", sessions)

    common = ["--out", str(out), "--runs", str(args.runs), "--jobs", str(args.jobs)]
    if args.config:
        common += ["--config", args.config]
    if run_cli(["ingest", "--data", str(sessions), "--tz", "Europe/Oslo"] + common) != 0:
        return 1
    hourly = str(out / "hourly.csv")
    for model in ("bdt", "transformer"):
        for h in args.horizons:
            code = run_cli(["train", "--data", hourly, "--model", model, "--horizon", str(h)] + common)
            if code != 0:
                return code

    verdicts = []
    for h in args.horizons:
        bdt = aggregate_runs(read_runs(out / "bdt" / f"h{h}" / "runs.csv"))
        tr = aggregate_runs(read_runs(out / "transformer" / f"h{h}" / "runs.csv"))
        lower = bdt.mae_mean < tr.mae_mean
        verdicts.append(lower)
        print(f"{h:>4}-h  BDT MAE {bdt.mae_mean:.4f}±{bdt.mae_std:.4f}  "
              f"transformer MAE {tr.mae_mean:.4f}±{tr.mae_std:.4f}  BDT lower: {'yes' if lower else 'no'}")
    print(f"BDT lower at {sum(verdicts)} of {len(verdicts)} horizons")
    return 0


if __name__ == "__main__":
    sys.exit(main())
