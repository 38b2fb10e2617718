import argparse
import logging
import sys
from typing import List, Optional

from config import Config

from .errors import ForecastError
from .models import MODEL_KINDS
from .routers import evaluate, grid, ingest, predict, report, synthetic, train

COMMANDS = "{ingest,train,grid,eval,predict,report}"


def common_flags() -> argparse.ArgumentParser:
    """Flags shared by every subcommand; each overrides its run-config counterpart"""
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--config", help="JSON run config")
    flags.add_argument("--data", help="hourly CSV (timestamp,load_kwh) or sessions CSV")
    flags.add_argument("--out", help="output directory")
    flags.add_argument("--model", choices=MODEL_KINDS)
    flags.add_argument("--horizon", type=int, help="forecast horizon in hours")
    flags.add_argument("--runs", type=int, help="independent runs per horizon")
    flags.add_argument("--seed", type=int)
    flags.add_argument("--jobs", type=int, help="parallel trainings")
    flags.add_argument("--scale", choices=["normalized", "kwh"], help="metric scale")
    flags.add_argument("--checkpoint", help="checkpoint file (eval, predict)")
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdt-forecast",
        description="EV charging load forecasting: BDT and benchmark models, training, evaluation and reports",
    )
    subparsers = parser.add_subparsers(dest="command", metavar=COMMANDS, required=True)
    parents = [common_flags()]

    # Include routers
    ingest.register(subparsers, parents)
    train.register(subparsers, parents)
    grid.register(subparsers, parents)
    evaluate.register(subparsers, parents)
    predict.register(subparsers, parents)
    report.register(subparsers, parents)
    synthetic.register(subparsers, parents)
    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Exit code 0 on success, 1 on a runtime or data error, 2 on a usage error"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=Config.get_log_level(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args) or 0
    except ForecastError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
