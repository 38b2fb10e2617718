from pathlib import Path

from ..services.dataset import make_synthetic_series
from .common import summary


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("make-synthetic", parents=parents)  # no help entry: hidden
    p.add_argument("--hours", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.2)
    p.set_defaults(handler=run)


def run(args) -> int:
    series = make_synthetic_series(hours=args.hours, seed=args.seed or 0, noise=args.noise)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "synthetic.csv"
    series.to_csv(path)
    summary(f"synthetic fixture: {len(series)} hours (seed {args.seed or 0}) -> {path}")
    return 0
