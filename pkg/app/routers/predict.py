from ..services.checkpoint import load_checkpoint
from ..services.dataset import fit_normalizer
from ..services.forecasters import forecast_after
from .common import check_checkpoint, load_data, output_dir, resolve_config, summary


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("predict", parents=parents,
                              help="forecast the hours after the end of the data in kWh")
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = resolve_config(args, need_checkpoint=True)
    ckpt = load_checkpoint(cfg.checkpoint)
    check_checkpoint(cfg, ckpt)
    series = load_data(cfg)
    normalizer = ckpt.normalizer or fit_normalizer(series)
    frame = forecast_after(ckpt.to_model(), series, normalizer)

    out = output_dir(cfg) / "forecast.csv"
    frame.to_csv(out, index=False, float_format="%.6g", lineterminator="\n")
    summary(f"predict {ckpt.kind}: {len(frame)} hours from {frame['timestamp'].iloc[0]} -> {out}")
    return 0
