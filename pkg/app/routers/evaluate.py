import json

from ..services.checkpoint import load_checkpoint
from ..services.dataset import build_dataset
from ..services.evaluator import evaluate_model
from .common import check_checkpoint, load_data, output_dir, resolve_config, summary


def register(subparsers, parents) -> None:
    p = subparsers.add_parser("eval", parents=parents, help="score a checkpoint on the test split")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.set_defaults(handler=run)


def run(args) -> int:
    cfg = resolve_config(args, need_checkpoint=True)
    ckpt = load_checkpoint(cfg.checkpoint)
    check_checkpoint(cfg, ckpt)
    hp = ckpt.hyperparams
    series = load_data(cfg)
    ds = build_dataset(series, hp.lookback, hp.horizon, cfg.fit_scope, shuffle_seed=cfg.train.seed)
    if ckpt.normalizer is not None:
        ds = ds.with_normalizer(ckpt.normalizer)
    model = ckpt.to_model()

    result = evaluate_model(model, ds, args.split, cfg.scale)
    out = output_dir(cfg) / "eval.json"
    out.write_text(json.dumps({**result.model_dump(mode="json"), "split": args.split,
                               "checkpoint": str(cfg.checkpoint)}, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    summary(f"eval {result.model} {result.horizon}-h ({args.split}, {result.scale}): "
            f"RMSE {result.rmse:.4f}, MAE {result.mae:.4f} -> {out}")
    return 0
