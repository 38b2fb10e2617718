"""Config resolution, data loading and output paths shared by the subcommands."""
import json
from pathlib import Path
from typing import Any, Dict

from config import load_run_config

from ..errors import ConfigurationError
from ..models import RunConfig
from ..services.checkpoint import Checkpoint
from ..services.dataset import HourlySeries, load_series


def overrides_from(args) -> Dict[str, Any]:
    """CLI flags that were given, as a nested run-config fragment"""
    out: Dict[str, Any] = {}
    if args.data is not None:
        out["data"] = args.data
    if args.out is not None:
        out["output_dir"] = args.out
    if args.model is not None:
        out["model"] = args.model
    if args.horizon is not None:
        out["horizons"] = [args.horizon]
    if args.runs is not None:
        out["runs"] = args.runs
    if args.seed is not None:
        out["hyperparams"] = {"seed": args.seed}
        out["train"] = {"seed": args.seed}
    if args.jobs is not None:
        out["jobs"] = args.jobs
    if args.scale is not None:
        out["scale"] = args.scale
    if args.checkpoint is not None:
        out["checkpoint"] = args.checkpoint
    return out


def resolve_config(args, need_data: bool = True, need_checkpoint: bool = False) -> RunConfig:
    cfg = load_run_config(args.config, overrides_from(args))
    if need_data and cfg.data is None and cfg.sessions is None:
        raise ConfigurationError("no input data: pass --data or set data/sessions in the config")
    if need_checkpoint and cfg.checkpoint is None:
        raise ConfigurationError("no checkpoint: pass --checkpoint or set checkpoint in the config")
    return cfg


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(cfg: RunConfig) -> Path:
    path = output_dir(cfg) / "resolved_config.json"
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_data(cfg: RunConfig) -> HourlySeries:
    return load_series(cfg.data if cfg.data is not None else cfg.sessions)


def run_dir(out: Path, model: str, horizon: int) -> Path:
    return out / model / f"h{horizon}"


def checkpoint_path(out: Path, model: str, horizon: int, run: int) -> Path:
    return run_dir(out, model, horizon) / f"run{run}" / "model.bdtc"


def summary(line: str, low_confidence: bool = False) -> None:
    print(("⚠ " if low_confidence else "✓ ") + line)


def check_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> None:
    """Model kind and horizon given by flag or config file must match the checkpoint"""
    if "model" in cfg.model_fields_set and cfg.model != ckpt.kind:
        raise ConfigurationError(
            f"checkpoint {cfg.checkpoint} holds a {ckpt.kind} model, but {cfg.model} was requested")
    h = ckpt.hyperparams.horizon
    if "horizons" in cfg.model_fields_set and h not in cfg.horizons:
        asked = ", ".join(f"{x} h" for x in cfg.horizons)
        raise ConfigurationError(f"checkpoint {cfg.checkpoint} forecasts {h} h, but {asked} was requested")
