import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from app.errors import ConfigurationError
from app.models import RunConfig


class Config:
    """Environment settings; none are required"""

    @staticmethod
    def get_log_level() -> int:
        name = os.getenv("BDT_LOG_LEVEL", "WARNING").upper()
        level = logging.getLevelName(name)
        return level if isinstance(level, int) else logging.WARNING

    @staticmethod
    def get_out_dir() -> Optional[str]:
        """Default output directory when neither the config file nor --out sets one"""
        return os.getenv("BDT_OUT_DIR")


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Read a JSON run config (optional) and apply nested overrides on top.
    Any validation problem surfaces as a ConfigurationError.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigurationError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: not valid JSON ({e.msg} at line {e.lineno})") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
    if "output_dir" not in raw and Config.get_out_dir():
        raw["output_dir"] = Config.get_out_dir()
    try:
        return RunConfig(**_merge(raw, overrides or {}))
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigurationError(f"{where}: {first['msg']}") from e
