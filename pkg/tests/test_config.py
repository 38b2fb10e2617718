import json
import logging

import pytest

from app.errors import ConfigurationError
from config import Config, load_run_config


def test_environment_getters(monkeypatch):
    monkeypatch.delenv("BDT_LOG_LEVEL", raising=False)
    monkeypatch.delenv("BDT_OUT_DIR", raising=False)
    assert Config.get_log_level() == logging.WARNING
    assert Config.get_out_dir() is None

    monkeypatch.setenv("BDT_LOG_LEVEL", "debug")
    monkeypatch.setenv("BDT_OUT_DIR", "elsewhere")
    assert Config.get_log_level() == logging.DEBUG
    assert Config.get_out_dir() == "elsewhere"

    monkeypatch.setenv("BDT_LOG_LEVEL", "chatty")
    assert Config.get_log_level() == logging.WARNING


def test_overrides_merge_into_the_config_file(tmp_path, monkeypatch):
    monkeypatch.setenv("BDT_OUT_DIR", "from-env")
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": "gru", "hyperparams": {"model_dim": 8, "num_heads": 2}}))
    cfg = load_run_config(path, {"hyperparams": {"seed": 9}, "horizons": [48]})
    assert cfg.model == "gru" and cfg.horizons == [48]
    assert cfg.hyperparams.model_dim == 8 and cfg.hyperparams.seed == 9
    assert cfg.output_dir == "from-env"
    assert "model" in cfg.model_fields_set and "runs" not in cfg.model_fields_set


def test_invalid_configs_name_the_field(tmp_path):
    with pytest.raises(ConfigurationError, match="horizons"):
        load_run_config(None, {"horizons": []})
    with pytest.raises(ConfigurationError, match="not found"):
        load_run_config(tmp_path / "missing.json")
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigurationError, match="top level"):
        load_run_config(listing)
