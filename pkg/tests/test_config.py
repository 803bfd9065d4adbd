import numpy as np
import pandas as pd
import pytest
import yaml

from aqsts.config import (ConfigError, config_hash, load_config, peak_calendar_for, period_of_steps, prepare)
from aqsts.example import PERIOD_START_DAYS, scenario_config, write_example


@pytest.fixture(scope="module")
def example_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("example")
    write_example(d, days=7, resolution=15)
    return d


def test_hash_ignores_key_order():
    a = {"x": 1, "y": {"b": 2, "a": [1, 2]}}
    b = {"y": {"a": [1, 2], "b": 2}, "x": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "x": 2})


def test_load_example_config(example_dir):
    cfg = load_config(example_dir / "S2.yaml", env={})
    assert cfg.name == "S2" and cfg.engine.resolution == 15
    assert cfg.period_start_days == PERIOD_START_DAYS
    assert cfg.network == example_dir / "network.yaml"
    assert len(cfg.hash) == 64


def test_environment_overrides(example_dir, tmp_path):
    cfg = load_config(example_dir / "S1.yaml", env={"AQSTS_WORKERS": "3", "AQSTS_OUTPUT_DIR": str(tmp_path)})
    assert cfg.scheduler.workers == 3 and cfg.output_dir == tmp_path
    with pytest.raises(ConfigError):
        load_config(example_dir / "S1.yaml", env={"AQSTS_WORKERS": "many"})


def test_missing_file_is_reported(example_dir, tmp_path):
    doc = scenario_config("X", True)
    doc["network"] = "absent.yaml"
    p = tmp_path / "x.yaml"
    p.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError, match="absent.yaml"):
        load_config(p, env={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


@pytest.mark.parametrize("patch", [{"scheduler": {"mode": "eventually"}}, {"periods": {"start_days": [5, 10]}},
                                   {"engine": {"resolution": 15, "bogus": 1}}])
def test_invalid_sections(example_dir, tmp_path, patch):
    doc = scenario_config("X", True)
    doc.update(patch)
    p = example_dir / "bad.yaml"
    p.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError):
        load_config(p, env={})


def test_prepare_computes_limits(example_dir):
    inputs = prepare(load_config(example_dir / "S2.yaml", env={}))
    assert set(inputs.limits) == {("East", 1), ("West", 1)}
    assert inputs.ess is not None and inputs.ess.period_of_step.size == 7 * 96
    lim = inputs.limits[("East", 1)]
    assert lim.gen_max_lim > lim.mu > lim.gen_min_lim


def test_period_map():
    p = period_of_steps(365 * 24, 60, PERIOD_START_DAYS)
    assert p[0] == 1 and p[59 * 24] == 2 and p[120 * 24] == 3 and p[243 * 24] == 4 and p[304 * 24] == 5
    assert p[-1] == 5 and np.all(np.diff(p) >= 0)


def test_peak_calendar_rounds_up_to_step_boundaries():
    start = pd.Timestamp("2035-01-01")
    windows = pd.DataFrame({"start": [start + pd.Timedelta(minutes=365)], "end": [start + pd.Timedelta(minutes=541)]})
    cal = peak_calendar_for(windows, start, 15)
    assert cal.intervals == ((25, 37),)
