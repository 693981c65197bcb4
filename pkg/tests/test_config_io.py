import json
import math

import numpy as np
import pytest

from lunardescent import io
from lunardescent.config import (ConfigError, RunConfig, config_from_dict, config_to_dict, dumps_config,
                                 load_config, save_config)


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    again = config_from_dict(json.loads(dumps_config(cfg)))
    assert dumps_config(again) == dumps_config(cfg)
    save_config(cfg, tmp_path / "c.json")
    assert dumps_config(load_config(tmp_path / "c.json")) == dumps_config(cfg)


def test_partial_config_takes_defaults():
    cfg = config_from_dict({"seed": 4, "mission": {"collocation": [8, 8, 6]}})
    assert cfg.seed == 4
    assert cfg.mission.collocation == (8, 8, 6)
    assert cfg.mission.v_sops == 100.0
    assert cfg.guidance.t_go_min == 150.0 and cfg.guidance.t_go_max == 500.0


def test_digest_tracks_content():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig(seed=1).digest() != RunConfig().digest()


@pytest.mark.parametrize("doc, match", [
    ({"mission": {"v_sops": -1}}, "mission"),
    ({"mision": {}}, "mision: unknown key"),
    ({"guidance": {"period": 0.1, "jitter": 1}}, "guidance.jitter: unknown key"),
    ({"seed": "zero"}, "seed: expected int"),
    ({"seed": True}, "seed: expected int"),
    ({"dispersion": {"n_samples": 2.5}}, "dispersion.n_samples"),
    ({"line_search": {"enabled": "yes"}}, "line_search.enabled"),
    ({"guidance": {"t_go_min": 600}}, "guidance"),
    ({"terminal": {"safe_site_offset": [1, 2, 3]}}, "terminal"),
    ([1, 2], "top level"),
])
def test_invalid_configs(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(bad)


def test_optional_fields_accept_null():
    cfg = config_from_dict({"solver": {"time_limit": None}, "refinement": {"dm_max": 150}})
    assert cfg.solver.time_limit is None and cfg.refinement.dm_max == 150.0
    assert config_to_dict(cfg)["refinement"]["dm_max"] == 150.0


def test_csv_round_trip_and_format(tmp_path):
    rows = np.array([[1.0, -0.0, math.nan], [1 / 3, math.inf, -2.5e-9]])
    p = io.write_csv(tmp_path / "a.csv", ("a", "b", "c"), rows)
    text = p.read_text().splitlines()
    assert text[0] == "a,b,c"
    assert text[1] == "1,0,nan"
    assert text[2] == "0.333333333333,inf,-2.5e-09"
    header, data = io.read_csv(p)
    assert header == ["a", "b", "c"]
    assert np.array_equal(np.isnan(data), np.isnan(rows.astype(float) + 0))
    with pytest.raises(ValueError):
        io.write_csv(tmp_path / "b.csv", ("a", "b"), rows)


def test_empty_csv(tmp_path):
    p = io.write_csv(tmp_path / "e.csv", ("x", "y"), [])
    header, data = io.read_csv(p)
    assert header == ["x", "y"] and data.shape == (0, 2)


def test_json_non_finite(tmp_path):
    p = io.write_json(tmp_path / "a.json", {"b": np.float64(math.nan), "a": [np.inf, np.int64(3), np.bool_(True)]})
    assert io.read_json(p) == {"a": ["inf", 3, True], "b": None}
    assert p.read_text().index('"a"') < p.read_text().index('"b"')


def test_headers_carry_units():
    for cols in (io.TRAJECTORY_COLUMNS, io.DATASET_COLUMNS, io.LINE_SEARCH_COLUMNS):
        assert all(c.endswith(("_s", "_m", "_mps", "_kg", "_N", "_rad")) or c in ("label", "feasible")
                   for c in cols)
    assert io.TRADEOFF_COLUMNS == ("lambda", "S_m", "v_mps", "w_mps", "margin_sigma", "dm_kg")
    assert io.TRAJECTORY_COLUMNS[:3] == ("t_s", "downrange_m", "altitude_m")


def test_local_trajectory_rows():
    states = np.array([[0, 800, 0, 0, 0, 0, 900.0]])
    rows = io.local_trajectory_rows([0.0], states, [[0, 1458.0, 0]])
    assert rows.shape == (1, 11)
    assert rows[0, 8] == pytest.approx(1458.0) and rows[0, 9] == pytest.approx(0.0)
