import json

import numpy as np
import pytest

from lunardescent import io
from lunardescent.cli import build_parser, main
from lunardescent.pipeline import RunManifest

TINY = {
    "seed": 2,
    "mission": {"collocation": [6, 6, 5]},
    "solver": {"max_iterations": 300},
    "guidance": {"t_go_step": 50.0},
    "dispersion": {"n_samples": 12},
    "classifier": {"iterations": 500},
    "refinement": {"n_lambda": 3, "verification_samples": 0},
    "line_search": {"enabled": False},
}


@pytest.fixture(scope="module")
def optimized(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    code = main(["--config", str(cfg), "--stage", "optimize", "--out", str(d / "out")])
    return cfg, d / "out", code


def test_parser_defaults():
    a = build_parser().parse_args([])
    assert a.stage == "all" and a.out == "results" and a.config is None


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    assert "--stage" in capsys.readouterr().out


def test_missing_upstream_stage(tmp_path, capsys):
    assert main(["--stage", "refine", "--out", str(tmp_path)]) == 2
    assert "run stage" in capsys.readouterr().err
    assert main(["--stage", "terminal", "--out", str(tmp_path)]) == 2


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mission": {"v_sops": -1}}))
    assert main(["--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "v_sops" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2


def test_optimize_stage_outputs(optimized):
    _, out, code = optimized
    assert code == 0
    for name in ("waypoints.json", "forward_summary.json", "trajectory_rough_braking.csv",
                 "trajectory_fine_braking.csv", "trajectory_terminal_descent.csv", "manifest.json", "config.json"):
        assert (out / name).is_file(), name
    header, rows = io.read_csv(out / "trajectory_fine_braking.csv")
    assert tuple(header) == io.TRAJECTORY_COLUMNS
    assert rows[-1, 1:4] == pytest.approx([0, 800, 0], abs=1e-4)
    man = RunManifest.from_dict(io.read_json(out / "manifest.json"))
    assert man.stages["optimize"].status == "ok" and man.seed == 2


def test_terminal_stage_after_optimize(optimized):
    cfg, out, _ = optimized
    assert main(["--config", str(cfg), "--stage", "terminal", "--out", str(out)]) == 0
    header, rows = io.read_csv(out / "terminal_trajectory.csv")
    assert tuple(header) == io.TRAJECTORY_COLUMNS
    assert rows[-1, 2] == pytest.approx(0.0, abs=1e-9)
    summary = io.read_json(out / "terminal_summary.json")
    assert summary["lateral_error_m"] < 1.0


def test_single_label_dataset_fails_classify(optimized, capsys):
    cfg, out, _ = optimized
    # tiny dispersions: every sample is controllable, so no boundary can be fitted
    doc = dict(TINY, dispersion={"n_samples": 12, "position_std": 1.0, "velocity_std": 0.01})
    cfg2 = cfg.parent / "cfg2.json"
    cfg2.write_text(json.dumps(doc))
    out2 = cfg.parent / "out2"
    assert main(["--config", str(cfg2), "--stage", "optimize", "--out", str(out2)]) == 0
    assert main(["--config", str(cfg2), "--stage", "dataset", "--out", str(out2)]) == 0
    assert main(["--config", str(cfg2), "--stage", "classify", "--out", str(out2)]) == 3
    assert "single label" in capsys.readouterr().err
    man = io.read_json(out2 / "manifest.json")
    assert man["stages"]["classify"]["status"] == "failed"


def test_seed_override_changes_hash(optimized, tmp_path):
    cfg, _, _ = optimized
    a = tmp_path / "a"
    main(["--config", str(cfg), "--stage", "optimize", "--out", str(a), "--seed", "9"])
    assert io.read_json(a / "manifest.json")["seed"] == 9
    assert json.loads((a / "config.json").read_text())["seed"] == 9


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "lunardescent", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "lunardescent" in r.stdout
