import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pdjump.cli import ConfigError, ExperimentConfig, emit_plot_data, main

COUPLING_MODEL = {"name": "cir", "params": {"a": 16.0, "b": 2.0, "d": 1.0, "sigma": 0.1414213562373095,
                                            "f": {"lo": 1.0, "hi": 2.0}, "M": 2.0, "extra_layers": 0}}


def _write(tmp_path, name, cfg) -> Path:
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(tmp_path, name, cfg, *extra) -> tuple[int, Path]:
    out = tmp_path / f"out_{name}"
    code = main(["run", str(_write(tmp_path, name, cfg)), "--out", str(out), *extra])
    return code, out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


SIM = {"model": {"name": "cir"}, "kind": "simulate", "seed": 3, "settings": {"paths": 10}}


def test_minimal_simulation_writes_three_files(tmp_path):
    code, out = _run(tmp_path, "sim", SIM)
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "simulate.csv", "summary.txt"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["settings"]["paths"] == 10
    assert {"pdjump", "numpy", "scipy", "python"} <= set(manifest["versions"])
    rows = _rows(out / "simulate.csv")
    assert rows[0] == ["path", "t", "x1"] and len(rows) == 1 + 10 * 2
    assert "PASS finite" in (out / "summary.txt").read_text()


def test_reruns_are_byte_identical(tmp_path):
    _, a = _run(tmp_path, "a", SIM)
    _, b = _run(tmp_path, "b", SIM)
    assert (a / "simulate.csv").read_bytes() == (b / "simulate.csv").read_bytes()


def test_seed_override_changes_the_draws(tmp_path):
    _, a = _run(tmp_path, "a", SIM)
    _, b = _run(tmp_path, "b", SIM, "--seed", "4")
    assert (a / "simulate.csv").read_bytes() != (b / "simulate.csv").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["seed"] == 4


def test_thread_count_does_not_change_results(tmp_path):
    cfg = dict(SIM, settings={"paths": 40})
    _, a = _run(tmp_path, "a", cfg)
    _, b = _run(tmp_path, "b", cfg, "--threads", "2")
    assert (a / "simulate.csv").read_bytes() == (b / "simulate.csv").read_bytes()


def test_default_output_root_comes_from_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PDJUMP_OUT", str(tmp_path / "root"))
    assert main(["run", str(_write(tmp_path, "named", SIM))]) == 0
    assert (tmp_path / "root" / "named" / "simulate.csv").exists()


@pytest.mark.parametrize("cfg, message", [
    (dict(SIM, extra=1), "unknown key"),
    (dict(SIM, settings={"paths": 10, "pathz": 1}), "unknown key"),
    (dict(SIM, kind="bogus"), "unknown experiment kind"),
    (dict(SIM, model={"name": "bogus"}), "unknown model"),
    (dict(SIM, settings={"dt": -0.1}), "positive"),
    (dict(SIM, settings={"paths": 0}), "positive"),
    (dict(SIM, model={"name": "cir", "params": {"a": -1.0}}), "a, b, r > 0"),
    (dict(SIM, model={"name": "hawkes", "params": {"N": 1}}), "N >= 2"),
    (dict(SIM, seed=-1), "seed"),
])
def test_invalid_configs_exit_with_one(tmp_path, capsys, cfg, message):
    code, _ = _run(tmp_path, "bad", cfg)
    assert code == 1
    assert message in capsys.readouterr().err


def test_malformed_json_exits_with_one(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_config_defaults_are_filled_in():
    cfg = ExperimentConfig.from_dict({"model": {"name": "cir"}, "kind": "regimes"})
    assert cfg.seed == 0 and cfg.settings["t_grid"] == [8.0, 10.0, 12.0, 14.0]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "regimes"})


def test_violated_monotonicity_check_exits_with_two(tmp_path):
    # horizon far too short for the gap to move outside its CIs
    cfg = {"model": {"name": "cir"}, "kind": "equilibrium", "seed": 1,
           "settings": {"paths": 500, "burn_in": 10.0, "t_list": [0.05, 0.1]}}
    code, out = _run(tmp_path, "eq", cfg)
    assert code == 2
    assert "FAIL monotone" in (out / "summary.txt").read_text()


# -- plot data ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pseudo_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pseudo")
    cfg = {"model": {"name": "cir"}, "kind": "pseudotrajectory", "seed": 1,
           "settings": {"paths": 300, "t_list": [1.0, 2.0], "T": 0.5, "dt": 0.05, "dictionary_size": 8}}
    _run(tmp, "pt", cfg)
    return tmp / "out_pt"


def test_gap_curve_schema(pseudo_dir, tmp_path):
    target = tmp_path / "copy"
    target.mkdir()
    (target / "pseudotrajectory.csv").write_bytes((pseudo_dir / "pseudotrajectory.csv").read_bytes())
    assert main(["plots", str(target), "--no-figures"]) == 0
    rows = _rows(target / "gap_curve.csv")
    assert rows[0] == ["t", "gap", "ci_lo", "ci_hi"]
    assert [float(r[0]) for r in rows[1:]] == [1.0, 2.0]
    assert not list(target.glob("*.png"))


def test_figures_are_written_unless_disabled(pseudo_dir):
    written = emit_plot_data(pseudo_dir)
    assert (pseudo_dir / "gap_curve.png") in written
    assert (pseudo_dir / "gap_curve.png").read_bytes()[:4] == b"\x89PNG"


def test_coupling_survival_is_nonincreasing(tmp_path):
    cfg = {"model": COUPLING_MODEL, "kind": "couple", "seed": 2,
           "settings": {"center": [0.177], "z0": [1.0], "x": [0.0], "y": [0.9375], "pairs": 200,
                        "horizon": 10.0, "survival_t": [2.0, 8.0]}}
    code, out = _run(tmp_path, "cp", cfg)
    assert code == 0
    assert main(["plots", str(out), "--no-figures"]) == 0
    rows = _rows(out / "tau_survival.csv")
    assert rows[0] == ["t", "survival"]
    data = np.array(rows[1:], dtype=float)
    # oracle: survival at the k-th order statistic is 1 - k / n_pairs
    taus = np.array([float(r[1]) for r in _rows(out / "tau.csv")[1:]])
    ref = 1.0 - np.arange(1, np.isfinite(taus).sum() + 1) / taus.size
    np.testing.assert_allclose(data[:, 1], ref, atol=1e-12)
    assert np.all(np.diff(data[:, 0]) >= 0) and np.all(np.diff(data[:, 1]) <= 0)


def test_epsilon_decay_table(tmp_path):
    code, out = _run(tmp_path, "rg", {"model": {"name": "cir"}, "kind": "regimes"})
    assert code == 0
    main(["plots", str(out), "--no-figures"])
    rows = _rows(out / "epsilon_decay.csv")
    assert rows[0] == ["t0", "eps"] and len(rows) == 5


def test_empty_directory_is_a_missing_artifact_error(tmp_path, capsys):
    assert main(["plots", str(tmp_path)]) == 1
    assert "no plottable artifacts" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    path = _write(tmp_path, "sim", SIM)
    res = subprocess.run([sys.executable, "-m", "pdjump.cli", "run", str(path), "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "checks passed" in res.stdout
