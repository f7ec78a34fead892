"""Config parsing, recipe smoke runs and bit-exact output reproduction."""

import json
import os

import numpy as np
import pytest

from spdelab.cli import main, run_experiment
from spdelab.config import ConfigError, parse_config

MINIMAL = "recipe = reduction\nmaster_seed = 11\n"

TINY_COMMON = """
master_seed = 11
n_nodes = 17
dt = 0.02
T = 0.2
n_paths = 4
eps_grid = 0.5, 0.1, 0.02
"""


def tiny_config(recipe, extra=""):
    return f"recipe = {recipe}\n" + TINY_COMMON + extra


def test_minimal_config_applies_documented_defaults():
    spec = parse_config(MINIMAL)
    assert spec.recipe == "reduction"
    assert spec.master_seed == 11
    assert spec.n_nodes == 129
    assert spec.dt == 1e-3
    assert spec.sigma1 == 0.5
    assert set(spec.applied_defaults) == {
        k for k in spec.values if k not in ("recipe", "master_seed")}


def test_epsilon_range_enforced():
    with pytest.raises(ConfigError, match=r"epsilon out of \(0,1\]"):
        parse_config(MINIMAL + "epsilon = 1.5\n")


def test_unknown_key_rejected_by_name_and_line():
    with pytest.raises(ConfigError, match="line 3.*epsilonn"):
        parse_config(MINIMAL + "epsilonn = 0.1\n")


def test_malformed_line_reported_with_position():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("recipe = reduction\nnot a pair\nmaster_seed = 1\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(MINIMAL + "master_seed = 12\n")


def test_missing_required_key():
    with pytest.raises(ConfigError, match="master_seed"):
        parse_config("recipe = reduction\n")


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match="line 2.*n_nodes"):
        parse_config("recipe = reduction\nn_nodes = many\nmaster_seed = 1\n")


def test_config_round_trip():
    spec = parse_config(tiny_config("reduction", "sigma2 = 0.25\n"))
    again = parse_config(spec.to_text())
    assert again.values == spec.values
    assert again.config_hash() == spec.config_hash()
    assert again.applied_defaults == ()


def test_eps_grid_must_decrease_in_config():
    with pytest.raises(ConfigError, match="decreasing"):
        parse_config(MINIMAL + "eps_grid = 0.1, 0.5\n")


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_reduction_recipe_smoke(tmp_path):
    spec = parse_config(tiny_config("reduction"))
    report = run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"))
    assert report.status == 0
    agg = (tmp_path / "out" / "aggregate.csv").read_text().splitlines()
    assert len(agg) == 4  # header + one row per epsilon
    fit = (tmp_path / "out" / "rate_fit.csv").read_text().splitlines()
    assert fit[0].startswith("quantity,slope")
    assert len(fit) == 2
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["recipe"] == "reduction"
    assert "aggregate.csv" in manifest["outputs"]
    assert manifest["applied_defaults"]


def test_manifest_hashes_match_file_contents(tmp_path):
    import hashlib

    spec = parse_config(tiny_config("reduction"))
    run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"))
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    for name, digest in manifest["outputs"].items():
        actual = hashlib.sha256(_read(tmp_path / "out" / name)).hexdigest()
        assert actual == digest


def test_rerun_reproduces_csv_bytes_across_worker_counts(tmp_path):
    spec = parse_config(tiny_config("reduction"))
    run_experiment(spec, workers=1, output_dir=str(tmp_path / "a"))
    run_experiment(spec, workers=4, output_dir=str(tmp_path / "b"))
    for name in ("per_path.csv", "aggregate.csv", "rate_fit.csv"):
        assert _read(tmp_path / "a" / name) == _read(tmp_path / "b" / name)


def test_normal_deviation_recipe_smoke(tmp_path):
    spec = parse_config(tiny_config("normal_deviation", "sample_paths = 2\n"))
    report = run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"))
    assert report.status == 0
    assert (tmp_path / "out" / "sample_paths.csv").exists()
    header = (tmp_path / "out" / "sample_paths.csv").read_text().splitlines()[0]
    assert header.startswith("time,v_eps_0,v_lim_0")


def test_ldp_recipe_smoke(tmp_path):
    # delta far below the typical norm: every path exceeds, and 12 paths
    # clear the 10-exceedance usability floor
    extra = "kappa = 0.25\ndelta = 0.0001\nn_paths = 12\n"
    spec = parse_config(tiny_config("ldp_tail", extra).replace("n_paths = 4\n", ""))
    report = run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"))
    rows = (tmp_path / "out" / "ldp_tail.csv").read_text().splitlines()
    assert rows[0].startswith("eps,kappa,delta")
    assert len(rows) == 4
    assert report.status == 0  # delta small: every path exceeds, all usable


def test_rate_function_recipe_smoke(tmp_path):
    spec = parse_config(tiny_config("rate_function"))
    report = run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"))
    assert report.status == 0
    row = (tmp_path / "out" / "rate_result.csv").read_text().splitlines()[1].split(",")
    assert float(row[0]) > 0           # value
    assert float(row[5]) == pytest.approx(4.0, abs=0.1)  # quad ratio


def test_diagnostics_recipe_passes(tmp_path):
    spec = parse_config(tiny_config("diagnostics"))
    report = run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"))
    assert report.status == 0
    text = (tmp_path / "out" / "diagnostics.csv").read_text()
    assert "coercivity_alpha" in text and "fail" not in text


def test_dump_operators_flag(tmp_path):
    spec = parse_config(tiny_config("diagnostics"))
    run_experiment(spec, workers=1, output_dir=str(tmp_path / "out"), dump_ops=True)
    assert (tmp_path / "out" / "operators" / "K.mtx").exists()
    assert (tmp_path / "out" / "operators" / "mesh.txt").exists()


def test_cli_validate_and_run(tmp_path, capsys):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(tiny_config("diagnostics"))
    assert main(["validate", str(cfg_file)]) == 0
    out = capsys.readouterr().out
    assert "recipe=diagnostics" in out
    assert main(["run", str(cfg_file), "--output-dir", str(tmp_path / "o")]) == 0


def test_cli_rejects_bad_config(tmp_path, capsys):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("recipe = reduction\nepsilon = 7\nmaster_seed = 1\n")
    assert main(["validate", str(cfg_file)]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_cli_missing_file():
    assert main(["run", "/nonexistent/path.cfg"]) == 2
