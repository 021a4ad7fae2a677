import csv
import json
from pathlib import Path

import pytest

from rmfg.cli import ConfigError, diff_runs, load_config, main, run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_unknown_key_is_named(tmp_path):
    p = write(tmp_path, 'seed = 1\n[fbsde]\nblokcs = 32\n')
    with pytest.raises(ConfigError, match="blokcs"):
        load_config(p, pipeline="solve-fbsde")


def test_bad_value_is_named(tmp_path):
    p = write(tmp_path, 'seed = 1\n[chaos]\nn_t = 20\n')
    with pytest.raises(ConfigError, match="n_t"):
        load_config(p, pipeline="chaos")


def test_unknown_section_is_named(tmp_path):
    p = write(tmp_path, 'seed = 1\n[plots]\ndpi = 3\n')
    with pytest.raises(ConfigError, match="plots"):
        load_config(p, pipeline="validate")


def test_seed_is_required(tmp_path):
    p = write(tmp_path, '[spec]\ncatalog = "lq"\n')
    with pytest.raises(ConfigError, match="seed"):
        load_config(p, pipeline="validate")


def test_budget_below_minimum_rejected(tmp_path):
    p = write(tmp_path, 'seed = 1\n[fbsde]\nblocks = 4\n')
    with pytest.raises(ConfigError, match="fbsde"):
        load_config(p, pipeline="solve-fbsde")


def test_bad_generator_rejected(tmp_path):
    p = write(tmp_path, 'seed = 1\n[spec]\ncatalog = "lq-mean-drift"\ngenerator = [[-1.0, 0.5], [2.0, -2.0]]\n')
    with pytest.raises(ConfigError, match="spec"):
        load_config(p, pipeline="validate")


def test_env_overrides_output(tmp_path):
    cfg = load_config(CONFIGS / "solve-lq-stationary.toml", pipeline="solve-lq", out="a",
                      env={"RMFG_OUT": str(tmp_path / "b")})
    assert cfg.out == str(tmp_path / "b")


def test_command_line_overrides_seed():
    cfg = load_config(CONFIGS / "solve-lq-stationary.toml", pipeline="solve-lq", seed=99, env={})
    assert cfg.seed == 99


def test_exit_code_for_config_error(tmp_path, capsys):
    p = write(tmp_path, 'seed = 1\n[fbsde]\nblokcs = 32\n')
    assert main(["solve-fbsde", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "blokcs" in capsys.readouterr().err


def test_exit_code_for_missing_manifest(tmp_path):
    assert main(["diff", str(tmp_path / "x"), str(tmp_path / "y")]) == 3


def test_validate_passes_for_lq(tmp_path):
    assert main(["validate", "--seed", "3", "--out", str(tmp_path / "v")]) == 0
    rows = list(csv.reader(open(tmp_path / "v" / "validation.csv")))
    assert rows[0] == ["check", "status", "estimate", "message"]
    assert all(r[1] in ("PASS", "SKIP") for r in rows[1:])
    man = json.loads((tmp_path / "v" / "manifest.json").read_text())
    assert man["summary"]["passed"] is True


def test_solve_lq_stationary(tmp_path):
    out = tmp_path / "lq"
    assert main(["solve-lq", "--config", str(CONFIGS / "solve-lq-stationary.toml"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "riccati.csv")))
    assert rows and all(abs(float(r["K00"]) - 1.0) <= 1e-8 for r in rows)


def test_same_config_same_checksums_and_self_diff(tmp_path):
    a = run(load_config(CONFIGS / "solve-pde-two-player.toml", pipeline="solve-pde", out=str(tmp_path / "a"),
                        env={}))
    b = run(load_config(CONFIGS / "solve-pde-two-player.toml", pipeline="solve-pde", out=str(tmp_path / "b"),
                        env={}))
    assert a["files"] == b["files"]
    assert diff_runs(tmp_path / "a", tmp_path / "b") == []
    assert diff_runs(tmp_path / "a", tmp_path / "a") == []


def test_seed_change_confined_to_stochastic_outputs(tmp_path):
    text = ('[spec]\ncatalog = "lq-mean-drift"\n[sim]\nN = 4\nreps = 30\nn_t = 8\n')
    p = write(tmp_path, text)
    for seed, name in ((1, "a"), (2, "b")):
        assert main(["simulate", "--config", str(p), "--seed", str(seed), "--out", str(tmp_path / name)]) == 0
    rep = diff_runs(tmp_path / "a", tmp_path / "b")
    assert [e["file"] for e in rep] == ["runs.csv"]
    assert rep[0]["max_abs_diff"] > 0


def test_manifest_records_files(tmp_path):
    out = tmp_path / "m"
    assert main(["solve-lq", "--seed", "0", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["files"]) == {"riccati.csv"}
    assert man["config"]["seed"] == 0
    assert not list(out.glob("*.tmp"))
