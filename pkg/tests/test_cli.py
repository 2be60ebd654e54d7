import json

import pytest

from kronsr.cli import ConfigError, main, parse_config
from kronsr.experiments import ALGORITHMS


def test_defaults_match_reference_dimensions():
    cfg = parse_config(None, {"scenario": "channel"})
    g = cfg.channel.geometry
    assert (g.R, g.T, g.L, g.N) == (16, 6, 256, 18)
    assert (cfg.channel.K_I, cfg.channel.K_P) == (10, 4)
    assert cfg.trials == 50
    assert cfg.algorithms == ALGORITHMS
    assert parse_config().trials == 100


def test_unknown_algorithm_named():
    with pytest.raises(ConfigError, match="foo"):
        parse_config(None, {"algorithms": "dSBL,foo"})


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[synthetic]\nm = 4\ncolour = red\n")
    with pytest.raises(ConfigError, match="colour"):
        parse_config(p)
    p.write_text("[plots]\nx = 1\n")
    with pytest.raises(ConfigError, match="plots"):
        parse_config(p)


def test_malformed_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("this is not ini\n")
    with pytest.raises(ConfigError):
        parse_config(p)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.ini")
    p.write_text("[synthetic]\nm = twelve\n")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_invalid_enum():
    with pytest.raises(ConfigError):
        parse_config(None, {"scenario": "weather"})


def test_flag_overrides_file_and_is_recorded(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nseed = 3\ntrials = 7\n[synthetic]\nm = 6\n[solver]\nprune_threshold = 1e-5\n")
    cfg = parse_config(p, {"seed": 11})
    assert cfg.seed == 11 and cfg.trials == 7
    assert cfg.synthetic.m == 6
    assert cfg.synthetic.solver.prune_threshold == 1e-5
    assert cfg.provenance["overrides"] == [{"key": "seed", "file": 3, "flag": 11}]
    assert cfg.provenance["sources"]["trials"] == "file"


def test_sweep_selection():
    cfg = parse_config(None, {"m": "2,4,6", "snr": "15"})
    assert cfg.sweep_variable == "m" and cfg.grid == (2, 4, 6)
    assert cfg.synthetic.snr_db == 15.0
    cfg = parse_config(None, {"sparsity": "2,3"})
    assert cfg.sweep_variable == "S"


def test_conflicting_settings(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(None, {"m": "2,4", "snr": "5,10"})
    with pytest.raises(ConfigError):
        parse_config(None, {"scenario": "channel", "m": "4"})
    p = tmp_path / "c.ini"
    p.write_text("[run]\nsweep = S\n")
    with pytest.raises(ConfigError):
        parse_config(p, {"snr": "5,10"})


def test_empty_grid_is_usage_error(capsys):
    assert main(["run", "--snr", ""]) == 1
    assert main(["run", "--algorithms", "foo"]) == 1
    assert "foo" in capsys.readouterr().err
    assert main(["run", "--bogus"]) == 1


def test_info_reports_undersampling(capsys):
    assert main(["info", "--scenario", "channel"]) == 0
    out = capsys.readouterr().out
    assert "measurements=640" in out and "coefficients=5832" in out


def test_denoise_table_run(tmp_path, capsys):
    out = tmp_path / "dn"
    code = main(["run", "--scenario", "denoise-table", "--snr", "5,10,15,20,25,30",
                 "--trials", "3", "--out", str(out)])
    assert code == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 7
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["rows"]) == 6
    for row in summary["rows"]:
        assert row["denoise_after_db_mean"] < row["denoise_before_db_mean"]


def _body(path):
    lines = path.read_text().splitlines()
    header = lines[1].split(",")
    col = header.index("wall_time_s")
    return [ln.split(",")[:col] + ln.split(",")[col + 1:] for ln in lines[1:]]


def test_synthetic_run_is_reproducible(tmp_path):
    args = ["run", "--scenario", "synthetic", "--trials", "1", "--seed", "7", "--snr", "20",
            "--algorithms", "dSBL,dOMP,SVD-KroSBL"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "records.csv", tmp_path / "b" / "records.csv"
    assert _body(a) == _body(b)
    assert a.read_text().splitlines()[0] == b.read_text().splitlines()[0]


def test_provenance_names_config_hash(tmp_path):
    out = tmp_path / "p"
    assert main(["run", "--trials", "1", "--snr", "20", "--algorithms", "dOMP", "--out", str(out)]) == 0
    prov = json.loads((out / "provenance.json").read_text())
    h = prov["config_hash"]
    assert h in (out / "records.csv").read_text().splitlines()[0]
    assert json.loads((out / "summary.json").read_text())["config_hash"] == h
    for key in ("config", "seed", "library_version", "wall_clock_s"):
        assert key in prov


def test_failed_trials_give_exit_code_2(tmp_path, monkeypatch):
    import kronsr.experiments as ex

    def boom(*a, **k):
        raise RuntimeError("nope")

    monkeypatch.setattr(ex, "dsr", boom)
    out = tmp_path / "f"
    assert main(["run", "--trials", "1", "--snr", "20", "--algorithms", "dSBL", "--out", str(out)]) == 2
    assert ",failed" in (out / "records.csv").read_text()
