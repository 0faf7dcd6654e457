import json

import pytest

from fnhomog.harness.cli import main
from fnhomog.harness.config import ConfigError, parse_config
from fnhomog.harness.csvio import read_csv
from fnhomog.harness.run import run

OBSTACLE = """
experiment.kind = obstacle
field.kind = checkerboard
schedule.t = 4
schedule.alpha = -0.5, 0.0, 0.5
schedule.seeds = 0, 1
"""


def test_defaults():
    cfg = parse_config("experiment.kind = solve")
    assert cfg["numerical.tol"] == 1e-8
    assert cfg["numerical.eta"] == 0.02
    assert cfg["schedule.cert_t"] == 0.0
    assert cfg.hash == parse_config("experiment.kind = solve\n# comment\n").hash


def test_fractions_and_overrides():
    cfg = parse_config("experiment.kind = solve\nschedule.eps = 1/4, 1/8",
                       {"numerical.h": "1/16"})
    assert cfg["schedule.eps"] == (0.25, 0.125)
    assert cfg["numerical.h"] == 1 / 16


def test_errors_collected():
    text = """experiment.kind = fbar
numerical.eta = 0.7
numerical.eta = 0.1
numerical.tol = abc
bogus.key = 1
no equals sign
"""
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    errs = exc.value.errors
    assert any("duplicate key" in e and "line 3" in e for e in errs)
    assert any("unknown key" in e for e in errs)
    assert any("line 6" in e for e in errs)
    assert any("numerical.tol" in e and "wrong type" in e for e in errs)
    assert any("numerical.eta" in e for e in errs)
    assert len(errs) >= 5


def test_cross_checks():
    with pytest.raises(ConfigError):
        parse_config("experiment.kind = solve\nschedule.eps = 1/8, 1/4")
    with pytest.raises(ConfigError):
        parse_config("experiment.kind = solve\nfield.values = 1, 2, 3")
    with pytest.raises(ConfigError):
        parse_config("experiment.kind = solve\noperator.variant = linear")
    with pytest.raises(ConfigError):
        parse_config("experiment.kind = counterexample\nschedule.cert_t = 5")
    with pytest.raises(ConfigError):
        parse_config("")


def test_run_writes_csv(tmp_path):
    cfg = parse_config(OBSTACLE)
    rec = run(cfg, out=tmp_path / "a", cache_dir=tmp_path / "c")
    assert rec.error is None and rec.ok
    rows = read_csv(rec.outputs["obstacle"])
    assert len(rows) == 6
    assert json.loads((tmp_path / "a" / "run_record.json").read_text())["kind"] == "obstacle"


def test_rerun_and_resume_identical(tmp_path):
    cfg = parse_config(OBSTACLE)
    a = run(cfg, out=tmp_path / "a", cache_dir=tmp_path / "c1")
    b = run(cfg, out=tmp_path / "b", cache_dir=tmp_path / "c2")
    # second run with a warm cache resumes without recomputing
    c = run(cfg, out=tmp_path / "c", cache_dir=tmp_path / "c1")
    raw = [open(r.outputs["obstacle"], "rb").read() for r in (a, b, c)]
    assert raw[0] == raw[1] == raw[2]
    assert c.wall_time < a.wall_time


def test_partial_failure_recorded(tmp_path):
    cfg = parse_config("experiment.kind = solve\nschedule.eps = 1/64\nnumerical.budget = 10")
    rec = run(cfg, out=tmp_path, use_cache=False)
    assert not rec.ok
    assert "BudgetError" in rec.error


def test_cli(tmp_path, capsys):
    conf = tmp_path / "obs.conf"
    conf.write_text(OBSTACLE)
    code = main(["obstacle", "--config", str(conf), "--out", str(tmp_path / "o"), "--no-cache",
                 "--seed", "3"])
    assert code == 0
    rows = read_csv(tmp_path / "o" / "obstacle.csv")
    assert {r["seed"] for r in rows} == {"3"}
    assert main(["fbar", "--config", str(conf)]) == 2
    assert "does not match" in capsys.readouterr().err
    assert main(["solve", "--set", "numerical.eta=2", "--out", str(tmp_path)]) == 2


def test_certificate_table(tmp_path):
    text = """experiment.kind = counterexample
field.kind = trap
schedule.eps = 1/8
schedule.cert_t = 11
"""
    rec = run(parse_config(text), out=tmp_path, use_cache=False)
    assert rec.error is None, rec.error
    rows = read_csv(rec.outputs["certificate"])
    assert rows and all(r["ok"] == "1" for r in rows)
    assert rec.verdicts["certificates"]
