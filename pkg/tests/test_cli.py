import json
import math

import numpy as np
import pytest

from fdi_workbench.cli import fmt, main, read_trace_csv, trace_header
from fdi_workbench.config import config_hash, from_dict, load_config
from fdi_workbench.errors import ConfigError

from .conftest import TTC_CONFIG

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def ttc_dict():
    return tomllib.loads(TTC_CONFIG.read_text())


def test_shipped_config_loads():
    cfg = load_config(TTC_CONFIG)
    m = cfg.model
    assert max(abs(np.linalg.eigvals(m.A - m.B @ m.K))) < 1
    assert max(abs(np.linalg.eigvals(m.A - m.L @ m.C))) == pytest.approx(math.sqrt(0.0932), abs=1e-3)
    assert "ddpg.actor_lr" in cfg.applied_defaults and "model.A" not in cfg.applied_defaults
    assert cfg.config_hash == config_hash(cfg.raw)
    np.testing.assert_array_equal(cfg.x_r.hi, [7.5, 9.0])


def test_hash_changes_with_content():
    d = ttc_dict()
    h1 = from_dict(d).config_hash
    d["seed"] = 8
    assert from_dict(d).config_hash != h1


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["model"].update(sigma_v=[[0.0]]), "sigma_v"),
    (lambda d: d["regions"].pop("x_s"), "regions.x_s"),
    (lambda d: d["model"].update(bogus=1), "bogus"),
    (lambda d: d.update(extra={}), "extra"),
    (lambda d: d["regions"].update(x_r={"lo": [-30.0, -9.0], "hi": [7.5, 9.0]}), "x_r"),
    (lambda d: d["detector"].update(l_max=0), "l_max"),
    (lambda d: d["model"].update(K=[[0.0, 0.0]]), "A - BK"),
])
def test_invalid_configs_rejected(mutate, message):
    d = ttc_dict()
    mutate(d)
    with pytest.raises(ConfigError, match=message):
        from_dict(d)


def test_parse_error_reports_line(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = 1\n[model]\nA = [[1.0, 0.1],\n oops\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(bad)


def test_fmt_nine_significant_digits():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(True) == "1" and fmt(np.int64(7)) == "7"
    assert fmt(float("inf")) == "inf"


def test_synth_region_command(tmp_path, capsys):
    assert main(["synth-region", "--config", str(TTC_CONFIG), "--out", str(tmp_path)]) == 0
    cert = json.loads((tmp_path / "region_certificate.json").read_text())
    assert cert["verified"] and cert["depth"] == pytest.approx(0.1)
    assert "depth" in capsys.readouterr().out


def test_synth_region_noiseless_and_failures(tmp_path):
    d = TTC_CONFIG.read_text().replace("sigma_w = [[1e-4, 0.0], [0.0, 1e-4]]",
                                       "sigma_w = [[0.0, 0.0], [0.0, 0.0]]")
    quiet = tmp_path / "quiet.toml"
    quiet.write_text(d.replace("sigma_v = [[1e-4]]", "sigma_v = [[1e-300]]"))
    assert main(["synth-region", "--config", str(quiet), "--out", str(tmp_path / "q")]) == 0
    loud = tmp_path / "loud.toml"
    loud.write_text(d.replace("sigma_v = [[1e-4]]", "sigma_v = [[50.0]]"))
    assert main(["synth-region", "--config", str(loud), "--out", str(tmp_path / "l")]) == 2
    broken = tmp_path / "broken.toml"
    broken.write_text("seed = 1\n")
    assert main(["synth-region", "--config", str(broken), "--out", str(tmp_path / "b")]) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", str(TTC_CONFIG), "--episodes", "10", "--out", str(out),
                 "--quiet"]) == 0
    return out


def test_train_smoke_writes_everything(trained):
    for role in ("attacker", "detector", "controller"):
        assert (trained / f"{role}.weights").stat().st_size > 0
    lines = (trained / "train_log.csv").read_text().splitlines()
    assert lines[0] == "episode,attacker_return,detector_return,controller_return,empirical_TPR,empirical_FAR"
    assert len(lines) == 11


def test_train_resume_matches_uninterrupted(trained, tmp_path):
    part = tmp_path / "part"
    assert main(["train", "--config", str(TTC_CONFIG), "--episodes", "10", "--out", str(part),
                 "--until", "4", "--quiet"]) == 0
    assert main(["train", "--config", str(TTC_CONFIG), "--episodes", "10", "--out", str(part),
                 "--resume", "--quiet"]) == 0
    for role in ("attacker", "detector", "controller"):
        assert (part / f"{role}.weights").read_bytes() == (trained / f"{role}.weights").read_bytes()
    assert (part / "train_log.csv").read_bytes() == (trained / "train_log.csv").read_bytes()


def test_evaluate_is_deterministic_and_report_consistent(trained, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["evaluate", "--config", str(TTC_CONFIG), "--weights", str(trained),
                     "--seeds", "3", "--out", str(out)]) == 0
        runs.append(out)
    files = sorted(p.relative_to(runs[0]) for p in (runs[0] / "traces").rglob("*.csv"))
    assert len(files) == 12
    for rel in files:
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes()
    report = json.loads((runs[0] / "report.json").read_text())
    assert report["config_hash"] == load_config(TTC_CONFIG).config_hash
    # recompute the no-attack FAR from the persisted traces
    fa = steps = 0
    for path in (runs[0] / "traces" / "no-attack").glob("*.csv"):
        t = read_trace_csv(path)
        fa += int(t["alarm"].sum())
        steps += t["k"].size
    assert report["scenarios"]["no-attack"]["far_per_step"] == pytest.approx(fa / steps)
    header = (runs[0] / files[0]).read_text().splitlines()[0].split(",")
    assert header == trace_header(load_config(TTC_CONFIG).model)


def test_evaluate_rejects_mismatched_weights(trained, tmp_path):
    cfg = tmp_path / "wide.toml"
    cfg.write_text(TTC_CONFIG.read_text() + "\n[ddpg]\nhidden = [8, 8]\n")
    assert main(["evaluate", "--config", str(cfg), "--weights", str(trained), "--seeds", "1",
                 "--out", str(tmp_path / "e")]) == 1


def test_report_command(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--config", str(TTC_CONFIG), "--weights", str(trained),
                 "--seeds", "2", "--out", str(out)]) == 0
    assert main(["report", "--traces", str(out / "traces")]) == 0
    attack = read_trace_csv(out / "traces" / "figures" / "g_th_attack.csv")
    np.testing.assert_array_equal(attack["exceeds"], attack["g"] > attack["Th"])
    np.testing.assert_array_equal(attack["exceeds"], attack["alarm"])
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--traces", str(empty)]) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FDI_BENCH_OUT", str(tmp_path / "envout"))
    assert main(["synth-region", "--config", str(TTC_CONFIG)]) == 0
    assert (tmp_path / "envout" / "synth" / "region_certificate.json").exists()
