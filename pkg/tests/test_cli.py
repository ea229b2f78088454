import json
from dataclasses import replace

import pandas as pd
import pytest

from opdgeo.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, parse_seeds
from opdgeo.config import config_digest, load_config
from opdgeo.errors import ConfigError
from opdgeo.store import manifest_digest, open_run, write_run
from opdgeo.toylab.trainer import train


def run_dirs(root):
    return sorted(path.parent for path in root.glob("*/manifest.json"))


def _train_section(tiny_cfg, **changes):
    return tiny_cfg.to_dict()["train"] | changes


@pytest.fixture
def opd_run_dir(tiny_cfg, base, teacher, tmp_path):
    run = train(tiny_cfg, 0, base, teacher, mode="opd")
    return write_run(run, tiny_cfg, tmp_path / "stored", teacher.get_params()).directory


def test_parse_seeds():
    assert parse_seeds("1, 2,3") == (1, 2, 3)
    with pytest.raises(ConfigError):
        parse_seeds("1,x")
    with pytest.raises(ConfigError):
        parse_seeds(" , ")


def test_unknown_config_key_exits_with_config_error(config_file, tmp_path):
    assert main(["train", "--config", str(config_file(bogus=1)), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_wrongly_typed_config_value_exits_with_config_error(config_file, tiny_cfg, tmp_path):
    path = config_file(train=_train_section(tiny_cfg, lr="0.5"))
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert not run_dirs(tmp_path)


def test_missing_config_exits_with_config_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG


def test_bad_seeds_exit_with_config_error(config_file, tmp_path):
    code = main(["train", "--config", str(config_file()), "--seeds", "a", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_missing_run_exits_with_runtime_error(tmp_path):
    assert main(["analyze", str(tmp_path / "absent")]) == EXIT_RUNTIME
    assert main(["effopd-report", str(tmp_path / "absent")]) == EXIT_RUNTIME


def test_train_single_step(config_file, tiny_cfg, tmp_path, capsys):
    path = config_file(train=_train_section(tiny_cfg, steps=1))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK

    (run_dir,) = run_dirs(tmp_path / "out")
    run = open_run(run_dir)
    assert run.steps == [0, 1]
    assert run.run_id == f"opd-s42-{config_digest(load_config(path))[:12]}"
    assert (run_dir / "metrics" / "train.csv").is_file()
    assert (run_dir / "teacher" / "0.json").is_file()
    assert "=== Run summary (opd, seed 42) ===" in capsys.readouterr().out


def test_train_with_seed_override(config_file, tmp_path):
    code = main(["train", "--config", str(config_file()), "--seeds", "3,4", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert sorted(open_run(d).seed for d in run_dirs(tmp_path)) == [3, 4]


def test_train_is_deterministic(config_file, tmp_path):
    path = str(config_file())
    for root in ("a", "b"):
        assert main(["train", "--config", path, "--out", str(tmp_path / root)]) == EXIT_OK
    (a,) = run_dirs(tmp_path / "a")
    (b,) = run_dirs(tmp_path / "b")
    assert a.name == b.name
    assert manifest_digest(a) == manifest_digest(b)


def test_effopd_train_and_report(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config_file(mode="effopd")), "--out", str(out)]) == EXIT_OK
    assert main(["train", "--config", str(config_file(name="opd.json")), "--out", str(out)]) == EXIT_OK
    effopd_dir = next(d for d in run_dirs(out) if d.name.startswith("effopd-"))
    opd_dir = next(d for d in run_dirs(out) if d.name.startswith("opd-"))
    assert (effopd_dir / "events.jsonl").is_file()

    code = main(["effopd-report", str(effopd_dir), "--against", str(opd_dir)])
    assert code == EXIT_OK
    events = pd.read_csv(effopd_dir / "effopd" / "events.csv")
    assert events["t"].tolist() == [1, 2, 4]
    report = json.loads((effopd_dir / "effopd" / "report.json").read_text())
    assert report["events"] == 3
    assert {"vanilla_steps", "effopd_steps", "speedup"} <= set(report)
    assert "=== EffOPD" in capsys.readouterr().out


def test_effopd_report_needs_event_log(opd_run_dir):
    assert main(["effopd-report", str(opd_run_dir)]) == EXIT_CONFIG


def test_quadsim_report(config_file, tmp_path, capsys):
    path = config_file()
    assert main(["quadsim", "--config", str(path), "--out", str(tmp_path)]) == EXIT_OK
    digest = config_digest(load_config(path))
    report = json.loads((tmp_path / f"quadsim-{digest[:12]}" / "report.json").read_text())
    assert report["config_digest"] == digest
    assert report["oracle"]["pass"]
    assert report["lockin"]["holds"]
    assert "=== Quadratic theory ===" in capsys.readouterr().out


def test_quadsim_seed_override(config_file, tmp_path):
    assert main(["quadsim", "--config", str(config_file()), "--seeds", "3", "--out", str(tmp_path)]) == EXIT_OK
    (report_path,) = tmp_path.glob("quadsim-*/report.json")
    assert json.loads(report_path.read_text())["seed"] == 3


def test_quadsim_divergent_step_size(config_file, tiny_cfg, tmp_path):
    quadsim = tiny_cfg.to_dict()["quadsim"] | {"eta_fraction": 2.5}
    code = main(["quadsim", "--config", str(config_file(quadsim=quadsim)), "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME


def test_output_root_from_environment(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("OPDGEO_OUT", str(tmp_path / "env"))
    assert main(["quadsim", "--config", str(config_file())]) == EXIT_OK
    assert list((tmp_path / "env").glob("quadsim-*/report.json"))


def test_scale_analysis_of_untrained_run_fails(tiny_cfg, base, teacher, tmp_path):
    cfg = replace(tiny_cfg, train=replace(tiny_cfg.train, steps=0))
    run = train(cfg, 0, base, teacher, mode="opd")
    run_dir = write_run(run, cfg, tmp_path / "stored", teacher.get_params()).directory
    code = main(["analyze", str(run_dir), "--select", "scale", "--out", str(tmp_path / "a")])
    assert code == EXIT_RUNTIME


def test_analyze_selection(opd_run_dir, tmp_path):
    out = tmp_path / "analysis"
    assert main(["analyze", str(opd_run_dir), "--select", "metrics,align", "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.csv").is_file()
    align = pd.read_csv(out / "align.csv")
    assert align["similarity"].iloc[-1] == pytest.approx(1.0)
    assert not (out / "sweep.csv").exists()


def test_analyze_defaults_to_run_directory(opd_run_dir):
    assert main(["analyze", str(opd_run_dir)]) == EXIT_OK
    assert (opd_run_dir / "analysis" / "report.json").is_file()


def test_analyze_rejects_unknown_selection(opd_run_dir):
    assert main(["analyze", str(opd_run_dir), "--select", "metrics,bogus"]) == EXIT_CONFIG


def test_reproduce_writes_seed_table_and_summary(config_file, tiny_cfg, teacher, tmp_path, monkeypatch, capsys):
    # the configured teacher would be an untrained copy of the base
    monkeypatch.setattr("opdgeo.cli.make_teacher", lambda *args, **kwargs: teacher)
    path = config_file(train=_train_section(tiny_cfg, steps=6))
    code = main(["reproduce", "--config", str(path), "--seeds", "0,1", "--out", str(tmp_path)])
    assert code == EXIT_OK

    digest = config_digest(replace(load_config(path), seeds=(0, 1)))
    output_dir = tmp_path / f"reproduce-{digest[:12]}"
    seeds = pd.read_csv(output_dir / "seeds.csv")
    assert seeds["seed"].tolist() == [0, 1]
    assert set(seeds["config_digest"]) == {digest}
    summary = json.loads((output_dir / "summary.json").read_text())
    assert summary["config_digest"] == digest
    assert summary["seeds"] == [0, 1]
    assert "effopd_speedup" in summary["checks"]
    assert "=== Reproduction (2 seeds) ===" in capsys.readouterr().out


def test_reproduce_rejects_bad_seeds(config_file, tmp_path):
    code = main(["reproduce", "--config", str(config_file()), "--seeds", "x", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
