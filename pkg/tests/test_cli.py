from __future__ import annotations

import json

import pytest

from speedshift.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_PARTIAL, main


@pytest.fixture()
def cfg_file(tmp_path, tiny_config_text):
    path = tmp_path / "tiny.ini"
    path.write_text(tiny_config_text)
    return str(path)


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == EXIT_OK
    assert main([]) == EXIT_CONFIG
    assert main(["collect"]) == EXIT_CONFIG  # missing --speed


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmax_epoch = 3\n")
    assert main(["--config", str(bad), "track-gen", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "nope.ini"), "track-gen"]) == EXIT_CONFIG


def test_report_exit_codes(tmp_path, capsys):
    assert main(["report", str(tmp_path / "empty")]) == EXIT_FAILURE
    assert "missing speed study" in capsys.readouterr().err


def test_global_flags_after_subcommand(tmp_path, capsys):
    assert main(["--seed", "5", "track-gen", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["track-gen", "--seed", "5", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "track.txt").read_text() == (tmp_path / "b" / "track.txt").read_text()


def test_pipeline_end_to_end(tmp_path, cfg_file, capsys):
    d = tmp_path
    run = lambda *a: main(["--config", cfg_file, *a])
    assert run("track-gen", "--out", str(d)) == EXIT_OK
    assert run("collect", "--speed", "0.7", "--duration", "60", "--clean-window-s", "5",
               "--out", str(d / "rec")) == EXIT_OK
    assert run("shift", "--data", str(d / "rec"), "--shift-ms", "50",
               "--out", str(d / "ds")) == EXIT_OK
    assert run("split", "--data", str(d / "ds"), "--scheme", "block",
               "--out", str(d / "split.json")) == EXIT_OK
    assert run("train", "--data", str(d / "ds"), "--split", str(d / "split.json"), "--fold", "4",
               "--out", str(d / "p.json")) == EXIT_OK
    capsys.readouterr()
    assert run("eval-off", "--policy", str(d / "p.json"), "--data", str(d / "ds"),
               "--split", str(d / "split.json"), "--fold", "4") == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["mae"] >= 0 and res["n"] > 0
    assert run("eval-on", "--policy", str(d / "p.json"), "--speed", "0.7", "--laps", "1",
               "--track", str(d / "track.txt"), "--trace", str(d / "trace.jsonl")) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["laps"] == 1
    first = json.loads((d / "trace.jsonl").read_text().splitlines()[0])
    assert {"t", "steer_cmd", "steer_actual", "frame_age_ms"} <= set(first)
    (d / "models").mkdir()
    (d / "p.json").rename(d / "models" / "shift+50.json")
    assert run("sweep", "--models", str(d / "models"), "--shifts", "50", "--delays", "0",
               "--data", str(d / "rec"), "--out", str(d / "delay")) == EXIT_OK
    assert (d / "delay" / "sweep.csv").exists()
    # only the delay study exists, so the report is partial
    assert run("report", str(d), "--no-figures") == EXIT_PARTIAL
    assert "Task pass grid" in capsys.readouterr().out


def test_train_rejects_wrong_stack(tmp_path, cfg_file):
    run = lambda *a: main(["--config", cfg_file, *a])
    assert run("collect", "--speed", "0.7", "--duration", "20", "--out", str(tmp_path / "r")) == 0
    assert run("shift", "--data", str(tmp_path / "r"), "--out", str(tmp_path / "ds")) == 0
    assert run("train", "--data", str(tmp_path / "ds"), "--arch", "multi", "--epochs", "1",
               "--out", str(tmp_path / "p.json")) == EXIT_FAILURE
