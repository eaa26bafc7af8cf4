import subprocess
import sys

import pytest

from conftest import TWO_LINK_URDF
from gradgap import cli
from gradgap import harness as hs


def small_config(tmp_path, **extra):
    (tmp_path / "arm.urdf").write_text(TWO_LINK_URDF)
    sections = {
        "run": {"seed": 3, "out": tmp_path / "out"},
        "model": {"urdf": "arm.urdf"},
        "trajopt": {"K": 3, "horizon": 5, "max_iter": 50},
        "policy": {"epochs": 3},
        "sysid": {"hops": 0, "max_iter": 5, "window_duration": 0.2},
        "rig": {"duration": 0.6, "start": "0.3 -0.4", "goal_offset": "0.1 0.1"},
        "compare": {"workers": 1, "hops": 0, "max_iter": 3, "wall_clock": 30},
    }
    for key, value in extra.items():
        sec, name = key.split("__")
        sections.setdefault(sec, {})[name] = value
    text = "".join(f"[{s}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) for s, kv in sections.items())
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


def test_bundled_config_parses_and_covers_the_schema():
    cfg = cli.parse_config(cli.bundled_config())
    assert len(cfg) == sum(len(v) for v in cli.SCHEMA.values())
    assert cfg["trajopt.K"] == 450 and cfg["integrator.substeps"] == 40


def test_zero_iterations_only_validates(capsys):
    assert cli.main(["pipeline", "--iterations", "0"]) == 0
    assert "config ok" in capsys.readouterr().out


def test_unknown_key_is_a_usage_error(tmp_path, capsys):
    path = small_config(tmp_path, trajopt__kk=3)
    assert cli.main(["pipeline", "--config", path, "--iterations", "0"]) == 2
    assert "unknown key 'kk' in [trajopt]" in capsys.readouterr().err


@pytest.mark.parametrize("text, match", [
    ("[run]\nseed = 1\n", "missing required section"),
    ("[run]\n[model]\n[bogus]\n", "unknown section"),
    ("[run]\nseed = x\n[model]\n", "bad value for run.seed"),
    ("[run]\n[model]\n[sysid]\nsolver = newton\n", "sysid.solver"),
])
def test_config_errors(text, match):
    with pytest.raises(cli.ConfigError, match=match):
        cli.parse_config(text)


def test_short_start_pose_is_rejected(tmp_path, capsys):
    path = small_config(tmp_path, rig__start="0.3")
    assert cli.main(["pipeline", "--config", path, "--iterations", "0"]) == 2
    assert "rig.start needs 2 values" in capsys.readouterr().err


def test_help_lists_every_key_with_its_unit():
    out = subprocess.run([sys.executable, "-m", "gradgap", "pipeline", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sec, keys in cli.SCHEMA.items():
        assert f"[{sec}]" in out.stdout
        for key, (_, _, unit, _) in keys.items():
            assert f"{key} ({unit}" in out.stdout, key


def test_pipeline_writes_one_directory_per_iteration(tmp_path):
    path = small_config(tmp_path)
    assert cli.main(["pipeline", "--config", path, "--iterations", "2"]) == 0
    out = tmp_path / "out"
    for i in (1, 2):
        names = {p.name for p in (out / f"iter_{i}").iterdir()}
        assert names == {"report.txt", "rollout.csv", "params.csv", "task_space.csv", "joints.csv"}
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,K,") and len(lines) == 3
    assert "sysid_s" in (out / "timings.txt").read_text()


def test_seed_override_beats_the_config(tmp_path):
    path = small_config(tmp_path)
    run = cli.load_run(cli.build_parser().parse_args(["--seed", "9", "pipeline", "--config", path]))
    assert run.pipeline.seed == 9
    run = cli.load_run(cli.build_parser().parse_args(["pipeline", "--config", path, "--seed", "8"]))
    assert run.pipeline.seed == 8


def test_component_commands_chain(tmp_path, capsys):
    path = small_config(tmp_path)
    d = tmp_path / "out"
    assert cli.main(["collect", "--config", path, "--K", "2"]) == 0
    assert len(hs.load_dataset(d / "dataset.csv")) == 2
    assert cli.main(["train", "--config", path, "--dataset", str(d / "dataset.csv")]) == 0
    assert (d / "loss.csv").read_text().splitlines()[0] == "epoch,train_mse,val_mse"
    assert cli.main(["rollout", "--config", path, "--policy", str(d / "policy.json")]) == 0
    obs = hs.load_rollout(d / "rollout.csv")
    assert obs.ticks == 15
    assert cli.main(["sysid", "--config", path, "--rollout", str(d / "rollout.csv")]) == 0
    text = (d / "sysid.txt").read_text()
    before, after = (float(line.split(": ")[1]) for line in text.splitlines() if line.startswith("residual_"))
    assert after <= before
    assert cli.main(["compare-solvers", "--config", path, "--rollout", str(d / "rollout.csv")]) == 0
    keys = [line.split(":")[0] for line in (d / "compare.txt").read_text().splitlines()]
    assert keys == ["residual_unbounded", "residual_bounded", "euclid_unbounded", "euclid_bounded"]


def test_overlong_window_names_the_limit(tmp_path, capsys):
    path = small_config(tmp_path)
    rollout = tmp_path / "r.csv"
    import numpy as np

    obs = hs.ObservedRollout(np.arange(11) * 0.04, np.zeros((11, 2)), np.zeros((11, 2)), np.zeros((10, 2)))
    hs.save_rollout(obs, rollout)
    code = cli.main(["compare-solvers", "--config", path, "--rollout", str(rollout), "--window", "4,0.4"])
    assert code == 2
    assert "the limit is 0.24 s" in capsys.readouterr().err


def test_gradcheck_exit_codes(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["gradcheck", "--config", path]) == 0
    assert cli.main(["gradcheck", "--config", path, "--corrupt-param", "5"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "ok" in out
    assert cli.main(["gradcheck", "--config", small_config(tmp_path, sysid__window_duration=0)]) == 2


def test_missing_files_are_usage_errors(tmp_path):
    path = small_config(tmp_path)
    assert cli.main(["train", "--config", path, "--dataset", str(tmp_path / "none.csv")]) == 2
    assert cli.main(["pipeline", "--config", str(tmp_path / "none.ini")]) == 2
