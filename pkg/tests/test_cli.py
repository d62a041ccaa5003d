import json

import pytest

from lalqr.cli import main

FAST = ["--env", "double_integrator", "--seed", "0"]


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.yaml"
    path.write_text("epochs: 3\nbatch_size: 64\nplanner_horizon: 10\nplanner_max_iterations: 2\neval_episodes: 2\n")
    return str(path)


@pytest.fixture(scope="module")
def collected(tmp_path_factory, config):
    out = tmp_path_factory.mktemp("collect")
    assert main(["collect", *FAST, "--episodes", "2", "--noisy-expert", "--config", config, "--out", str(out)]) == 0
    return out


def test_collect_writes_dataset(collected):
    report = json.loads((collected / "collect.json").read_text())
    assert report["records"] == 200 and report["noisy_expert"] is True
    assert (collected / "dataset.txt").exists()


def test_train_then_eval(tmp_path, collected, config, capsys):
    data = str(collected / "dataset.txt")
    assert main(["train", *FAST, "--config", config, "--data", data, "--out", str(tmp_path)]) == 0
    for name in ("model.json", "trace.csv", "train.json", "training_losses.png"):
        assert (tmp_path / name).exists()
    capsys.readouterr()
    model = str(tmp_path / "model.json")
    assert main(["eval", *FAST, "--config", config, "--controller", "lalqr", "--model", model,
                 "--episodes", "2", "--out", str(tmp_path)]) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert row["controller"] == "lalqr" and row["episodes"] == 2


def test_eval_lolqr_unseen(tmp_path, config):
    assert main(["eval", *FAST, "--config", config, "--controller", "lolqr", "--init", "unseen",
                 "--episodes", "1", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "eval.json").read_text())["init"] == "unseen"


def test_structure_and_ablation_flags(tmp_path, collected, config):
    data = str(collected / "dataset.txt")
    assert main(["train", *FAST, "--config", config, "--data", data, "--structure", "full",
                 "--no-cost-loss", "--latent-dim", "4", "--out", str(tmp_path)]) == 0
    cfg = json.loads((tmp_path / "train.json").read_text())["config"]
    assert cfg["structure"] == "full" and cfg["use_cost_loss"] is False and cfg["latent_dim"] == 4


def test_diagnose(tmp_path, collected, config):
    data = str(collected / "dataset.txt")
    assert main(["diagnose", *FAST, "--config", config, "--data", data, "--seeds", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "diagnose.csv").read_text().count("\n") == 3
    assert (tmp_path / "eigen_trace.png").exists()


def test_missing_model_is_stage_error(tmp_path, config, capsys):
    code = main(["eval", *FAST, "--config", config, "--controller", "il", "--out", str(tmp_path)])
    assert code == 2
    assert "error in stage load" in capsys.readouterr().err


def test_bad_data_file_is_stage_error(tmp_path, config, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("nope\n")
    assert main(["train", *FAST, "--config", config, "--data", str(bad), "--out", str(tmp_path)]) == 2
    assert "error in stage load" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("epochz: 1\n")
    assert main(["train", *FAST, "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "error in stage config" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code != 0
