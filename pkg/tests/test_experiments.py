import csv
import json
import os

import numpy as np
import pytest

from lalqr.config import TrainConfig
from lalqr.errors import StageError, SynthesisError
from lalqr.expert import PlannerConfig
from lalqr.experiments import ExperimentSettings, Lab, eigen_trace_summary, run_experiment


def settings(out, **kw):
    train = TrainConfig(episodes=3, epochs=2, batch_size=64, latent_dim=3, diagnostic_every=2, il_threshold=10.0)
    return ExperimentSettings(env="double_integrator", out=str(out), train=train,
                              planner=PlannerConfig(horizon=10, max_iterations=2), eval_episodes=3,
                              noisy_eval_episodes=2, expert_eval_episodes=1, trace_seeds=2, **kw)


@pytest.fixture(scope="module")
def main_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("main")
    return out, run_experiment("main", settings(out))


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_main_writes_everything(main_run):
    out, res = main_run
    assert [r["controller"] for r in res["rows"]] == ["expert", "lolqr", "il", "lalqr"]
    d = out / "main"
    for name in ("main.csv", "report.json", "total_cost_mean.png", "time_ms_mean.png",
                 "trace_lalqr.csv", "training_losses.png", "model_lalqr.json", "model_il.json"):
        assert (d / name).exists(), name
    report = json.loads((d / "report.json").read_text())
    assert report["error"] is None and len(report["rows"]) == 4
    assert len(read_rows(d / "main.csv")) == 4


def test_main_deterministic_apart_from_timing(tmp_path, main_run):
    _, first = main_run
    again = run_experiment("main", settings(tmp_path))
    timing = {"time_ms_mean", "time_ms_std"}
    for a, b in zip(first["rows"], again["rows"]):
        assert {k: v for k, v in a.items() if k not in timing} == {k: v for k, v in b.items() if k not in timing}


def test_dataset_cache_reused(main_run):
    out, _ = main_run
    name = "double_integrator_clean_seed0_E3.txt"
    assert sorted(os.listdir(out / "data")) == [name, name + ".json"]
    lab = Lab(settings(out))
    assert len(lab.dataset()) == 300
    assert lab.collection_seconds() > 0 and lab.collection_seconds(noisy=True) is None


def test_unseen_and_imperfect(tmp_path):
    lab = Lab(settings(tmp_path))
    res = run_experiment("unseen_init", lab=lab)
    assert all(r["episodes"] == 1 for r in res["rows"])
    assert (tmp_path / "unseen_init" / "rollouts.png").exists()
    res = run_experiment("imperfect_expert", lab=lab)
    assert [r["controller"] for r in res["rows"]] == ["lalqr", "il"]
    assert sorted(f for f in os.listdir(tmp_path / "data") if f.endswith(".txt")) == [
        "double_integrator_clean_seed0_E3.txt", "double_integrator_noisy_seed0_E3.txt"]


def test_structure_ablation_tolerates_failed_synthesis(tmp_path, monkeypatch):
    import lalqr.harness as harness

    real = harness.latent.synthesize

    def flaky(system, *args):
        if system.dynamics.structure == "diagonal":
            raise SynthesisError("no stabilizing gain", system=system)
        return real(system, *args)

    monkeypatch.setattr(harness.latent, "synthesize", flaky)
    res = run_experiment("ablate_structure", settings(tmp_path))
    rows = {r["controller"]: r for r in res["rows"]}
    assert set(rows) == {"companion", "full", "diagonal"}
    assert rows["diagonal"]["failed"] == 3 and np.isinf(rows["diagonal"]["total_cost_mean"])
    assert res["train"]["diagonal"]["synthesized"] is False
    assert (tmp_path / "ablate_structure" / "model_diagonal.json").exists()


def test_eigen_trace_summary_and_files(tmp_path):
    res = run_experiment("eigen_trace", settings(tmp_path))
    assert set(res["summary"]) == {"companion", "full", "diagonal"}
    assert all(v["seeds"] == 2 for v in res["summary"].values())
    assert (tmp_path / "eigen_trace" / "eigen_trace.png").exists()


def test_eigen_summary_statistics():
    nan = np.nan
    tr = lambda vals: np.array([[i, 0, 0, v] for i, v in enumerate(vals)], dtype=float)
    s = eigen_trace_summary({"a_seed0": tr([10, nan, 1]), "a_seed1": tr([100, nan, 1])})["a"]
    assert s["initial"] == 55 and s["final"] == 1
    assert s["ratio"] == pytest.approx((0.1 + 0.01) / 2)
    assert s["trace_variance"] == pytest.approx(0.25 / 2)
    assert s["final_defined"] == 2 and s["checkpoints_defined"] == [2, 2]


def test_eigen_summary_undefined_final():
    nan = np.nan
    tr = lambda vals: np.array([[i, 0, 0, v] for i, v in enumerate(vals)], dtype=float)
    s = eigen_trace_summary({"d_seed0": tr([10, 2, nan]), "d_seed1": tr([10, 4, 5])})["d"]
    assert np.isnan(s["final"]) and s["final_defined"] == 1
    assert s["last_finite"] == pytest.approx(3.5)
    # variance only over steps 0 and 1, where both seeds are defined
    assert s["trace_variance"] == pytest.approx(np.var(np.log10([2, 4])) / 2)


def test_stage_error_writes_partial_report(tmp_path, monkeypatch):
    import lalqr.experiments as ex

    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(ex, "train_lalqr", boom)
    with pytest.raises(StageError) as info:
        run_experiment("main", settings(tmp_path))
    assert info.value.stage == "train[lalqr]"
    report = json.loads((tmp_path / "main" / "report.json").read_text())
    assert report["error"]["stage"] == "train[lalqr]"


def test_unknown_experiment(tmp_path):
    with pytest.raises(ValueError):
        run_experiment("nope", settings(tmp_path))
