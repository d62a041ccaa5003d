"""End-to-end experiment protocols and their result files.

Every protocol writes into one output directory:

* ``report.json`` -- configuration, result rows and the list of files;
* ``<name>.csv`` -- one row per controller or variant;
* ``trace_<variant>.csv`` -- training traces ``(step, consistency, cost, eigen)``;
* ``*.png`` -- figures of the above.

Datasets are cached under ``<out>/data`` keyed by environment, seed,
episode count and expert kind, so protocols sharing data collect it once.
"""
import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from lalqr import baselines, latent
from lalqr.config import TrainConfig
from lalqr.data import load_dataset, save_dataset
from lalqr.envs import make_env
from lalqr.errors import LalqrError, StageError, SynthesisError
from lalqr.expert import IlqrPlanner, NoisyExpert, default_planner_config
from lalqr.harness import TIMING_COLUMNS, collect, evaluate, failed_report, train_lalqr

log = logging.getLogger(__name__)

EXPERIMENTS = ("main", "imperfect_expert", "unseen_init", "ablate_structure", "ablate_cost_loss", "eigen_trace")


@dataclass(frozen=True)
class ExperimentSettings:
    """Knobs shared by every protocol.

    Attributes:
        env: environment name.
        out: output directory.
        train: training configuration (its seed also seeds collection).
        planner: iLQR configuration of the expert.
        eval_episodes: episodes per evaluation in train-init mode.
        noisy_eval_episodes: episodes for the imperfect-expert comparison.
        expert_eval_episodes: episodes for evaluating the (slow) expert;
            ``None`` uses ``eval_episodes``.
        trace_seeds: training seeds of the eigen-trace protocol.
        data_dir: dataset cache; defaults to ``<out>/data``.
    """

    env: str = "cartpole"
    out: str = "results"
    train: TrainConfig = TrainConfig()
    planner: object = None
    eval_episodes: int = 100
    noisy_eval_episodes: int = 20
    expert_eval_episodes: int = None
    trace_seeds: int = 3
    data_dir: str = None


class Stage:
    """Context manager that re-raises failures as :class:`StageError`."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


class Lab:
    """Caches environment, expert, datasets and trained models across protocols."""

    def __init__(self, settings):
        self.s = settings
        self.env = make_env(settings.env)
        self.planner_config = settings.planner or default_planner_config(settings.env)
        os.makedirs(settings.out, exist_ok=True)
        self.data_dir = settings.data_dir or os.path.join(settings.out, "data")
        self._data = {}
        self._lolqr = None

    def expert(self):
        return IlqrPlanner(self.env, self.planner_config)

    def _data_path(self, key):
        cfg = self.s.train
        return os.path.join(self.data_dir, f"{self.env.name}_{key}_seed{cfg.seed}_E{cfg.episodes}.txt")

    def dataset(self, noisy=False):
        key = "noisy" if noisy else "clean"
        if key in self._data:
            return self._data[key]
        cfg = self.s.train
        path = self._data_path(key)
        if os.path.exists(path):
            with Stage("load"):
                data = load_dataset(path)
        else:
            with Stage("collect"):
                actor = self.expert()
                if noisy:
                    actor = NoisyExpert(actor, np.random.default_rng([cfg.seed, 1]))
                start = time.perf_counter()
                data = collect(self.env, actor, cfg.episodes, cfg.seed)
                seconds = time.perf_counter() - start
                os.makedirs(self.data_dir, exist_ok=True)
                save_dataset(path, data)
                with open(path + ".json", "w") as fh:
                    json.dump({"episodes": cfg.episodes, "records": len(data), "collect_seconds": seconds}, fh)
        self._data[key] = data
        return data

    def collection_seconds(self, noisy=False):
        """Wall time recorded when the cached dataset was collected, or None."""
        path = self._data_path("noisy" if noisy else "clean") + ".json"
        if not os.path.exists(path):
            return None
        with open(path) as fh:
            return json.load(fh)["collect_seconds"]

    def lolqr(self):
        if self._lolqr is None:
            with Stage("lolqr"):
                self._lolqr = baselines.fit_lolqr(self.env)
        return self._lolqr

    def train(self, data, tag, allow_failure=False, **overrides):
        """Train one LaLQR variant.

        With ``allow_failure`` a final synthesis failure returns the result
        with ``controller=None`` (a failed variant) instead of aborting.
        """
        cfg = replace(self.s.train, **overrides)
        with Stage(f"train[{tag}]"):
            try:
                return train_lalqr(data, cfg, self.env, self.lolqr().feedback)
            except SynthesisError as exc:
                if not allow_failure or exc.result is None:
                    raise
                log.warning("%s: %s", tag, exc)
                return exc.result

    def train_il(self, data):
        with Stage("train[il]"):
            try:
                policy, _ = baselines.train_il(data, config=self.s.train, env=self.env)
            except LalqrError as exc:
                if getattr(exc, "result", None) is None:
                    raise
                log.warning("imitation learning missed its target: %s", exc)
                policy = exc.result[0]
            return policy

    def evaluate(self, controller, tag, episodes=None, init_mode="train", **kw):
        if controller is None:
            return failed_report(tag, episodes or self.s.eval_episodes)
        with Stage(f"evaluate[{tag}]"):
            return evaluate(self.env, controller, episodes or self.s.eval_episodes, init_mode,
                            seed=self.s.train.seed + 1000, tag=tag, **kw)


# ---------------------------------------------------------------------------
# result files
# ---------------------------------------------------------------------------


def write_table(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "consistency", "cost", "eigen"])
        for step, cons, cst, eig in trace:
            w.writerow([int(step), repr(float(cons)), repr(float(cst)), repr(float(eig))])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(_json_safe(report), fh, indent=2, sort_keys=True)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_bars(path, rows, key, title):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = [r["controller"] for r in rows]
    vals = [r[key] if np.isfinite(r[key]) else np.nan for r in rows]
    ax.bar(names, vals, color="0.5")
    ax.set_ylabel(key)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_traces(path, traces, column, title, log_scale=True):
    """``traces`` maps a label to a trace array; ``column`` indexes (step, cons, cost, eigen)."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, tr in traces.items():
        rows = tr[~np.isnan(tr[:, column])]
        ax.plot(rows[:, 0], rows[:, column], label=label)
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("training step")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_rollouts(path, reports, dt, labels=("position", "angle")):
    plt = _plt()
    fig, axes = plt.subplots(1, len(labels), figsize=(9, 3.2))
    axes = np.atleast_1d(axes)
    for rep in reports:
        xs = rep.traces[0][0]
        t = np.arange(len(xs)) * dt
        for i, ax in enumerate(axes):
            ax.plot(t, xs[:, i], label=rep.tag)
    for ax, lab in zip(axes, labels):
        ax.set_xlabel("time [s]")
        ax.set_ylabel(lab)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def _main(lab, res):
    data = lab.dataset()
    lal = lab.train(data, "lalqr")
    res["train"]["lalqr"] = _train_summary(lal)
    res["traces"]["lalqr"] = lal.trace
    il = lab.train_il(data)
    s = lab.s
    reports = [
        lab.evaluate(lab.expert(), "expert", episodes=s.expert_eval_episodes),
        lab.evaluate(lab.lolqr(), "lolqr"),
        lab.evaluate(il, "il"),
        lab.evaluate(lal.controller, "lalqr"),
    ]
    res["models"] = {"lalqr": lal, "il": il}
    return reports


def _imperfect(lab, res):
    data = lab.dataset(noisy=True)
    lal = lab.train(data, "lalqr")
    res["train"]["lalqr"] = _train_summary(lal)
    res["traces"]["lalqr"] = lal.trace
    il = lab.train_il(data)
    n = lab.s.noisy_eval_episodes
    reports = [lab.evaluate(lal.controller, "lalqr", episodes=n, keep_traces=True),
               lab.evaluate(il, "il", episodes=n, keep_traces=True)]
    res["models"] = {"lalqr": lal, "il": il}
    return reports


def _unseen(lab, res):
    data = lab.dataset()
    lal = lab.train(data, "lalqr")
    res["train"]["lalqr"] = _train_summary(lal)
    res["traces"]["lalqr"] = lal.trace
    il = lab.train_il(data)
    # the unseen initial state is fixed, so one episode per controller suffices
    reports = [lab.evaluate(c, tag, episodes=1, init_mode="unseen", keep_traces=True)
               for c, tag in ((lab.expert(), "expert"), (lab.lolqr(), "lolqr"), (il, "il"),
                              (lal.controller, "lalqr"))]
    res["models"] = {"lalqr": lal, "il": il}
    return reports


def _ablate_structure(lab, res):
    data = lab.dataset()
    reports, models = [], {}
    for structure in ("companion", "full", "diagonal"):
        r = lab.train(data, structure, allow_failure=True, structure=structure)
        res["train"][structure] = _train_summary(r)
        res["traces"][structure] = r.trace
        models[structure] = r
        reports.append(lab.evaluate(r.controller, structure))
    res["models"] = models
    return reports


def _ablate_cost_loss(lab, res):
    data = lab.dataset()
    reports, models = [], {}
    for tag, flag in (("lalqr", True), ("no_cost_loss", False)):
        r = lab.train(data, tag, allow_failure=True, use_cost_loss=flag)
        res["train"][tag] = _train_summary(r)
        res["traces"][tag] = r.trace
        models[tag] = r
        reports.append(lab.evaluate(r.controller, tag))
    res["models"] = models
    return reports


def _eigen_trace(lab, res):
    data = lab.dataset()
    base = lab.s.train.seed
    models = {}
    for structure in ("companion", "full", "diagonal"):
        for k in range(lab.s.trace_seeds):
            tag = f"{structure}_seed{base + k}"
            r = lab.train(data, tag, allow_failure=True, structure=structure, seed=base + k)
            res["train"][tag] = _train_summary(r)
            res["traces"][tag] = r.trace
            models[tag] = r
    res["models"] = models
    res["summary"] = eigen_trace_summary({k: v.trace for k, v in models.items()})
    return []


def eigen_trace_summary(traces):
    """Per structure: mean initial/final diagnostic and across-seed variance.

    ``final`` is the diagnostic at the last step of training and is NaN when
    any seed had no stabilizing gain there (the diagnostic is undefined);
    ``final_defined`` counts the seeds where it exists and ``last_finite``
    averages each seed's last defined value.  ``trace_variance`` is the mean
    over checkpoints defined for every seed of the across-seed variance of
    ``log10(diagnostic)``.
    """
    groups = {}
    for tag, tr in traces.items():
        groups.setdefault(tag.rsplit("_seed", 1)[0], []).append(tr)
    out = {}
    for structure, trs in groups.items():
        series = [{row[0]: row[3] for row in tr if np.isfinite(row[3])} for tr in trs]
        common = sorted(set.intersection(*(set(d) for d in series)))
        stack = np.log10(np.maximum(np.array([[d[k] for k in common] for d in series]), 1e-300))
        initial = np.array([tr[0, 3] for tr in trs])
        final = np.array([tr[-1, 3] for tr in trs])
        out[structure] = {
            "initial": float(np.mean(initial)),
            "final": float(np.mean(final)),
            "final_defined": int(np.sum(np.isfinite(final))),
            "last_finite": float(np.mean([d[max(d)] for d in series if d])) if any(series) else float("nan"),
            "ratio": float(np.mean(final / initial)),
            "trace_variance": float(np.mean(np.var(stack, axis=0))) if common else float("nan"),
            "checkpoints_defined": [len(d) for d in series],
            "seeds": len(trs),
        }
    return out


PROTOCOLS = {
    "main": _main,
    "imperfect_expert": _imperfect,
    "unseen_init": _unseen,
    "ablate_structure": _ablate_structure,
    "ablate_cost_loss": _ablate_cost_loss,
    "eigen_trace": _eigen_trace,
}


def _train_summary(r):
    return {"final_loss": r.final_loss, "final_consistency": r.final_consistency,
            "final_cost": r.final_cost, "wall_time": r.wall_time,
            "closed_loop_radius": r.controller.closed_loop_radius() if r.controller else float("nan"),
            "synthesized": r.controller is not None,
            "eigen_initial": float(r.trace[0, 3]),
            "eigen_final": float(r.trace[-1, 3])}


def run_experiment(name, settings=None, lab=None):
    """Run one protocol end to end and write its result files.

    Returns a dict with ``rows`` (table rows), ``reports`` (EvalReports),
    ``train`` (training summaries), ``traces``, ``models`` and ``files``.
    On a stage failure the partial report is written before the
    :class:`StageError` propagates.
    """
    if name not in PROTOCOLS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    if settings is None:
        settings = lab.s if lab is not None else ExperimentSettings()
    lab = lab or Lab(settings)
    out = os.path.join(settings.out, name)
    os.makedirs(out, exist_ok=True)
    res = {"experiment": name, "train": {}, "traces": {}, "models": {}, "files": []}
    error = None
    reports = []
    try:
        reports = PROTOCOLS[name](lab, res)
    except StageError as exc:
        error = exc
    rows = [r.row() for r in reports]
    res["rows"] = rows
    res["reports"] = reports
    files = []
    if rows:
        table = os.path.join(out, f"{name}.csv")
        write_table(table, rows)
        files.append(table)
        for key in ("total_cost_mean", "time_ms_mean"):
            fig = os.path.join(out, f"{key}.png")
            plot_bars(fig, rows, key, f"{name}: {key}")
            files.append(fig)
    for tag, tr in res["traces"].items():
        path = os.path.join(out, f"trace_{tag}.csv")
        write_trace(path, tr)
        files.append(path)
    if res["traces"]:
        fig = os.path.join(out, "training_losses.png")
        plot_traces(fig, {f"{k} consistency": v for k, v in res["traces"].items()}, 1, "consistency loss")
        files.append(fig)
        if any(np.any(~np.isnan(tr[:, 3])) for tr in res["traces"].values()):
            fig = os.path.join(out, "eigen_trace.png")
            plot_traces(fig, res["traces"], 3, "eigen diagnostic")
            files.append(fig)
    if any(r.traces for r in reports):
        fig = os.path.join(out, "rollouts.png")
        plot_rollouts(fig, [r for r in reports if r.traces], lab.env.spec.dt)
        files.append(fig)
    for tag, model in res["models"].items():
        path = os.path.join(out, f"model_{tag}.json")
        if isinstance(model, baselines.IlPolicy):
            baselines.save_il(path, model)
        else:
            latent.save_system(path, model.system, model.controller)
        files.append(path)
    res["files"] = files
    report = {
        "experiment": name,
        "env": settings.env,
        "train_config": asdict(settings.train),
        "planner_config": asdict(lab.planner_config),
        "rows": rows,
        "train": res["train"],
        "summary": res.get("summary", {}),
        "timing_columns": list(TIMING_COLUMNS),
        "files": [os.path.basename(f) for f in files],
        "error": None if error is None else {"stage": error.stage, "message": str(error.cause)},
    }
    write_report(os.path.join(out, "report.json"), report)
    if error is not None:
        raise error
    return res
