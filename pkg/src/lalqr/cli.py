"""Command-line entry point: ``lalqr <subcommand> [flags]``.

Subcommands:

* ``collect`` -- roll out the expert and write a dataset file;
* ``train`` -- fit a latent model (and gain) to a dataset;
* ``eval`` -- closed-loop evaluation of one controller;
* ``experiment NAME`` -- a full protocol (see :mod:`lalqr.experiments`);
* ``diagnose`` -- eigen-diagnostic training trace for one structure.

Every subcommand writes into ``--out`` and exits 0 on success.  On failure
it prints ``error in stage <stage>: <message>`` to stderr and exits 2 (a
pipeline stage failed) or 1 (bad arguments or configuration).
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from lalqr import baselines, latent
from lalqr.config import TrainConfig, load_config
from lalqr.data import load_dataset, save_dataset
from lalqr.envs import ENVIRONMENTS, make_env
from lalqr.errors import StageError
from lalqr.expert import IlqrPlanner, NoisyExpert, default_planner_config
from lalqr.experiments import (EXPERIMENTS, ExperimentSettings, Lab, Stage, plot_traces, run_experiment,
                               write_report, write_table, write_trace)
from lalqr.harness import collect, evaluate, train_lalqr

log = logging.getLogger("lalqr")


def _common(p):
    p.add_argument("--env", default=None, choices=sorted(ENVIRONMENTS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None, help="expert episodes (collect/train) or eval episodes")
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--structure", choices=("companion", "diagonal", "full"), default=None)
    p.add_argument("--no-cost-loss", action="store_true")
    p.add_argument("--noisy-expert", action="store_true")
    p.add_argument("--init", choices=("train", "unseen"), default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="flat YAML config file")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="lalqr", description="Latent LQR control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("collect", help="collect expert transitions")
    _common(p)
    p = sub.add_parser("train", help="train a latent model on a dataset")
    _common(p)
    p.add_argument("--data", default=None, help="dataset file (collected when omitted)")
    p = sub.add_parser("eval", help="evaluate a controller")
    _common(p)
    p.add_argument("--controller", choices=("expert", "lolqr", "il", "lalqr"), default="lalqr")
    p.add_argument("--model", default=None, help="checkpoint for il/lalqr controllers")
    p = sub.add_parser("experiment", help="run a named protocol")
    _common(p)
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--data-dir", default=None, help="dataset cache directory")
    p = sub.add_parser("diagnose", help="eigen-diagnostic trace during training")
    _common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive training seeds")
    return parser


def resolve(args):
    """Merge config file and flags (flags win) into settings for the command."""
    env_name = args.env or "cartpole"
    if args.config:
        train, planner, extras = load_config(args.config, env_name)
        env_name = args.env or extras.get("env", env_name)
    else:
        train, planner, extras = TrainConfig(), default_planner_config(env_name), {}
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.latent_dim is not None:
        over["latent_dim"] = args.latent_dim
    if args.structure is not None:
        over["structure"] = args.structure
    if args.no_cost_loss:
        over["use_cost_loss"] = False
    if args.episodes is not None and args.command in ("collect", "train", "experiment", "diagnose"):
        over["episodes"] = args.episodes
    train = replace(train, **over)
    out = args.out or extras.get("out") or "results"
    noisy = args.noisy_expert or bool(extras.get("noisy_expert", False))
    init = args.init or extras.get("init", "train")
    eval_episodes = extras.get("eval_episodes", 100)
    if args.command == "eval" and args.episodes is not None:
        eval_episodes = args.episodes
    return env_name, train, planner, out, noisy, init, int(eval_episodes)


def _dataset(env, train, planner, noisy, path=None):
    if path:
        with Stage("load"):
            return load_dataset(path)
    with Stage("collect"):
        actor = IlqrPlanner(env, planner)
        if noisy:
            actor = NoisyExpert(actor, np.random.default_rng([train.seed, 1]))
        return collect(env, actor, train.episodes, train.seed)


def cmd_collect(args, env_name, train, planner, out, noisy, init, eval_episodes):
    env = make_env(env_name)
    with Stage("collect"):
        actor = IlqrPlanner(env, planner)
        if noisy:
            actor = NoisyExpert(actor, np.random.default_rng([train.seed, 1]))
        data = collect(env, actor, train.episodes, train.seed, init_mode=init)
    path = os.path.join(out, "dataset.txt")
    save_dataset(path, data)
    write_report(os.path.join(out, "collect.json"), {
        "env": env_name, "episodes": train.episodes, "seed": train.seed, "noisy_expert": noisy,
        "records": len(data), "dropped_episodes": list(getattr(data, "dropped", [])), "dataset": "dataset.txt",
    })
    print(f"wrote {len(data)} records to {path}")


def cmd_train(args, env_name, train, planner, out, noisy, init, eval_episodes):
    env = make_env(env_name)
    data = _dataset(env, train, planner, noisy, args.data)
    with Stage("lolqr"):
        lo = baselines.fit_lolqr(env)
    with Stage("train"):
        res = train_lalqr(data, train, env, lo.feedback)
    latent.save_system(os.path.join(out, "model.json"), res.system, res.controller)
    write_trace(os.path.join(out, "trace.csv"), res.trace)
    plot_traces(os.path.join(out, "training_losses.png"), {"consistency": res.trace, }, 1, "consistency loss")
    write_report(os.path.join(out, "train.json"), {
        "env": env_name, "config": asdict(train), "records": len(data),
        "final_loss": res.final_loss, "final_consistency": res.final_consistency, "final_cost": res.final_cost,
        "closed_loop_radius": res.controller.closed_loop_radius(), "K": res.controller.K,
        "model": "model.json", "trace": "trace.csv",
    })
    print(f"final loss {res.final_loss:.4g}; model written to {os.path.join(out, 'model.json')}")


def cmd_eval(args, env_name, train, planner, out, noisy, init, eval_episodes):
    env = make_env(env_name)
    with Stage("load"):
        if args.controller == "expert":
            ctrl = IlqrPlanner(env, planner)
        elif args.controller == "lolqr":
            ctrl = baselines.fit_lolqr(env)
        else:
            if not args.model:
                raise StageError("load", f"--model is required for the {args.controller} controller")
            ctrl = baselines.load_controller(args.model)
    with Stage("evaluate"):
        rep = evaluate(env, ctrl, eval_episodes, init, seed=train.seed + 1000, tag=args.controller)
    write_table(os.path.join(out, "eval.csv"), [rep.row()])
    write_report(os.path.join(out, "eval.json"), {"env": env_name, "init": init, **rep.row()})
    print(json.dumps(rep.row()))


def cmd_experiment(args, env_name, train, planner, out, noisy, init, eval_episodes):
    settings = ExperimentSettings(env=env_name, out=out, train=train, planner=planner,
                                  eval_episodes=eval_episodes, data_dir=args.data_dir)
    res = run_experiment(args.name, settings)
    for row in res["rows"]:
        print(json.dumps(row))
    print(f"results in {os.path.join(out, args.name)}")


def cmd_diagnose(args, env_name, train, planner, out, noisy, init, eval_episodes):
    env = make_env(env_name)
    data = _dataset(env, train, planner, noisy, args.data)
    lab = Lab(ExperimentSettings(env=env_name, out=out, train=train, planner=planner))
    traces, rows = {}, []
    for k in range(args.seeds):
        seed = train.seed + k
        tag = f"{train.structure}_seed{seed}"
        res = lab.train(data, tag, allow_failure=True, seed=seed)
        traces[tag] = res.trace
        write_trace(os.path.join(out, f"trace_{tag}.csv"), res.trace)
        # the last value is NaN when no stabilizing gain exists at the end of training
        first, last = float(res.trace[0, 3]), float(res.trace[-1, 3])
        rows.append({"variant": tag, "eigen_initial": first, "eigen_final": last, "ratio": last / first,
                     "synthesized": res.controller is not None})
    write_table(os.path.join(out, "diagnose.csv"), rows)
    plot_traces(os.path.join(out, "eigen_trace.png"), traces, 3, "eigen diagnostic")
    for row in rows:
        print(json.dumps(row))


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "diagnose": cmd_diagnose,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
    except (ValueError, OSError, TypeError) as exc:
        print(f"error in stage config: {exc}", file=sys.stderr)
        return 1
    os.makedirs(settings[3], exist_ok=True)
    try:
        COMMANDS[args.command](args, *settings)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any failure with the command's stage name
        print(f"error in stage {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
