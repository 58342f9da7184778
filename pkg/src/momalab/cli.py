"""Command-line entry point: ``momalab {gen-data,train-wm,train,eval,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds_mod
from .errors import MomaError
from .harness import convention_consistency, evaluate, format_report, load_checkpoint, load_config, report, run
from .worldmodel import coordgame_wm_config, reacher_wm_config, save_ensemble, train_ensemble


def _gen_data(args) -> int:
    data = ds_mod.make_dataset(args.name, args.episodes, args.seed, obs_mode=args.obs_mode)
    ds_mod.save(data, args.out)
    stats = ds_mod.compute_stats(data)
    print(json.dumps({"path": str(args.out), "episodes": len(data.trajectories), "score_mean": stats.score_mean}))
    return 0


def _train_wm(args) -> int:
    data = ds_mod.load(args.dataset)
    preset = coordgame_wm_config if data.spec.env_id == "coordgame-v0" else reacher_wm_config
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    ens = train_ensemble(data, preset(**overrides), seed=args.seed)
    save_ensemble(ens, args.out)
    print(json.dumps({"path": str(args.out), "elites": ens.elites, "l_eps": ens.l_eps}))
    return 0


def _train(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    summary = run(config)
    print(json.dumps({k: summary[k] for k in ("algorithm", "seed", "mean_return", "sem", "normalized_score")}))
    return 0


def _eval(args) -> int:
    data = ds_mod.load(args.dataset)
    team = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    result = evaluate(data.env, team, args.episodes, rng, data.normalizers)
    out = {"mean_return": result.mean, "sem": result.sem, "normalized_score": result.normalized}
    if data.spec.env_id == "reacher2-v0":
        out["convention_consistency"] = convention_consistency(result.state_traces)
    print(json.dumps(out))
    return 0


def _report(args) -> int:
    sys.stdout.write(format_report(report(args.runs)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momalab", description="Offline multi-agent RL laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset file")
    p.add_argument("name", help="coord-favorable, coord-neutral, coord-unfavorable or reacher-mix")
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--obs-mode", default="fo", help="reacher observation mode: fo, ind or leader")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_gen_data)

    p = sub.add_parser("train-wm", help="train a world-model ensemble on a dataset file")
    p.add_argument("dataset", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_train_wm)

    p = sub.add_parser("train", help="run an experiment from a key = value config file")
    p.add_argument("config", type=Path)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a saved team greedily in the simulator")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--dataset", type=Path, required=True, help="dataset file providing env and normalizers")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_eval)

    p = sub.add_parser("report", help="aggregate run summaries across seeds")
    p.add_argument("runs", nargs="+", type=Path)
    p.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (MomaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
