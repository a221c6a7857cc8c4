"""Command line entry point: ``ucha {train,sweep,eval,plot,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .env import EnvConfig, VuSpec, make_profiles
from .nn import load_checkpoint
from .ppo import PpoHyper
from .rng import RandomStream
from .trainers import Algo, build_agents, evaluate, load_agents_tensors
from .harness.config import WORKERS_ENV, ConfigError, ExperimentConfig, apply_overrides, load_config


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "out", None):
        overrides.append(f"run.out_dir={args.out}")
    return apply_overrides(config, overrides)


def cmd_train(args) -> int:
    from .harness.runner import run_matrix

    config = _load(args)
    run = config.run.model_dump(mode="json")
    run.update(algos=[args.algo], seeds=[args.seed])
    if args.n_vus is not None:
        run["vu_counts"] = [args.n_vus]
    config = ExperimentConfig.model_validate({**config.model_dump(mode="json"), "run": run})
    return _report_outcomes(run_matrix(config, workers=1), config.run.out_dir)


def cmd_sweep(args) -> int:
    from .harness.runner import run_matrix

    config = _load(args)
    return _report_outcomes(run_matrix(config), config.run.out_dir)


def _report_outcomes(outcomes, out_dir) -> int:
    for o in outcomes:
        status = f"ok ({o.rows} evaluations)" if o.ok else "FAILED"
        print(f"{o.cell}: {status}")
    print(f"metrics: {Path(out_dir) / 'metrics.csv'}")
    return 0 if all(o.ok for o in outcomes) else 1


def cmd_eval(args) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    env_config = EnvConfig.model_validate(meta["env"])
    hyper = PpoHyper.model_validate(meta["ppo"])
    vus = [VuSpec.model_validate(v) for v in meta["vus"]]
    seed = meta["seed"] if args.seed is None else args.seed
    agents = build_agents(meta["algo"], env_config, hyper, RandomStream(meta["seed"]).substream("init"))
    if agents.kind is not Algo.RANDOM:
        load_agents_tensors(agents, tensors)
    profiles = make_profiles(env_config, vus, RandomStream(meta["seed"]).substream("profiles"))
    root = RandomStream(seed)
    rep = evaluate(env_config, profiles, agents, args.episodes, root.substream("eval-env"),
                   root.substream("eval-policy"), greedy=args.greedy)
    summary = {
        "algo": meta["algo"], "step": meta["step"], "episodes": args.episodes,
        "mean_reward": rep.mean_reward, "worst_vu_frames": rep.worst_vu_frames,
        "sum_energy": rep.sum_energy, "fps": np.round(rep.fps, 4).tolist(),
        "local_fraction": np.round(rep.local_fraction, 4).tolist(),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_plot(args) -> int:
    from .harness.plots import emit_plots

    for path in emit_plots(args.dir):
        print(path)
    return 0


def cmd_report(args) -> int:
    from .harness.report import report_table

    path = report_table(args.dir)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ucha", description=__doc__,
                                epilog=f"Set {WORKERS_ENV} to run sweep cells in parallel processes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="YAML experiment file (defaults apply when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set run.total_steps=20000")
        sp.add_argument("--out", help="output directory (overrides run.out_dir)")

    sp = sub.add_parser("train", help="train one algorithm for one seed")
    config_args(sp)
    sp.add_argument("--algo", required=True, choices=[a.value for a in Algo])
    sp.add_argument("--seed", required=True, type=int)
    sp.add_argument("--n-vus", type=int, help="VU count (default: env.n_vus)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run every (algo, VU count, seed) cell of a config")
    config_args(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a saved checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=5)
    sp.add_argument("--seed", type=int, help="evaluation seed (default: the training seed)")
    sp.add_argument("--greedy", action="store_true", help="use the policy mode instead of sampling")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="write SVG figures from a metrics directory")
    sp.add_argument("--dir", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("report", help="write the summary table for a metrics directory")
    sp.add_argument("--dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
