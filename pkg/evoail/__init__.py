from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional

import multiprocessing_logging
import numpy as np
import pandas as pd
from pydantic import ValidationError

from . import ail
from . import analysis
from . import envs
from . import evolution
from . import exceptions
from . import llm
from . import models
from . import ot
from . import presets
from . import processing
from . import ra
from . import utils
from .__about__ import __version__


def get_config(args: argparse.Namespace) -> models.RunConfig:
    """Preset, then config file, then command line flags.

    Without --config, `config.toml` in the working directory is used if present.
    """
    config_file = args.config
    if config_file is None:
        default = os.path.join(os.getcwd(), "config.toml")
        if os.path.exists(default):
            config_file = default
    return models.load_config(config_file, args.preset, _overrides(args))


def _set(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    for key in parents:
        tree = tree.setdefault(key, {})
    tree[leaf] = value


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    flags = {
        "seed": "evoail.seed",
        "log_level": "evoail.log_level",
        "workers": "evoail.workers",
        "env": "env.id",
        "ra": "ra",
        "optimizer": "optimizer",
        "iterations": "ail.iterations",
        "n_demos": "ail.n_demos",
        "stride": "ail.demo_stride",
        "generations": "evolution.generations",
        "pairs": "evolution.pairs",
        "topk": "evolution.topk",
        "seeds": "evolution.eval_seeds",
        "mock": "llm.mock_responses",
    }
    for attr, dotted in flags.items():
        _set(tree, dotted, getattr(args, attr, None))
    if getattr(args, "local_only", False):
        _set(tree, "evolution.local_only", True)
    if getattr(args, "llm", None):
        llm_data = models.load_config_data(args.llm)
        tree["llm"] = utils.deep_merge(llm_data.get("llm", llm_data), tree.get("llm", {}))
    return tree


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2))


def cmd_collect_expert(config: models.RunConfig, args: argparse.Namespace) -> int:
    env = envs.make_env(config.env)
    expert = envs.value_iteration_expert(env)
    demos = envs.collect_demos(
        env,
        expert.policy,
        n_demos=config.ail.n_demos,
        stride=config.ail.demo_stride,
        seed=config.evoail.seed,
    )
    envs.save_demos(demos, args.out)
    logging.info("Wrote %d demo pairs to %s", len(demos), args.out)
    return 0


def cmd_train(config: models.RunConfig, args: argparse.Namespace) -> int:
    cfg = ail.AILConfig.from_run_config(config)
    demos = envs.load_demos(args.demos) if args.demos else None
    seed = config.evoail.seed
    if args.rl:
        cfg.ra = None
        result = ail.run_rl(cfg, seed, demos)
    else:
        if demos is None:
            raise exceptions.EvoAILException("train needs --demos unless --rl is given")
        result = ail.run_fail(cfg, demos, seed)

    baselines = None
    if args.baselines:
        expert = envs.value_iteration_expert(cfg.env)
        baselines = ail.policy_baselines(
            cfg.env, expert.policy, config.ail.baseline_episodes, seed
        )
    record = ail.result_record(
        cfg, result, seed, baselines, config=config.model_dump(mode="json")
    )
    out = Path(args.out) if args.out else config.evoail.output_dir / f"{analysis.run_id(record)}.json"
    utils.write_file(out, record.model_dump_json(indent=2))
    frame = analysis.MetricsFrame.from_records(record.metrics, run_id=analysis.run_id(record))
    analysis.emit(frame, args.metrics or out.with_suffix(".csv"))
    _print_json(
        {
            "run": str(out),
            "wasserstein": record.wasserstein,
            "eval_return": record.eval_return,
            "normalized_return": record.normalized_return,
        }
    )
    return 0


def cmd_evolve(config: models.RunConfig, args: argparse.Namespace) -> int:
    demos = envs.load_demos(args.demos)
    cfg = ail.AILConfig.from_run_config(config)
    client = None
    if not config.evolution.local_only:
        client = llm.make_client(config.llm)
    out = args.out or config.evoail.output_dir / "history.jsonl"
    stop_event = multiprocessing.Event()
    with processing.SignalHandler(stop_event):
        result = evolution.run_evolution(
            config.evolution,
            cfg,
            demos,
            client=client,
            seed=config.evoail.seed,
            workers=config.evoail.workers,
            stop_event=stop_event,
            ledger=out,
            temperature=config.llm.temperature,
        )
    _print_json(
        {
            "ledger": str(out),
            "best_id": result.best.id,
            "best_dsl": result.best.dsl,
            "best_fitness": result.best.fitness,
            "normalized_best_w2": result.normalized_best,
            "stopped": result.state.stopped,
        }
    )
    return 0


def cmd_eval_ra(config: models.RunConfig, args: argparse.Namespace) -> int:
    f = ra.resolve(args.fn)
    grid = utils.parse_grid(args.grid)
    values = ra.eval_ra(f, grid)
    frame = pd.DataFrame({"logit": grid, "reward": values})
    if args.file:
        analysis.emit(frame, args.file, args.out)
    elif args.out == "csv":
        frame.to_csv(sys.stdout, index=False, float_format=analysis.FLOAT_FORMAT)
    else:
        for logit, reward in zip(grid, values):
            print(json.dumps({"logit": float(logit), "reward": float(reward)}))
    return 0


def load_points(path: str) -> np.ndarray:
    """Demo file features, or one point (list or {"point": [...]}) per line."""
    rows = list(utils.read_jsonl(path))
    if rows and isinstance(rows[0], dict) and rows[0].get("kind") == "header":
        return envs.load_demos(path).features()
    points = [row["point"] if isinstance(row, dict) else row for row in rows]
    return np.asarray(points, dtype=np.float64)


def cmd_wdist(config: models.RunConfig, args: argparse.Namespace) -> int:
    a, b = load_points(args.a), load_points(args.b)
    settings = config.ot
    distance, plan = ot.wasserstein(
        a,
        b,
        method=args.method or settings.method,
        eps_scale=settings.eps_scale,
        max_iters=settings.max_iters,
        tol=settings.tol,
    )
    _print_json(
        {
            "distance": distance,
            "marginal_error": plan.marginal_error,
            "converged": plan.converged,
            "n_a": len(a),
            "n_b": len(b),
        }
    )
    return 0


def cmd_analyze(config: models.RunConfig, args: argparse.Namespace) -> int:
    outputs = analysis.analyze(args.runs, args.out_dir, utils.parse_grid(args.grid))
    _print_json({name: str(path) for name, path in outputs.items()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evoail", description="Evolved reward assignment for adversarial imitation learning"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (default: ./config.toml if present)")
    common.add_argument("--preset", choices=sorted(presets.PRESETS))
    common.add_argument("--log-level", dest="log_level")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect-expert", parents=[common], help="Value-iteration expert demonstrations")
    p.add_argument("--env")
    p.add_argument("--demos", dest="n_demos", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect_expert)

    p = sub.add_parser("train", parents=[common], help="Imitation (or RL) training run")
    p.add_argument("--env")
    p.add_argument("--ra", help="Builtin name or DSL expression")
    p.add_argument("--demos")
    p.add_argument("--optimizer", choices=["ppo", "a2c"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--rl", action="store_true", help="Train on simulator rewards")
    p.add_argument("--baselines", action="store_true", help="Also report normalized return")
    p.add_argument("--out")
    p.add_argument("--metrics", help="CSV of per-iteration metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evolve", parents=[common], help="Search for reward assignment functions")
    p.add_argument("--env")
    p.add_argument("--demos", required=True)
    p.add_argument("--generations", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--iterations", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--llm", help="TOML file with an [llm] table")
    group.add_argument("--local-only", dest="local_only", action="store_true")
    group.add_argument("--mock", help="JSON lines of canned chat responses")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("eval-ra", parents=[common], help="Tabulate a reward assignment function")
    p.add_argument("--fn", required=True)
    p.add_argument("--grid", default="-5:5:0.1")
    p.add_argument("--out", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--file")
    p.set_defaults(func=cmd_eval_ra)

    p = sub.add_parser("wdist", parents=[common], help="Wasserstein-2 distance between point sets")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--method", choices=["auto", "exact", "sinkhorn"])
    p.set_defaults(func=cmd_wdist)

    p = sub.add_parser("analyze", parents=[common], help="KDE, probability of improvement and entropy tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out-dir", dest="out_dir", default="analysis")
    p.add_argument("--grid", default="-6:4:0.05")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    multiprocessing_logging.install_mp_handler()
    logging.basicConfig(
        format="%(asctime)s %(levelname)s [%(processName)s %(process)d] [%(name)s] %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S%z",
        level=logging.DEBUG,
    )
    args = build_parser().parse_args(argv)
    try:
        config = get_config(args)
        logging.getLogger().setLevel(config.evoail.log_level)
        logging.getLogger("urllib3.connectionpool").setLevel(logging.ERROR)
        logging.info("evoail %s (%d): %s", __version__, os.getpid(), args.command)
        return args.func(config, args)
    except (exceptions.EvoAILException, ValidationError, ValueError, OSError) as e:
        logging.debug("Command failed", exc_info=True)
        print(
            json.dumps({"error": type(e).__name__, "message": str(e)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
