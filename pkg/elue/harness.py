#!/usr/bin/env python3
# ELUE/elue/harness.py

"""
Command-line entry point.

    python3 harness.py train --config ../configs/radial_goal.ini [--seed N] [--out CKPT]
    python3 harness.py test --config CFG --checkpoint CKPT --mode inference
    python3 harness.py evaluate --checkpoint CKPT --tasks tasks.txt --episodes 3
    python3 harness.py verify-ib [--trials N]
    python3 harness.py summarize --metrics metrics.jsonl [--out summary.csv]
    python3 harness.py sample-tasks --family radial_goal --n 5 --seed 1000 --out tasks.txt

Exit codes: 0 success, 2 configuration or checkpoint-version error, 3 runtime error.
"""

import argparse
import logging
import sys
from dataclasses import replace

import config
from checkpoint import load_checkpoint, save_checkpoint
from envsim import load_tasks, sample_tasks, save_tasks
from errors import CheckpointVersionError, ConfigError, EluError
from ib_bound import run_ib_trials
from meta import evaluate, meta_test, meta_train
from metrics import MetricsWriter, summarize

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def build_parser():
    parser = argparse.ArgumentParser(description="ELUE meta-RL harness")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Meta-train and write a checkpoint")
    p.add_argument("--config", required=True, help="Experiment config file")
    p.add_argument("--seed", type=int, default=None, help="Override [run] seed")
    p.add_argument("--out", default=None, help="Checkpoint path (default: [run] checkpoint_path)")
    p.add_argument("--metrics", default=None, help="Metrics path (default: [run] metrics_path)")

    p = sub.add_parser("test", help="Meta-test a checkpoint on one task")
    p.add_argument("--config", required=True, help="Experiment config file")
    p.add_argument("--checkpoint", required=True, help="Checkpoint from train")
    p.add_argument("--mode", choices=config.META_TEST_MODES, default=None, help="Override [test] mode")
    p.add_argument("--task-index", type=int, default=None, help="Override [test] task_index")
    p.add_argument("--seed", type=int, default=None, help="Override [test] seed")
    p.add_argument("--metrics", default=None, help="Metrics path (default: [run] metrics_path)")

    p = sub.add_parser("evaluate", help="Evaluate a checkpoint on a task file")
    p.add_argument("--checkpoint", required=True, help="Checkpoint from train")
    p.add_argument("--tasks", required=True, help="Task file (see sample-tasks)")
    p.add_argument("--episodes", type=int, default=1, help="Episodes per task (default: 1)")
    p.add_argument("--n-jobs", type=int, default=1, help="Parallel rollout workers (default: 1)")
    p.add_argument("--metrics", default=None, help="Optional metrics output")

    p = sub.add_parser("verify-ib", help="Check the variational IB bound on random discrete joints")
    p.add_argument("--trials", type=int, default=10_000, help="Number of random joints (default: 10000)")
    p.add_argument("--seed", type=int, default=0, help="Sampling seed (default: 0)")

    p = sub.add_parser("summarize", help="Per-episode mean/std table from a metrics file")
    p.add_argument("--metrics", required=True, help="Metrics file")
    p.add_argument("--out", default=None, help="CSV output (default: print to stdout)")

    p = sub.add_parser("sample-tasks", help="Write a task file")
    p.add_argument("--family", required=True, choices=config.TASK_FAMILIES)
    p.add_argument("--n", type=int, required=True, help="Number of tasks")
    p.add_argument("--seed", type=int, default=0, help="Sampling seed (default: 0)")
    p.add_argument("--out", required=True, help="Output task file")
    return parser


def cmd_train(args):
    cfg = config.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.run.checkpoint_path
    with MetricsWriter(args.metrics or cfg.run.metrics_path, cfg.run.run_id, cfg.run.seed) as metrics:
        ckpt = meta_train(cfg, metrics)
    save_checkpoint(out, ckpt)
    return EXIT_OK


def cmd_test(args):
    cfg = config.load_config(args.config)
    overrides = {k: v for k, v in (("mode", args.mode), ("task_index", args.task_index), ("seed", args.seed))
                 if v is not None}
    cfg = replace(cfg, test=replace(cfg.test, **overrides)).validate()
    ckpt = load_checkpoint(args.checkpoint)
    task = sample_tasks(cfg.test.family, cfg.test.n_tasks, cfg.test.task_seed)[cfg.test.task_index]
    with MetricsWriter(args.metrics or cfg.run.metrics_path, cfg.run.run_id, cfg.test.seed) as metrics:
        result = meta_test(cfg, ckpt, task, metrics)
    if result.episode_returns:
        logger.info(f"[TEST] {result.mode} on task {task.task_id}: {len(result.episode_returns)} episodes, "
                    f"{result.gradient_steps} gradient steps, last return {result.episode_returns[-1]:.3f}")
    else:
        logger.warning(f"[TEST] {result.mode} on task {task.task_id}: no episodes collected")
    return EXIT_OK


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    tasks = load_tasks(args.tasks)
    if args.metrics:
        with MetricsWriter(args.metrics, ckpt.cfg.run.run_id, ckpt.cfg.run.seed) as metrics:
            result = evaluate(ckpt, tasks, args.episodes, args.n_jobs, ckpt.cfg.run.seed, metrics)
    else:
        result = evaluate(ckpt, tasks, args.episodes, args.n_jobs, ckpt.cfg.run.seed)
    for index, mean in enumerate(result.per_episode_mean, start=1):
        print(f"episode {index}: mean return {mean:.6f}")
    return EXIT_OK


def cmd_verify_ib(args):
    report = run_ib_trials(args.trials, args.seed)
    print(f"trials={report.trials} min_slack={report.min_slack:.3e} max_kl_gap={report.max_kl_gap:.3e}")
    if not report.passed:
        logger.error("[IB] bound violated")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_summarize(args):
    table, skipped = summarize(args.metrics, args.out)
    if not args.out:
        print(table.to_csv(index=False), end="")
    return EXIT_OK


def cmd_sample_tasks(args):
    save_tasks(args.out, sample_tasks(args.family, args.n, args.seed))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "test": cmd_test,
    "evaluate": cmd_evaluate,
    "verify-ib": cmd_verify_ib,
    "summarize": cmd_summarize,
    "sample-tasks": cmd_sample_tasks,
}


def run(args):
    """Dispatch a parsed command and map errors to exit codes"""
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointVersionError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_CONFIG
    except EluError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        logger.exception(f"{args.command} failed: {exc}")
        return EXIT_RUNTIME


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
