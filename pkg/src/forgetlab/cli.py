"""Command-line entry points: search, combine, evaluate, report.

Exit codes: 0 success, 2 configuration error (bad flags, unreadable or
inconsistent config), 3 runtime failure (locked output directory,
corrupt logs, crashed run). The output directory is guarded by a lock
file so two invocations cannot interleave writes.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import replace

from filelock import FileLock, Timeout

from .combine import (
    combine_pairs,
    combine_trials,
    read_distribution_csv,
    report_distribution,
    write_distribution_csv,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    materialize_datasets,
    materialize_pairs,
    reseed,
)
from .groups import LrDistribution
from .hpo import hyperband_plan, read_trials, run_search, write_trials
from .protocol import ProtocolConfig, run_sequential

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


@contextmanager
def _locked_dir(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock = FileLock(os.path.join(out_dir, ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(
            f"output directory {out_dir!r} is in use by another process "
            "(lock file .lock is held)"
        ) from None
    try:
        yield
    finally:
        lock.release()


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = reseed(cfg, args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _workers(args, cfg: ExperimentConfig) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    env = os.environ.get("FORGETLAB_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FORGETLAB_WORKERS={env!r} is not an integer") from None
    return cfg.workers


def _base_protocol(cfg: ExperimentConfig, dist: LrDistribution, ewc: bool) -> ProtocolConfig:
    return ProtocolConfig(
        dist=dist,
        epochs_o=cfg.epochs_o,
        epochs_s=cfg.epochs_s,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        ewc_enabled=ewc,
        ewc_lambda=cfg.ewc_lambda,
        fisher_samples=cfg.fisher_samples,
        retain_moments=cfg.retain_moments,
    )


def cmd_search(args) -> int:
    cfg = _load(args)
    workers = _workers(args, cfg)
    if not cfg.pairs:
        raise ConfigError(f"{args.config}: no [pair:*] sections to search")
    plan = hyperband_plan(cfg.max_resource, cfg.eta)
    with _locked_dir(cfg.out):
        datasets = materialize_datasets(cfg)
        pairs = materialize_pairs(cfg, datasets)
        base = _base_protocol(cfg, LrDistribution.flat(cfg.flat_lr), ewc=False)
        for pair in pairs:
            started = time.perf_counter()
            store = run_search(
                pair,
                plan,
                base,
                cfg.model,
                seed=cfg.seed,
                flat_lr=cfg.flat_lr,
                workers=workers,
                phase2_only=cfg.phase2_only,
            )
            write_trials(os.path.join(cfg.out, f"trials_{pair.name}.jsonl"), store.trials)
            ranked = store.ranked(plan.max_resource)
            elapsed = time.perf_counter() - started
            if ranked:
                write_distribution_csv(
                    ranked[0].dist(), os.path.join(cfg.out, f"best_{pair.name}.csv")
                )
                print(
                    f"{pair.name}: {len(store.trials)} trials, "
                    f"{store.executed_epochs} epochs, "
                    f"best reward {ranked[0].reward:.4f} (trial {ranked[0].id}), "
                    f"{elapsed:.1f}s"
                )
            else:
                print(
                    f"{pair.name}: {len(store.trials)} trials, all diverged; "
                    "no best distribution written"
                )
    return EXIT_OK


def cmd_combine(args) -> int:
    out = args.out
    if out is None:
        out = os.path.dirname(os.path.abspath(args.logs[0]))
    dists = []
    for path in args.logs:
        trials = read_trials(path)
        ranked = [t for t in trials if t.status == "completed" and t.rank is not None]
        if not ranked:
            raise RuntimeError(f"{path}: no ranked completed trials to combine")
        dists.append(combine_trials(ranked, args.b))
    combined = combine_pairs(dists)
    with _locked_dir(out):
        target = os.path.join(out, "combined.csv")
        write_distribution_csv(combined, target)
    print(f"combined {len(dists)} log(s) -> {target}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    if not cfg.pairs:
        raise ConfigError(f"{args.config}: no [pair:*] sections to evaluate")
    if args.mode == "dist":
        if args.dist is None:
            raise ConfigError("--dist CSV is required with --mode dist")
        try:
            dist = read_distribution_csv(args.dist)
        except OSError as exc:
            raise ConfigError(f"cannot read distribution: {exc}") from exc
    else:
        dist = LrDistribution.flat(cfg.flat_lr)
    pcfg = _base_protocol(cfg, dist, ewc=args.mode == "ewc")
    with _locked_dir(cfg.out):
        datasets = materialize_datasets(cfg)
        pairs = materialize_pairs(cfg, datasets)
        rows = []
        for pair in pairs:
            res = run_sequential(pair, pcfg, cfg.model)
            if res.status != "completed":
                print(f"{pair.name}: run diverged; scores recorded as 0", file=sys.stderr)
            rows.append(
                (pair.name, args.mode, res.p_o_before, res.p_o, res.p_s, res.reward)
            )
            print(
                f"{pair.name} [{args.mode}]: p_o_before={res.p_o_before:.4f} "
                f"p_o={res.p_o:.4f} p_s={res.p_s:.4f} reward={res.reward:.4f}"
            )
        target = os.path.join(cfg.out, "results.csv")
        with open(target, "w", encoding="utf-8") as fh:
            fh.write("pair,mode,p_o_before,p_o,p_s,reward\n")
            for name, mode, before, p_o, p_s, reward in rows:
                fh.write(f"{name},{mode},{before!r},{p_o!r},{p_s!r},{reward!r}\n")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.dist is None and args.out is None:
        raise ConfigError("report needs --dist and/or --out")
    if args.dist is not None:
        dist = read_distribution_csv(args.dist)
        print(f"# {args.dist}")
        print("choice  rate")
        for choice, rate in report_distribution(dist):
            print(f"{choice:>6}  {rate:.6e}")
    if args.out is not None:
        if not os.path.isdir(args.out):
            raise ConfigError(f"not a directory: {args.out}")
        logs = sorted(glob.glob(os.path.join(args.out, "trials_*.jsonl")))
        for path in logs:
            trials = read_trials(path)
            by_status: dict[str, int] = {}
            for t in trials:
                by_status[t.status] = by_status.get(t.status, 0) + 1
            counts = ", ".join(f"{k}: {v}" for k, v in sorted(by_status.items()))
            best = [t for t in trials if t.rank == 0]
            line = f"{os.path.basename(path)}: {len(trials)} trials ({counts})"
            if best:
                line += f"; best reward {best[0].reward:.4f} (trial {best[0].id})"
            print(line)
        results = os.path.join(args.out, "results.csv")
        if os.path.exists(results):
            print(f"# {results}")
            with open(results, encoding="utf-8") as fh:
                for line in fh:
                    print(line.rstrip("\n"))
        if not logs and not os.path.exists(results):
            print(f"{args.out}: nothing to report")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgetlab",
        description=(
            "Search, combine and evaluate per-layer-group learning rate "
            "distributions on sequential fine-tuning pairs."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="run the Hyperband search per pair")
    search.add_argument("--config", required=True, help="experiment config path")
    search.add_argument("--out", help="output directory (default from config)")
    search.add_argument("--seed", type=int, help="override the experiment seed")
    search.add_argument("--workers", type=int, help="parallel trial workers")
    search.set_defaults(func=cmd_search)

    comb = sub.add_parser("combine", help="combine trial logs into one distribution")
    comb.add_argument("logs", nargs="+", help="trials_<pair>.jsonl paths")
    comb.add_argument("--b", type=float, default=1.8, help="rank weight base (>= 1)")
    comb.add_argument("--out", help="output directory (default: first log's)")
    comb.set_defaults(func=cmd_combine)

    ev = sub.add_parser("evaluate", help="run the protocol and write results.csv")
    ev.add_argument("--config", required=True, help="experiment config path")
    ev.add_argument(
        "--mode", required=True, choices=("flat", "dist", "ewc"), help="what to evaluate"
    )
    ev.add_argument("--dist", help="distribution CSV (required for --mode dist)")
    ev.add_argument("--out", help="output directory (default from config)")
    ev.add_argument("--seed", type=int, help="override the experiment seed")
    ev.set_defaults(func=cmd_evaluate)

    rep = sub.add_parser("report", help="print distributions and run summaries")
    rep.add_argument("--dist", help="distribution CSV to print")
    rep.add_argument("--out", help="run directory to summarize")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
