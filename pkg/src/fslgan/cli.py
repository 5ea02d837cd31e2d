"""Command line entry point: ``fslgan {time-bench,acc-bench,gradcheck,replay}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import bench, config, gradcheck
from .fedorch import FederationAbort

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_INELIGIBLE = 3

GRAD_TOL = 1e-6


def _load(path: str, benchmark: str | None, output_dir: str | None) -> config.ExperimentConfig:
    overrides: dict = {"run": {}}
    if benchmark:
        overrides["run"]["benchmark"] = benchmark
    if output_dir:
        overrides["run"]["output_dir"] = output_dir
    return config.load(path, overrides)


def _dispatch(cfg: config.ExperimentConfig) -> int:
    if cfg["run"]["benchmark"] == "time":
        result = bench.run_time_benchmark(cfg)
        for strategy, (n, mean, std) in result.summary.items():
            shown = "all clients ineligible" if mean is None else f"{mean:.3f} s +- {std:.3f} ({n} pools)"
            print(f"{strategy:<16} {shown}")
    else:
        for run in bench.run_accuracy_benchmark(cfg):
            last = max(run.nn_distance)
            msg = (f"M={run.num_clients}: {len(run.g_loss)} epochs, eligible {len(run.eligible)}, "
                   f"nn distance {run.nn_distance[0]:.3f} -> {run.nn_distance[last]:.3f}")
            if run.g_loss:
                msg += f", g_loss first5 {run.first5:.4f} last5 {run.last5:.4f}"
            print(msg)
    print(f"outputs in {cfg.output_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.layer_suite(args.seed) + gradcheck.end_to_end_suite(args.seed)
    worst = 0.0
    for r in results:
        status = "ok" if r.passed(args.tol) else "FAIL"
        print(f"{r.name:<32} rel_err {r.rel_error:.3e}  {status}")
        worst = max(worst, r.rel_error)
    ok = all(r.passed(args.tol) for r in results)
    print(f"{len(results)} checks, worst {worst:.3e}, tolerance {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fslgan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, bench_kind, text in (("time-bench", "time", "splitting-strategy time benchmark"),
                                   ("acc-bench", "accuracy", "generator loss vs number of discriminators")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--output-dir", help="override run.output_dir")
        p.set_defaults(benchmark=bench_kind)

    p = sub.add_parser("replay", help="rerun a benchmark from a config_resolved file")
    p.add_argument("--config-resolved", required=True)
    p.add_argument("--output-dir", help="write outputs here instead of the recorded directory")
    p.set_defaults(benchmark=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind and a reduced GAN")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=GRAD_TOL)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    path = args.config_resolved if args.command == "replay" else args.config
    try:
        cfg = _load(path, args.benchmark, args.output_dir)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(cfg)
    except FederationAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_INELIGIBLE
    except FileNotFoundError as exc:
        print(f"dataset missing: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
