"""Command-line entry point: ``lipserve {run,examples,check,config}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import ExitStack

from .checks import run_checks
from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .experiment import results_csv, results_json, run_experiment, throughput_ratios
from .programs import EXAMPLES, run_examples
from .rag import CachePolicy

log = logging.getLogger("lipserve")


def _rate(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    try:
        return (name, float(value)) if sep else (text, float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RATE or NAME=RATE, got {text!r}") from None


def _policy(text: str) -> str:
    try:
        return str(CachePolicy.parse(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipserve", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the RAG prefix-caching grid")
    run.add_argument("--config", help="JSON config file; flags below override it")
    run.add_argument("--alpha", type=float, action="append", help="Pareto index (repeatable)")
    run.add_argument("--rate", type=_rate, action="append", metavar="[NAME=]RATE", help="request rate in req/s (repeatable)")
    run.add_argument("--policy", type=_policy, action="append", help="none | topk:K | consecutive:N (repeatable)")
    run.add_argument("--docs", type=int, help="number of documents")
    run.add_argument("--doc-len", type=int, help="tokens per document")
    run.add_argument("--duration", type=float, help="arrival window in virtual seconds")
    run.add_argument("--seed", type=int, help="workload seed")
    run.add_argument("--out", default="results.csv", help="CSV output path (default: results.csv)")
    run.add_argument("--json", dest="json_out", help="also write per-cell results with configs as JSON")
    run.add_argument("--trace", help="write the full event trace as JSON lines")

    ex = sub.add_parser("examples", help="run the bundled example programs")
    ex.add_argument("names", nargs="*", metavar="NAME", help=f"subset of: {', '.join(EXAMPLES)}")

    chk = sub.add_parser("check", help="run the invariant auditors")
    chk.add_argument("--quick", action="store_true", help="smaller randomized runs")

    cfg = sub.add_parser("config", help="print the effective configuration as JSON")
    cfg.add_argument("--config", help="JSON config file to validate and echo")
    return p


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.alpha:
        cfg.alphas = tuple(args.alpha)
    if args.rate:
        cfg.rates = dict(args.rate)
    if args.policy:
        cfg.policies = tuple(args.policy)
    overrides = {
        "num_docs": args.docs, "doc_len": args.doc_len, "duration": args.duration, "seed": args.seed,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        cfg.workload = dataclasses.replace(cfg.workload, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_run(args) -> int:
    cfg = _experiment_config(args)

    def progress(res):
        m = res.metrics
        log.info("alpha=%g load=%s policy=%s thr=%.1f tok/s hit=%.3f", res.workload.pareto_alpha, res.load, res.policy, m.throughput, m.hit_rate)

    with ExitStack() as stack:
        sink = stack.enter_context(open(args.trace, "w")) if args.trace else None
        results = run_experiment(cfg, trace_sink=sink, progress=progress)
    with open(args.out, "w", newline="") as fh:
        fh.write(results_csv(results))
    if args.json_out:
        with open(args.json_out, "w") as fh:
            fh.write(results_json(results))
    for load in cfg.rates:
        ratios = throughput_ratios(results, load)
        if ratios:
            print(f"{load}: " + "  ".join(f"alpha={a:g} x{r:.2f}" for a, r in ratios.items()))
    print(f"wrote {len(results)} rows to {args.out}")
    return 0


def cmd_examples(args) -> int:
    unknown = set(args.names) - set(EXAMPLES)
    if unknown:
        raise ConfigError(f"unknown example(s): {', '.join(sorted(unknown))}")
    results = run_examples(args.names or None)
    for r in results:
        print(r)
    return 0 if all(r.ok for r in results) else 1


def cmd_check(args) -> int:
    results = run_checks(quick=args.quick)
    for r in results:
        print(r)
    return 0 if all(r.ok for r in results) else 1


def cmd_config(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


COMMANDS = {"run": cmd_run, "examples": cmd_examples, "check": cmd_check, "config": cmd_config}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"lipserve: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"lipserve: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
