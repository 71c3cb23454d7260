"""Grid runner for the RAG prompt-caching experiment."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass

from .config import ExperimentConfig
from .kernel import Kernel, KernelConfig
from .rag import BaselineLip, CachePolicy, baseline_lip, rag_lip
from .scheduler import Metrics, metrics_collect
from .workload import WorkloadSpec, gen_requests

log = logging.getLogger(__name__)

METRIC_EVENTS = ("process_spawn", "process_exit", "token", "batch_dispatch", "cache")

CSV_COLUMNS = [
    "load", "pareto_alpha", "policy", "throughput", "mean_latency_per_token", "p95_latency",
    "utilization", "mean_batch_size", "hit_rate",
    "rate", "tokens", "requests_completed", "requests_failed", "norm_throughput", "norm_latency", "run_id",
]


@dataclass
class RunResult:
    metrics: Metrics
    load: str
    policy: str
    workload: WorkloadSpec
    run_id: str
    config: dict

    def row(self) -> dict:
        m = self.metrics
        return {
            "load": self.load,
            "pareto_alpha": self.workload.pareto_alpha,
            "policy": self.policy,
            "throughput": m.throughput,
            "mean_latency_per_token": m.mean_latency_per_token,
            "p95_latency": m.p95_latency,
            "utilization": m.utilization,
            "mean_batch_size": m.mean_batch_size,
            "hit_rate": m.hit_rate,
            "rate": self.workload.request_rate,
            "tokens": m.tokens,
            "requests_completed": m.requests_completed,
            "requests_failed": m.requests_failed,
            "run_id": self.run_id,
        }


def run_id(kernel_config: KernelConfig, spec: WorkloadSpec, policy: str) -> str:
    blob = json.dumps(
        {"kernel": dataclasses.asdict(kernel_config), "workload": dataclasses.asdict(spec), "policy": policy},
        sort_keys=True, default=str,
    )
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def run_cell(kernel_config: KernelConfig, spec: WorkloadSpec, policy: CachePolicy | str, load: str = "", trace_sink=None) -> RunResult:
    """Simulate one (workload, policy) cell on a fresh kernel and file system."""
    policy = CachePolicy.parse(policy) if isinstance(policy, str) else policy
    vocab = kernel_config.model.vocab_size
    kernel = Kernel(kernel_config, trace_sink=trace_sink, trace_keep=METRIC_EVENTS)
    lip = baseline_lip(spec, vocab) if policy.kind == "none" else rag_lip(policy, spec, vocab)
    for req in gen_requests(spec, vocab):
        kernel.spawn(lip, req, owner="rag", at=req.arrival, name=f"req-{req.id}")
    kernel.run()
    metrics = metrics_collect(kernel.trace)
    return RunResult(
        metrics=metrics,
        load=load or str(spec.request_rate),
        policy=str(policy),
        workload=spec,
        run_id=run_id(kernel_config, spec, str(policy)),
        config={"kernel": dataclasses.asdict(kernel_config), "workload": dataclasses.asdict(spec), "policy": str(policy)},
    )


def run_experiment(cfg: ExperimentConfig, trace_sink=None, progress=None) -> list[RunResult]:
    """Run every (alpha, rate, policy) cell in grid order.

    A cell whose configuration is invalid is logged and skipped; the rest
    of the grid still runs.
    """
    results = []
    for alpha in cfg.alphas:
        for load, rate in cfg.rates.items():
            for pol in cfg.policies:
                try:
                    spec = dataclasses.replace(cfg.workload, pareto_alpha=alpha, request_rate=rate)
                    policy = CachePolicy.parse(pol) if isinstance(pol, str) else pol
                except ValueError as exc:
                    log.error("skipping cell alpha=%s rate=%s policy=%s: %s", alpha, rate, pol, exc)
                    continue
                if trace_sink is not None:
                    trace_sink.write(json.dumps({"cell": {"alpha": alpha, "load": load, "policy": str(policy)}}) + "\n")
                res = run_cell(cfg.kernel, spec, policy, load, trace_sink)
                if progress:
                    progress(res)
                results.append(res)
    return results


def _normalise(rows: list[dict]) -> None:
    base = {(r["load"], r["pareto_alpha"]): r for r in rows if r["policy"] == "none"}
    for r in rows:
        b = base.get((r["load"], r["pareto_alpha"]))
        if b and b["throughput"] > 0 and b["mean_latency_per_token"] > 0:
            r["norm_throughput"] = r["throughput"] / b["throughput"]
            r["norm_latency"] = r["mean_latency_per_token"] / b["mean_latency_per_token"]
        else:
            r["norm_throughput"] = r["norm_latency"] = ""


def results_csv(results: list[RunResult]) -> str:
    rows = [r.row() for r in results]
    _normalise(rows)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def results_json(results: list[RunResult]) -> str:
    return json.dumps(
        [{**r.row(), "metrics": r.metrics.to_dict(), "config": r.config} for r in results],
        indent=2, sort_keys=True,
    )


def throughput_ratios(results: list[RunResult], load: str) -> dict[float, float]:
    """throughput(cached policy) / throughput(none) per alpha at one load."""
    by = {(r.workload.pareto_alpha, r.policy): r.metrics.throughput for r in results if r.load == load}
    out = {}
    for (alpha, pol), thr in sorted(by.items()):
        if pol != "none" and (alpha, "none") in by:
            out[alpha] = thr / by[(alpha, "none")]
    return out
