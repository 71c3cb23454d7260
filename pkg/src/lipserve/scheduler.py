"""Two-level scheduling: FIFO thread scheduling plus adaptive ``pred`` batching.

The batch scheduler estimates the syscall arrival rate with an EWMA over
inter-arrival gaps and sizes batches to the number of arrivals a Poisson
process at that rate would produce within the batching window. A batch
leaves when the pool reaches that size or when its oldest request has
waited a full window, whichever comes first.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .errors import DuplicateReady, MalformedTrace


@dataclass
class SchedulerConfig:
    w_max: float = 0.010
    b_max: int = 64
    ewma_alpha: float = 0.2
    default_interval: float = 0.1
    min_interval: float = 1e-9
    c0: float = 1e-3
    c1: float = 1e-5
    c2: float = 1e-9
    transfer_cost: float = 1e-5

    def __post_init__(self):
        if self.w_max < 0 or self.b_max < 1:
            raise ValueError("w_max must be >= 0 and b_max >= 1")
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must lie in (0, 1]")
        if min(self.c0, self.c1, self.c2, self.transfer_cost) < 0:
            raise ValueError("cost coefficients must be non-negative")

    @property
    def cost_model(self) -> "CostModel":
        return CostModel(self.c0, self.c1, self.c2, self.transfer_cost)


@dataclass(frozen=True)
class CostModel:
    c0: float = 1e-3
    c1: float = 1e-5
    c2: float = 1e-9
    transfer_cost: float = 1e-5

    def request_cost(self, n_new: int, n_ctx: int) -> float:
        return self.c1 * n_new + self.c2 * n_new * n_ctx

    def batch_cost(self, items) -> float:
        """``c0 + sum(c1*n_new + c2*n_new*n_ctx)`` over ``(n_new, n_ctx)`` pairs, summed in order."""
        cost = self.c0
        for n_new, n_ctx in items:
            cost += self.request_cost(n_new, n_ctx)
        return cost


class RateEstimator:
    """EWMA of instantaneous arrival rate ``1/dt``, updated once per enqueue."""

    def __init__(self, alpha=0.2, default_interval=0.1, min_interval=1e-9):
        self.alpha = alpha
        self.default_interval = default_interval
        self.min_interval = min_interval
        self.rate = 0.0
        self.last: float | None = None

    def update(self, now: float) -> float:
        if self.last is None:
            self.rate = 1.0 / self.default_interval
        else:
            dt = max(now - self.last, self.min_interval)
            self.rate = (1 - self.alpha) * self.rate + self.alpha / dt
        self.last = now
        return self.rate


@dataclass(eq=False)
class PredRequest:
    id: int
    tid: int
    pid: int
    kv: Any
    tokens: list
    enqueue_time: float
    result: Any = None
    error: BaseException | None = None
    n_ctx: int = 0

    @property
    def n_new(self) -> int:
        return len(self.tokens)


@dataclass(eq=False)
class Batch:
    id: int
    requests: list
    formed_at: float
    reason: str
    cost: float = 0.0

    @property
    def completes_at(self) -> float:
        return self.formed_at + self.cost


class ThreadScheduler:
    """FIFO run queue of Ready threads."""

    def __init__(self):
        self._queue: deque = deque()
        self._queued: set[int] = set()

    def push(self, thread) -> None:
        if thread.tid in self._queued:
            raise DuplicateReady(f"thread {thread.tid} is already on the run queue")
        self._queued.add(thread.tid)
        self._queue.append(thread)

    def pop(self):
        """Next runnable thread, or ``None`` when idle."""
        if not self._queue:
            return None
        thread = self._queue.popleft()
        self._queued.discard(thread.tid)
        return thread

    def __len__(self):
        return len(self._queue)


class BatchScheduler:
    """The inference pool and its dispatch policy."""

    def __init__(self, config: SchedulerConfig | None = None):
        self.config = config or SchedulerConfig()
        self.pool: deque[PredRequest] = deque()
        self.estimator = RateEstimator(self.config.ewma_alpha, self.config.default_interval, self.config.min_interval)
        self._batch_ids = 0

    @property
    def rate(self) -> float:
        return self.estimator.rate

    def target_size(self) -> int:
        b = round(self.estimator.rate * self.config.w_max)
        return min(max(b, 1), self.config.b_max)

    def enqueue(self, req: PredRequest) -> None:
        self.pool.append(req)
        self.estimator.update(req.enqueue_time)

    def deadline(self) -> float | None:
        return self.pool[0].enqueue_time + self.config.w_max if self.pool else None

    def form_batch(self, now: float) -> Batch | None:
        """Take up to ``b_max`` oldest requests if the size or deadline trigger fires."""
        if not self.pool:
            return None
        if len(self.pool) >= self.target_size():
            reason = "size"
        elif now >= self.deadline():
            reason = "deadline"
        else:
            return None
        n = min(len(self.pool), self.config.b_max)
        requests = [self.pool.popleft() for _ in range(n)]
        self._batch_ids += 1
        return Batch(self._batch_ids, requests, now, reason)


@dataclass
class Metrics:
    throughput: float
    mean_latency_per_token: float
    p95_latency: float
    utilization: float
    mean_batch_size: float
    hit_rate: float
    tokens: int
    requests_completed: int
    requests_failed: int
    batches: int
    span: float

    def to_dict(self) -> dict:
        return asdict(self)


def _need(record, *keys):
    for k in keys:
        if k not in record:
            raise MalformedTrace(f"trace record missing {k!r}: {record!r}")


def metrics_collect(trace) -> Metrics:
    """Aggregate a kernel event trace into run metrics.

    A request is one LIP process: it arrives at its ``process_spawn`` record
    and its end-to-end latency runs until ``process_exit``. Per-token latency
    is that latency divided by the tokens the process emitted.
    """
    arrivals: dict[int, float] = {}
    exits: dict[int, tuple[float, int]] = {}
    tokens: dict[int, int] = {}
    batch_sizes = []
    busy = 0.0
    hits = misses = 0
    first = last = None
    prev_time = -math.inf
    for rec in trace:
        _need(rec, "virtual_time", "event_type")
        t = rec["virtual_time"]
        if t < prev_time:
            raise MalformedTrace(f"time goes backwards at {rec!r}")
        prev_time = t
        last = t
        kind = rec["event_type"]
        pid = rec.get("pid")
        detail = rec.get("detail") or {}
        if kind == "process_spawn":
            arrivals[pid] = t
            first = t if first is None else min(first, t)
        elif kind == "token":
            if pid not in arrivals:
                raise MalformedTrace(f"token for unknown process {pid}")
            tokens[pid] = tokens.get(pid, 0) + 1
        elif kind == "process_exit":
            if pid not in arrivals:
                raise MalformedTrace(f"exit of unknown process {pid}")
            _need(detail, "status")
            exits[pid] = (t, detail["status"])
        elif kind == "batch_dispatch":
            _need(detail, "size", "cost")
            batch_sizes.append(detail["size"])
            busy += detail["cost"]
        elif kind == "cache":
            if detail.get("hit"):
                hits += 1
            else:
                misses += 1
    if first is None:
        raise MalformedTrace("trace has no process_spawn record")
    span = last - first
    per_token = []
    completed = failed = 0
    total_tokens = sum(tokens.values())
    for pid, (t_exit, status) in exits.items():
        if status != 0:
            failed += 1
            continue
        completed += 1
        n = tokens.get(pid, 0)
        if n:
            per_token.append((t_exit - arrivals[pid]) / n)
    per_token_arr = np.array(per_token) if per_token else np.zeros(1)
    return Metrics(
        throughput=total_tokens / span if span > 0 else 0.0,
        mean_latency_per_token=float(per_token_arr.mean()),
        p95_latency=float(np.percentile(per_token_arr, 95)),
        utilization=min(busy / span, 1.0) if span > 0 else 0.0,
        mean_batch_size=float(np.mean(batch_sizes)) if batch_sizes else 0.0,
        hit_rate=hits / (hits + misses) if hits + misses else 0.0,
        tokens=total_tokens,
        requests_completed=completed,
        requests_failed=failed,
        batches=len(batch_sizes),
        span=span,
    )


# -- trace auditors ---------------------------------------------------------------


@dataclass
class AuditReport:
    name: str
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        status = "ok" if self.ok else f"{len(self.violations)} violation(s)"
        return f"{self.name}: {status}"


def _replay_pool(trace):
    """Yield ``(time, records_at_time)`` groups in trace order."""
    group: list = []
    t = None
    for rec in trace:
        if group and rec["virtual_time"] != t:
            yield t, group
            group = []
        t = rec["virtual_time"]
        group.append(rec)
    if group:
        yield t, group


def check_no_starvation(trace, w_max: float, tol: float = 1e-12) -> AuditReport:
    """Every request is dispatched within ``w_max`` plus the cost of the batch
    in flight at its deadline."""
    report = AuditReport("no-starvation")
    enqueued: dict[int, float] = {}
    batches = []  # (formed_at, completes_at)
    for rec in trace:
        kind = rec["event_type"]
        if kind == "pred_enqueue":
            enqueued[rec["detail"]["req"]] = rec["virtual_time"]
        elif kind == "batch_dispatch":
            d = rec["detail"]
            batches.append((rec["virtual_time"], rec["virtual_time"] + d["cost"], d["requests"]))
    for formed, _, reqs in batches:
        for r in reqs:
            enq = enqueued.get(r["req"])
            if enq is None:
                report.violations.append(f"request {r['req']} dispatched but never enqueued")
                continue
            deadline = enq + w_max
            in_flight = [c - deadline for f, c, _ in batches if f <= deadline < c]
            bound = deadline + (max(in_flight) if in_flight else 0.0)
            if formed > bound + tol:
                report.violations.append(f"request {r['req']} waited {formed - enq:.6g}s (bound {bound - enq:.6g}s)")
    return report


def check_work_conservation(trace, w_max: float, tol: float = 1e-12) -> AuditReport:
    """The device is only idle with a nonempty pool while the batching policy
    is legitimately waiting: pool below target size and before the oldest
    request's deadline, with the next decision point no later than that deadline."""
    report = AuditReport("work-conservation")
    pool: deque = deque()
    busy_until = -math.inf
    target = 1
    pending: tuple[float, float] | None = None  # (time, deadline) of an idle wait
    for t, records in _replay_pool(trace):
        if pending is not None and t > pending[1] + tol:
            report.violations.append(f"idle with nonempty pool from {pending[0]:.9g} past deadline {pending[1]:.9g}")
        pending = None
        for rec in records:
            kind = rec["event_type"]
            if kind == "pred_enqueue":
                pool.append((rec["detail"]["req"], t))
                target = rec["detail"]["target"]
            elif kind == "batch_dispatch":
                if t < busy_until - tol:
                    report.violations.append(f"batch dispatched at {t:.9g} while device busy until {busy_until:.9g}")
                ids = {r["req"] for r in rec["detail"]["requests"]}
                head = [pool.popleft()[0] for _ in range(len(ids)) if pool]
                if set(head) != ids:
                    report.violations.append(f"batch at {t:.9g} is not the FIFO head of the pool")
                busy_until = t + rec["detail"]["cost"]
        if pool and t >= busy_until - tol:
            oldest = pool[0][1]
            if len(pool) >= target or t >= oldest + w_max - tol:
                report.violations.append(f"device idle at {t:.9g} although dispatch was due")
            else:
                pending = (t, oldest + w_max)
    return report


def mean_batch_size(trace) -> float:
    sizes = [r["detail"]["size"] for r in trace if r["event_type"] == "batch_dispatch"]
    return float(np.mean(sizes)) if sizes else 0.0
