"""The LIP kernel: processes, threads, system calls and the virtual-time event loop.

LIP bodies are generator functions taking a :class:`Context`. Non-blocking
system calls (all KVFS operations, ``thread_create``, ``send``) are plain
method calls. Blocking ones return a request object that the body yields::

    def body(ctx):
        kv = ctx.kv_create(None)
        dists = yield ctx.pred(kv, [(5, 0), (7, 1)])
        reply = yield ctx.io("echo", b"hello")

Errors raised by a system call are thrown back into the body at the
``yield`` (or raised directly for non-blocking calls); they never stop the
kernel. LIP code runs in zero virtual time; only I/O latency and device
batches advance the clock.
"""

from __future__ import annotations

import enum
import heapq
import inspect
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import (
    CrossProcessJoin,
    IllegalTransition,
    KernelShuttingDown,
    LipError,
    NoSuchProcess,
    NoSuchThread,
    NoSuchTool,
    PoolExhausted,
    RestoreFailed,
)
from .kvfs import HOST, Caller, KvFile, Kvfs
from .model import MockModel, ModelConfig
from .scheduler import BatchScheduler, PredRequest, SchedulerConfig, ThreadScheduler


class ThreadState(enum.Enum):
    READY = "Ready"
    RUNNING = "Running"
    BLOCKED_ON_PRED = "BlockedOnPred"
    WAITING_IO = "WaitingIO"
    FINISHED = "Finished"


S = ThreadState
LEGAL_TRANSITIONS = {
    (None, S.READY),
    (S.READY, S.RUNNING),
    (S.RUNNING, S.READY),
    (S.RUNNING, S.BLOCKED_ON_PRED),
    (S.RUNNING, S.WAITING_IO),
    (S.RUNNING, S.FINISHED),
    (S.BLOCKED_ON_PRED, S.READY),
    (S.WAITING_IO, S.READY),
}


# -- blocking syscall requests -------------------------------------------------


@dataclass
class Pred:
    kv: KvFile
    tokens: list


@dataclass
class Io:
    tool: str
    payload: Any
    latency: float | None = None


@dataclass
class Join:
    tids: list | None  # None joins every other thread of the process


@dataclass
class Recv:
    pass


@dataclass
class SchedYield:
    pass


@dataclass
class Tool:
    handler: Callable[[Any], Any]
    latency: float


def echo_tool(payload):
    return payload


class ToolRegistry:
    """In-process tool handlers keyed by name, each with a declared virtual latency."""

    def __init__(self):
        self._tools: dict[str, Tool] = {}
        self.register("echo", echo_tool, 0.05)

    def register(self, name: str, handler: Callable[[Any], Any], latency: float) -> None:
        if latency < 0:
            raise ValueError("tool latency must be non-negative")
        self._tools[name] = Tool(handler, latency)

    def __getitem__(self, name: str) -> Tool:
        try:
            return self._tools[name]
        except KeyError:
            raise NoSuchTool(name) from None

    def __contains__(self, name):
        return name in self._tools


# -- trace -------------------------------------------------------------------------


class Trace:
    """Ordered event records; optionally streamed to a JSON-lines file.

    ``keep`` restricts which event types are held in memory; the sink
    always receives every record.
    """

    def __init__(self, sink=None, keep=None):
        self.records: list[dict] = []
        self._sink = sink
        self._keep = None if keep is None else frozenset(keep)

    def emit(self, time: float, event_type: str, pid=None, tid=None, **detail) -> None:
        if self._sink is None and self._keep is not None and event_type not in self._keep:
            return
        rec = {"virtual_time": time, "event_type": event_type, "pid": pid, "tid": tid, "detail": detail}
        if self._keep is None or event_type in self._keep:
            self.records.append(rec)
        if self._sink is not None:
            self._sink.write(json.dumps(rec, sort_keys=True) + "\n")

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def of_type(self, *types) -> list[dict]:
        return [r for r in self.records if r["event_type"] in types]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def check_transitions(trace) -> list[str]:
    """Replay ``thread_state`` records and list every illegal transition."""
    state: dict[int, ThreadState | None] = {}
    bad = []
    for rec in trace:
        if rec["event_type"] != "thread_state":
            continue
        tid = rec["tid"]
        src = ThreadState(rec["detail"]["from"]) if rec["detail"]["from"] else None
        dst = ThreadState(rec["detail"]["to"])
        if state.get(tid) != src:
            bad.append(f"thread {tid}: recorded from={src} but was {state.get(tid)}")
        if (src, dst) not in LEGAL_TRANSITIONS:
            bad.append(f"thread {tid}: illegal {src} -> {dst} at {rec['virtual_time']}")
        state[tid] = dst
    return bad


# -- processes and threads ------------------------------------------------------------


@dataclass(eq=False)
class LipThread:
    tid: int
    process: "LipProcess"
    body: Callable
    args: tuple
    state: ThreadState | None = None
    gen: Any = None
    handles: dict = field(default_factory=dict)
    result: Any = None
    error: BaseException | None = None
    started: bool = False
    resume_value: Any = None
    resume_error: BaseException | None = None
    joiners: list = field(default_factory=list)
    join_waiting: set | None = None

    @property
    def pid(self) -> int:
        return self.process.pid


@dataclass(eq=False)
class LipProcess:
    pid: int
    owner: str
    spawn_time: float
    name: str | None = None
    threads: dict = field(default_factory=dict)
    mailbox: deque = field(default_factory=deque)
    receivers: deque = field(default_factory=deque)
    exit_status: int | None = None

    @property
    def finished(self) -> bool:
        return self.exit_status is not None


# -- configuration -------------------------------------------------------------------


@dataclass
class KvfsConfig:
    page_size: int = 16
    device_capacity: int = 1 << 20
    host_capacity: int = 1 << 20
    debug: bool = False


@dataclass
class KernelConfig:
    kvfs: KvfsConfig = field(default_factory=KvfsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    offload_on_io: bool = True
    tools: dict = field(default_factory=dict)  # name -> {"handler": id, "latency": seconds}


TOOL_HANDLERS: dict[str, Callable[[Any], Any]] = {
    "echo": echo_tool,
    "upper": lambda p: p.upper() if hasattr(p, "upper") else p,
    "reverse": lambda p: p[::-1],
}


# -- the syscall surface --------------------------------------------------------------


class Context:
    """System calls available to one LIP thread."""

    def __init__(self, kernel: "Kernel", thread: LipThread):
        self._k = kernel
        self._t = thread

    @property
    def pid(self) -> int:
        return self._t.pid

    @property
    def tid(self) -> int:
        return self._t.tid

    @property
    def now(self) -> float:
        return self._k.now

    @property
    def model_config(self) -> ModelConfig:
        return self._k.backend.config

    @property
    def caller(self) -> Caller:
        return Caller(self._t.process.owner, self._t.tid)

    def _hold(self, f: KvFile) -> KvFile:
        self._t.handles[f.id] = f
        return f

    # KVFS
    def kv_create(self, name=None, *, readable_by_all=False, writable_by_all=False) -> KvFile:
        return self._hold(self._k.fs.create(name, self.caller, readable_by_all=readable_by_all, writable_by_all=writable_by_all))

    def kv_open(self, name) -> KvFile:
        f = self._k.fs.open(name, self.caller)
        if HOST in f.residency():
            # offloaded for another thread's I/O wait; no longer exclusive, so bring it back
            moved = self._k.fs.restore(f)
            self.note("fault_in", file=f.id, pages=moved)
        return self._hold(f)

    def kv_close(self, kv: KvFile) -> None:
        self._k.fs.close(kv, self.caller)
        self._t.handles.pop(kv.id, None)

    def kv_remove(self, kv: KvFile) -> int:
        freed = self._k.fs.remove(kv, self.caller)
        self._t.handles.pop(kv.id, None)
        return freed

    def kv_fork(self, kv: KvFile, name=None) -> KvFile:
        return self._hold(self._k.fs.fork(kv, self.caller, name))

    def kv_extract(self, kv: KvFile, indices, name=None) -> KvFile:
        return self._hold(self._k.fs.extract(kv, indices, name, self.caller))

    def kv_merge(self, parts, name=None) -> KvFile:
        return self._hold(self._k.fs.merge(parts, name, self.caller))

    def kv_lock(self, kv: KvFile) -> None:
        self._k.fs.lock(kv, self.caller)

    def kv_unlock(self, kv: KvFile) -> None:
        self._k.fs.unlock(kv, self.caller)

    def kv_offload(self, kv: KvFile) -> int:
        return self._k.fs.offload(kv)

    def kv_restore(self, kv: KvFile) -> int:
        return self._k.fs.restore(kv)

    def kv_exists(self, name) -> bool:
        return self._k.fs.exists(name)

    def kv_read(self, kv: KvFile):
        return self._k.fs.read(kv, self.caller)

    # blocking calls: yield the returned request
    def pred(self, kv: KvFile, tokens) -> Pred:
        return Pred(kv, [(int(t), int(p)) for t, p in tokens])

    def io(self, tool: str, payload=None, latency: float | None = None) -> Io:
        return Io(tool, payload, latency)

    def join(self, tid: int) -> Join:
        return Join([tid])

    def join_all(self) -> Join:
        return Join(None)

    def recv(self) -> Recv:
        return Recv()

    def sched_yield(self) -> SchedYield:
        return SchedYield()

    # threads, processes, IPC
    def thread_create(self, body, *args) -> int:
        """Start a sibling thread. KV handles passed in ``args`` move to the new thread."""
        return self._k._create_thread(self._t.process, body, args, parent=self._t).tid

    def spawn(self, body, *args, owner=None, name=None) -> int:
        return self._k.spawn(body, *args, owner=owner or self._t.process.owner, name=name)

    def send(self, dst_pid: int, data) -> None:
        self._k._send(self._t, dst_pid, data)

    # observability
    def emit(self, token: int) -> None:
        """Deliver one generated token to the client (recorded in the trace)."""
        self._k.trace.emit(self._k.now, "token", self.pid, self.tid, token=int(token))

    def note(self, kind: str, **detail) -> None:
        self._k.trace.emit(self._k.now, kind, self.pid, self.tid, **detail)


# -- kernel ---------------------------------------------------------------------------


class Kernel:
    """Discrete-event kernel executing LIPs against a model backend.

    Parameters
    ----------
    config : KernelConfig, optional
    fs : Kvfs, optional
        Share an existing file system (files outlive any single kernel run).
    backend : optional
        Object with ``config`` and ``compute_pred(kv, tokens)``; defaults to the mock model.
    trace_sink : file-like, optional
        Receives the JSON-lines event trace as it is produced.
    trace_keep : iterable of str, optional
        Event types retained in memory (default: all).
    """

    def __init__(self, config: KernelConfig | None = None, *, fs: Kvfs | None = None, backend=None, trace_sink=None, trace_keep=None):
        self.config = config or KernelConfig()
        kc = self.config.kvfs
        self.fs = fs or Kvfs(kc.page_size, kc.device_capacity, kc.host_capacity, debug=kc.debug)
        self.backend = backend or MockModel(self.config.model)
        self.cost_model = self.config.scheduler.cost_model
        self.tools = ToolRegistry()
        for name, spec in self.config.tools.items():
            self.tools.register(name, TOOL_HANDLERS[spec.get("handler", name)], spec["latency"])
        self.trace = Trace(trace_sink, trace_keep)
        self.now = 0.0
        self.processes: dict[int, LipProcess] = {}
        self.threads: dict[int, LipThread] = {}
        self.thread_sched = ThreadScheduler()
        self.batch_sched = BatchScheduler(self.config.scheduler)
        self.inflight = None
        self.shutting_down = False
        self._events: list = []
        self._seq = itertools.count()
        self._pids = itertools.count(1)
        self._tids = itertools.count(1)
        self._req_ids = itertools.count(1)

    # -- events ---------------------------------------------------------------

    def _at(self, time: float, fn, *args) -> None:
        heapq.heappush(self._events, (time, next(self._seq), fn, args))

    def _transition(self, th: LipThread, dst: ThreadState) -> None:
        src = th.state
        if (src, dst) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"thread {th.tid}: {src} -> {dst}")
        th.state = dst
        self.trace.emit(self.now, "thread_state", th.pid, th.tid, **{"from": src.value if src else None, "to": dst.value})
        if dst is S.READY:
            self.thread_sched.push(th)

    def _wake(self, th: LipThread, value=None, error=None) -> None:
        th.resume_value, th.resume_error = value, error
        self._transition(th, S.READY)

    # -- process and thread creation -----------------------------------------------

    def spawn(self, body, *args, owner: str = "user", at: float | None = None, name: str | None = None) -> int:
        """Create a LIP process whose main thread runs ``body(ctx, *args)``.

        With ``at`` in the future the process arrives at that virtual time.
        """
        if self.shutting_down:
            raise KernelShuttingDown("kernel is shutting down")
        at = self.now if at is None else max(at, self.now)
        proc = LipProcess(next(self._pids), owner, at, name)
        self.processes[proc.pid] = proc
        if at > self.now:
            self._at(at, self._start_process, proc, body, args)
        else:
            self._start_process(proc, body, args)
        return proc.pid

    def _start_process(self, proc: LipProcess, body, args) -> None:
        self.trace.emit(self.now, "process_spawn", proc.pid, None, owner=proc.owner, name=proc.name)
        self._create_thread(proc, body, args)

    def _create_thread(self, proc: LipProcess, body, args, parent: LipThread | None = None) -> LipThread:
        th = LipThread(next(self._tids), proc, body, args)
        proc.threads[th.tid] = th
        self.threads[th.tid] = th
        if parent is not None:
            for a in args:
                if isinstance(a, KvFile) and a.id in parent.handles:
                    th.handles[a.id] = parent.handles.pop(a.id)
        self.trace.emit(self.now, "thread_create", proc.pid, th.tid, parent=parent.tid if parent else None)
        self._transition(th, S.READY)
        return th

    def shutdown(self) -> None:
        self.shutting_down = True

    # -- running threads ----------------------------------------------------------------

    def _run_thread(self, th: LipThread) -> None:
        self._transition(th, S.RUNNING)
        if not th.started:
            th.started = True
            try:
                out = th.body(Context(self, th), *th.args)
            except Exception as exc:
                self._finish(th, error=exc)
                return
            if not inspect.isgenerator(out):
                self._finish(th, result=out)
                return
            th.gen = out
        value, error = th.resume_value, th.resume_error
        th.resume_value = th.resume_error = None
        while True:
            try:
                req = th.gen.throw(error) if error is not None else th.gen.send(value)
            except StopIteration as stop:
                self._finish(th, result=stop.value)
                return
            except Exception as exc:
                self._finish(th, error=exc)
                return
            value = error = None
            try:
                if self._dispatch_syscall(th, req):
                    return
            except LipError as exc:
                error = exc
            value = th.resume_value
            th.resume_value = None

    def _dispatch_syscall(self, th: LipThread, req) -> bool:
        """Handle a yielded request. True when the thread left Running."""
        if isinstance(req, Pred):
            return self._sys_pred(th, req)
        if isinstance(req, Io):
            return self._sys_io(th, req)
        if isinstance(req, Join):
            return self._sys_join(th, req)
        if isinstance(req, Recv):
            return self._sys_recv(th)
        if isinstance(req, SchedYield):
            self._transition(th, S.READY)
            return True
        raise LipError(f"LIP yielded {req!r}, which is not a system call")

    def _finish(self, th: LipThread, result=None, error=None) -> None:
        th.result, th.error = result, error
        self._transition(th, S.FINISHED)
        if error is not None:
            self.trace.emit(self.now, "thread_error", th.pid, th.tid, error=f"{type(error).__name__}: {error}")
        for waiter in th.joiners:
            waiter.join_waiting.discard(th.tid)
            if not waiter.join_waiting:
                waiter.join_waiting = None
                self._wake(waiter)
        th.joiners.clear()
        proc = th.process
        if all(t.state is S.FINISHED for t in proc.threads.values()):
            if any(t.error is not None for t in proc.threads.values()):
                proc.exit_status = 1
            else:
                main = proc.threads[min(proc.threads)]
                proc.exit_status = main.result if isinstance(main.result, int) and not isinstance(main.result, bool) else 0
            self.trace.emit(self.now, "process_exit", proc.pid, None, status=proc.exit_status)

    # -- syscalls ----------------------------------------------------------------------------

    def _sys_pred(self, th: LipThread, req: Pred) -> bool:
        kv = req.kv
        self.fs.check_append(kv, [pos for _, pos in req.tokens], Caller(th.process.owner, th.tid))
        th.handles.setdefault(kv.id, kv)
        if not req.tokens:
            th.resume_value = []
            return False
        pr = PredRequest(next(self._req_ids), th.tid, th.pid, kv, req.tokens, self.now)
        self._transition(th, S.BLOCKED_ON_PRED)
        self.batch_sched.enqueue(pr)
        self.trace.emit(
            self.now, "pred_enqueue", th.pid, th.tid,
            req=pr.id, n_new=pr.n_new, rate=self.batch_sched.rate, target=self.batch_sched.target_size(),
        )
        return True

    def _offloadable(self, th: LipThread) -> list[KvFile]:
        others = set()
        for t in self.threads.values():
            if t is not th and t.state is not S.FINISHED:
                others.update(t.handles)
        return [f for fid, f in sorted(th.handles.items()) if fid not in others and not f.removed]

    def _sys_io(self, th: LipThread, req: Io) -> bool:
        tool = self.tools[req.tool]
        latency = tool.latency if req.latency is None else req.latency
        if latency < 0:
            raise LipError("I/O latency must be non-negative")
        offloaded = []
        moved = 0
        if self.config.offload_on_io:
            for f in self._offloadable(th):
                try:
                    n = self.fs.offload(f)
                except PoolExhausted:
                    continue
                moved += n
                if n:
                    offloaded.append(f)
        transfer = self.cost_model.transfer_cost * moved
        wake_at = self.now + transfer + latency + transfer
        self._transition(th, S.WAITING_IO)
        self.trace.emit(
            self.now, "io_start", th.pid, th.tid,
            tool=req.tool, latency=latency, offloaded_pages=moved, files=[f.id for f in offloaded], wake_at=wake_at,
        )
        self._at(wake_at, self._io_complete, th, tool, req.payload, offloaded)
        return True

    def _io_complete(self, th: LipThread, tool: Tool, payload, offloaded: list[KvFile]) -> None:
        restored = 0
        error = None
        for i, f in enumerate(offloaded):
            if f.removed:
                continue
            try:
                restored += self.fs.restore(f)
            except PoolExhausted as exc:
                error = RestoreFailed([g for g in offloaded[i:] if not g.removed], exc)
                break
        self.trace.emit(self.now, "io_complete", th.pid, th.tid, restored_pages=restored, restore_failed=error is not None)
        if error is not None:
            self._wake(th, error=error)
            return
        try:
            result = tool.handler(payload)
        except Exception as exc:
            self._wake(th, error=LipError(f"tool failed: {exc}"))
            return
        self._wake(th, value=result)

    def _sys_join(self, th: LipThread, req: Join) -> bool:
        proc = th.process
        if req.tids is None:
            targets = [t for tid, t in proc.threads.items() if tid != th.tid]
        else:
            targets = []
            for tid in req.tids:
                t = self.threads.get(tid)
                if t is None:
                    raise NoSuchThread(tid)
                if t.process is not proc:
                    raise CrossProcessJoin(f"thread {tid} belongs to process {t.pid}")
                targets.append(t)
        waiting = {t.tid for t in targets if t.state is not S.FINISHED and t is not th}
        if not waiting:
            return False
        th.join_waiting = waiting
        for tid in waiting:
            self.threads[tid].joiners.append(th)
        self._transition(th, S.WAITING_IO)
        return True

    def _send(self, th: LipThread, dst_pid: int, data) -> None:
        proc = self.processes.get(dst_pid)
        if proc is None:
            raise NoSuchProcess(dst_pid)
        self.trace.emit(self.now, "ipc_send", th.pid, th.tid, dst=dst_pid)
        msg = (th.pid, data)
        if proc.receivers:
            waiter = proc.receivers.popleft()
            self.trace.emit(self.now, "ipc_recv", waiter.pid, waiter.tid, src=th.pid)
            self._wake(waiter, value=msg)
        else:
            proc.mailbox.append(msg)

    def post(self, dst_pid: int, data, at: float | None = None, src: int = 0) -> None:
        """Deliver a message from outside the kernel (``src`` 0 denotes the client)."""

        def deliver():
            proc = self.processes[dst_pid]
            if proc.receivers:
                waiter = proc.receivers.popleft()
                self.trace.emit(self.now, "ipc_recv", waiter.pid, waiter.tid, src=src)
                self._wake(waiter, value=(src, data))
            else:
                proc.mailbox.append((src, data))

        if dst_pid not in self.processes:
            raise NoSuchProcess(dst_pid)
        self._at(self.now if at is None else at, deliver)

    def _sys_recv(self, th: LipThread) -> bool:
        proc = th.process
        if proc.mailbox:
            msg = proc.mailbox.popleft()
            self.trace.emit(self.now, "ipc_recv", th.pid, th.tid, src=msg[0])
            th.resume_value = msg
            return False
        proc.receivers.append(th)
        self._transition(th, S.WAITING_IO)
        return True

    # -- device -----------------------------------------------------------------------------

    def _execute_batch(self, batch) -> None:
        items = []
        detail = []
        for req in batch.requests:
            th = self.threads[req.tid]
            try:
                entries, dists = self.backend.compute_pred(req.kv, req.tokens)
                self.fs.append(req.kv, entries, Caller(th.process.owner, th.tid))
            except LipError as exc:
                req.error = exc
                detail.append({"req": req.id, "tid": req.tid, "n_new": req.n_new, "n_ctx": 0, "ok": False, "error": type(exc).__name__})
                continue
            req.result = dists
            req.n_ctx = req.kv.length
            items.append((req.n_new, req.n_ctx))
            detail.append({"req": req.id, "tid": req.tid, "n_new": req.n_new, "n_ctx": req.n_ctx, "ok": True})
        batch.cost = self.cost_model.batch_cost(items)
        self.inflight = batch
        self.trace.emit(
            self.now, "batch_dispatch", None, None,
            batch=batch.id, size=len(batch.requests), cost=batch.cost, reason=batch.reason, requests=detail,
        )
        self._at(batch.completes_at, self._complete_batch, batch)

    def _complete_batch(self, batch) -> None:
        self.inflight = None
        self.trace.emit(self.now, "batch_complete", None, None, batch=batch.id)
        for req in batch.requests:
            self._wake(self.threads[req.tid], value=req.result, error=req.error)

    # -- main loop ---------------------------------------------------------------------------

    def _drain_ready(self) -> None:
        while True:
            th = self.thread_sched.pop()
            if th is None:
                return
            self._run_thread(th)

    def _settle(self) -> None:
        """Run every Ready thread, then let the batch scheduler decide."""
        self._drain_ready()
        if self.inflight is None:
            batch = self.batch_sched.form_batch(self.now)
            if batch is not None:
                self._execute_batch(batch)

    def _next_time(self) -> float | None:
        candidates = []
        if self._events:
            candidates.append(self._events[0][0])
        if self.inflight is None and self.batch_sched.pool:
            candidates.append(self.batch_sched.deadline())
        return min(candidates) if candidates else None

    def run(self, until: float | None = None) -> "Kernel":
        """Run until nothing is left to do, or until virtual time would pass ``until``."""
        while True:
            self._settle()
            nxt = self._next_time()
            if nxt is None:
                break
            if until is not None and nxt > until:
                self.now = max(self.now, until)
                break
            self.now = max(self.now, nxt)
            while self._events and self._events[0][0] <= self.now:
                _, _, fn, args = heapq.heappop(self._events)
                fn(*args)
        return self

    def quiescent(self) -> bool:
        return (
            all(p.finished for p in self.processes.values())
            and not self.batch_sched.pool
            and self.inflight is None
            and not self.thread_sched
        )

    def blocked_threads(self) -> list[LipThread]:
        return [t for t in self.threads.values() if t.state not in (S.FINISHED, None)]
