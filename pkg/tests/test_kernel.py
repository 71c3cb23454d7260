import io
import json

import numpy as np
import pytest

from lipserve.decoding import SamplerSpec, greedy
from lipserve.errors import (
    CrossProcessJoin,
    IllegalTransition,
    KernelShuttingDown,
    LipError,
    NoSuchProcess,
    NoSuchThread,
    NoSuchTool,
    PermissionDenied,
    PositionConflict,
    RestoreFailed,
)
from lipserve.kernel import Kernel, KernelConfig, KvfsConfig, ThreadState, check_transitions
from lipserve.kvfs import Caller
from lipserve.model import oracle_from_scratch
from lipserve.programs import install_prefix, parallel_generation


def pairs(tokens, start=0):
    return [(t, start + i) for i, t in enumerate(tokens)]


def run(body, *args, config=None, **kw):
    kernel = Kernel(config, **kw)
    pid = kernel.spawn(body, *args)
    kernel.run()
    return kernel, pid


# -- pred ----------------------------------------------------------------------------------


def test_pred_returns_one_dist_per_token_and_grows_file():
    seen = {}

    def body(ctx):
        kv = ctx.kv_create("f")
        dists = yield ctx.pred(kv, pairs([3, 4, 5, 6]))
        seen["n"], seen["len"] = len(dists), kv.length
        seen["empty"] = (yield ctx.pred(kv, []))

    kernel, _ = run(body)
    assert seen == {"n": 4, "len": 4, "empty": []}
    assert kernel.quiescent()


def test_pred_results_match_oracle_across_calls():
    got = []

    def body(ctx):
        kv = ctx.kv_create(None)
        for chunk in ([5, 1, 9], [2], [7, 7]):
            got.extend((yield ctx.pred(kv, pairs(chunk, kv.length))))

    run(body)
    want = oracle_from_scratch(pairs([5, 1, 9, 2, 7, 7]), Kernel().backend.config)
    assert all(np.array_equal(a, b) for a, b in zip(got, want))


def test_pred_errors_are_raised_in_the_lip():
    caught = []

    def body(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, pairs([1, 2]))
        try:
            yield ctx.pred(kv, [(3, 1)])
        except PositionConflict:
            caught.append("position")
        shared = ctx.kv_open("sys.kv")
        try:
            yield ctx.pred(shared, [(3, 99)])
        except PermissionDenied:
            caught.append("perm")

    kernel = Kernel()
    install_prefix(kernel.fs, kernel.backend, "sys.kv", [1, 2, 3])
    kernel.spawn(body)
    kernel.run()
    assert caught == ["position", "perm"]


def test_same_window_preds_share_a_batch():
    def body(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, pairs([1] * 3000))

    kernel = Kernel()
    kernel.spawn(body)
    kernel.spawn(body)
    # two simultaneous arrivals push the rate estimate (and B*) up, so the
    # pool waits out the window and picks up these two as well
    kernel.spawn(body, at=0.001)
    kernel.spawn(body, at=0.002)
    kernel.run()
    (batch,) = kernel.trace.of_type("batch_dispatch")
    assert batch["detail"]["size"] == 4 and batch["detail"]["reason"] == "deadline"
    assert batch["virtual_time"] == pytest.approx(0.010)


# -- threads ------------------------------------------------------------------------------------


def test_fig3_parallel_generation():
    kernel = Kernel()
    prefix = install_prefix(kernel.fs, kernel.backend, "sys_msg.kv", list(range(1, 101)))
    outputs = []
    kernel.spawn(parallel_generation("sys_msg.kv", [[40 + i] for i in range(4)], outputs, SamplerSpec("temperature", rng_seed=3)))
    kernel.run()
    creates = [r for r in kernel.trace.of_type("thread_create") if r["detail"]["parent"] is not None]
    assert len(creates) == 4 and len(outputs) == 4
    assert all(o[-1] == 0 and 0 not in o[:-1] for o in outputs)
    assert prefix.length == 100
    assert not check_transitions(kernel.trace)


def test_eight_forks_are_independent():
    results = {}

    def worker(ctx, kv, i):
        pos = kv.max_position + 1
        t = 10 + i
        out = []
        for k in range(5):
            d = yield ctx.pred(kv, [(t, pos + k)])
            t = greedy(d[0])
            out.append(t)
        results[i] = (out, ctx.kv_read(kv))

    def main(ctx):
        prefix = ctx.kv_open("p.kv")
        tids = [ctx.thread_create(worker, ctx.kv_fork(prefix), i) for i in range(8)]
        yield ctx.join_all()
        results["tids"] = tids

    kernel = Kernel()
    prefix = install_prefix(kernel.fs, kernel.backend, "p.kv", list(range(1, 41)))
    before = kernel.fs.read(prefix)
    kernel.spawn(main)
    kernel.run()
    assert kernel.fs.read(prefix) == before
    for i in range(8):
        out, content = results[i]
        assert content[:40] == before and len(content) == 45
        # each continuation is what a from-scratch run of its own history predicts
        hist = [(e.token, e.position) for e in content]
        want = [greedy(d) for d in oracle_from_scratch(hist, kernel.backend.config)[40:]]
        assert out == want
    assert len({tuple(results[i][0]) for i in range(8)}) > 1


def test_thread_create_moves_handles():
    seen = {}

    def child(ctx, kv):
        seen["child_has"] = kv.id in ctx._t.handles
        yield ctx.sched_yield()

    def main(ctx):
        kv = ctx.kv_create(None)
        ctx.thread_create(child, kv)
        seen["parent_has"] = kv.id in ctx._t.handles
        yield ctx.join_all()

    run(main)
    assert seen == {"child_has": True, "parent_has": False}


def test_join_errors():
    caught = []

    def other(ctx):
        yield ctx.sched_yield()

    def body(ctx, foreign_tid):
        for tid in (10_000, foreign_tid):
            try:
                yield ctx.join(tid)
            except (NoSuchThread, CrossProcessJoin) as exc:
                caught.append(type(exc))

    kernel = Kernel()
    kernel.spawn(other)
    foreign = next(iter(kernel.threads))
    kernel.spawn(body, foreign)
    kernel.run()
    assert caught == [NoSuchThread, CrossProcessJoin]


def test_lip_failure_is_contained():
    def bad(ctx):
        yield ctx.sched_yield()
        raise RuntimeError("boom")

    def good(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, pairs([1]))
        ctx.emit(1)

    kernel = Kernel()
    a, b = kernel.spawn(bad), kernel.spawn(good)
    kernel.run()
    assert kernel.processes[a].exit_status == 1
    assert kernel.processes[b].exit_status == 0
    assert len(kernel.trace.of_type("thread_error")) == 1


def test_non_syscall_yield_raises_in_lip():
    caught = []

    def body(ctx):
        try:
            yield "not a syscall"
        except LipError:
            caught.append(True)

    run(body)
    assert caught == [True]


def test_spawn_after_shutdown():
    kernel = Kernel()
    kernel.shutdown()
    with pytest.raises(KernelShuttingDown):
        kernel.spawn(lambda ctx: None)


def test_illegal_transition_is_detected():
    kernel = Kernel()
    kernel.spawn(lambda ctx: None)
    kernel.run()
    th = next(iter(kernel.threads.values()))
    assert th.state is ThreadState.FINISHED
    with pytest.raises(IllegalTransition):
        kernel._transition(th, ThreadState.RUNNING)


def test_transition_auditor_flags_bad_trace():
    bad = [{"virtual_time": 0, "event_type": "thread_state", "pid": 1, "tid": 1, "detail": {"from": "Ready", "to": "Finished"}}]
    assert check_transitions(bad)


# -- I/O and offload -------------------------------------------------------------------------------


def big_file_lip(record, n=3000, latency=1.0):
    def body(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, pairs([7] * n))
        record["before"] = ctx.kv_read(kv)
        record["reply"] = yield ctx.io("echo", "ping", latency=latency)
        record["after"] = ctx.kv_read(kv)

    return body


def test_io_offloads_private_pages_for_the_wait():
    record = {}
    kernel = Kernel()
    kernel.spawn(big_file_lip(record))
    kernel.run(until=0.5)
    assert kernel.fs.pool.allocated == {"device": 0, "host": 188}
    kernel.run()
    assert kernel.fs.pool.allocated == {"device": 188, "host": 0}
    assert record["reply"] == "ping" and record["after"] == record["before"]
    start, done = kernel.trace.of_type("io_start")[0], kernel.trace.of_type("io_complete")[0]
    assert start["detail"]["offloaded_pages"] == 188 and done["detail"]["restored_pages"] == 188
    # two transfers of 188 pages plus the tool latency
    assert done["virtual_time"] - start["virtual_time"] == pytest.approx(1.0 + 2 * 188 * 1e-5)


def test_offload_can_be_disabled():
    record = {}
    kernel = Kernel(KernelConfig(offload_on_io=False))
    kernel.spawn(big_file_lip(record))
    kernel.run(until=0.5)
    assert kernel.fs.pool.allocated == {"device": 188, "host": 0}


def test_shared_file_stays_on_device():
    def waiter(ctx):
        ctx.kv_open("shared.kv")
        yield ctx.io("echo", None, latency=1.0)

    def main(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, pairs([1] * 64))
        ctx.kv_open("shared.kv")
        ctx.thread_create(waiter)
        yield ctx.sched_yield()  # let the child open its handle first
        yield ctx.io("echo", None, latency=1.0)
        yield ctx.join_all()

    kernel = Kernel()
    install_prefix(kernel.fs, kernel.backend, "shared.kv", [1] * 64)
    kernel.spawn(main)
    kernel.run(until=0.5)
    # main's 4 private pages moved; the shared file is held by two live threads
    assert kernel.fs.pool.allocated == {"device": 4, "host": 4}
    kernel.run()
    assert kernel.fs.pool.allocated == {"device": 8, "host": 0}


def test_restore_failure_is_raised_in_the_waiting_lip():
    caught = {}

    def sleeper(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, pairs([3] * 64))
        try:
            yield ctx.io("echo", None, latency=1.0)
        except RestoreFailed as exc:
            caught["files"] = [f.id for f in exc.files]
            caught["kv"] = kv.id
            caught["content"] = len(ctx.kv_read(kv))

    def hog(ctx):
        kv = ctx.kv_create("hog")
        yield ctx.pred(kv, pairs([5] * 16 * 6))

    kernel = Kernel(KernelConfig(kvfs=KvfsConfig(device_capacity=8)))
    kernel.spawn(sleeper)
    kernel.spawn(hog, at=0.5)
    kernel.run()
    assert caught == {"files": [caught["kv"]], "kv": caught["kv"], "content": 64}


def test_unknown_tool():
    caught = []

    def body(ctx):
        try:
            yield ctx.io("nope")
        except NoSuchTool:
            caught.append(True)

    run(body)
    assert caught == [True]


def test_configured_tools():
    got = {}

    def body(ctx):
        got["up"] = yield ctx.io("shout", "abc")
        got["t"] = ctx.now

    run(body, config=KernelConfig(tools={"shout": {"handler": "upper", "latency": 0.3}}))
    assert got == {"up": "ABC", "t": pytest.approx(0.3)}


# -- IPC -------------------------------------------------------------------------------------------


def test_send_recv_and_client_post():
    got = []

    def receiver(ctx):
        for _ in range(2):
            got.append((yield ctx.recv()))

    def sender(ctx, dst):
        ctx.send(dst, "hi")
        try:
            ctx.send(999, "lost")
        except NoSuchProcess:
            got.append("nsp")
        yield ctx.sched_yield()

    kernel = Kernel()
    r = kernel.spawn(receiver)
    kernel.post(r, "from client", at=2.0)
    s = kernel.spawn(sender, r, at=1.0)
    kernel.run()
    assert got == ["nsp", (s, "hi"), (0, "from client")]
    assert kernel.now == 2.0


# -- trace -----------------------------------------------------------------------------------------


def test_trace_sink_receives_every_record():
    buf = io.StringIO()
    kernel = Kernel(trace_sink=buf)
    kernel.spawn(big_file_lip({}, n=40, latency=0.1))
    kernel.run()
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert lines == kernel.trace.records
    assert {"virtual_time", "event_type", "pid", "tid", "detail"} <= set(lines[0])


def test_trace_keep_filters_memory_but_not_sink():
    buf = io.StringIO()
    kernel = Kernel(trace_sink=buf, trace_keep=("token",))
    kernel.spawn(lambda ctx: ctx.emit(5))
    kernel.run()
    assert [r["event_type"] for r in kernel.trace] == ["token"]
    assert len(buf.getvalue().splitlines()) > 1


def test_run_until_stops_at_the_horizon():
    kernel = Kernel()
    kernel.spawn(big_file_lip({}, n=10, latency=5.0))
    kernel.run(until=1.0)
    assert kernel.now == 1.0 and not kernel.quiescent()
    kernel.run()
    assert kernel.quiescent()


def test_caller_identity_follows_process_owner():
    seen = {}

    def body(ctx):
        seen["caller"] = ctx.caller
        yield ctx.sched_yield()

    kernel = Kernel()
    kernel.spawn(body, owner="carol")
    kernel.run()
    assert seen["caller"].principal == "carol" and isinstance(seen["caller"], Caller)


def test_opening_an_offloaded_file_restores_it():
    def sleeper(ctx):
        ctx.kv_open("doc.kv")
        yield ctx.io("echo", None, latency=1.0)

    def reader(ctx):
        kv = ctx.kv_open("doc.kv")
        mine = ctx.kv_fork(kv)
        yield ctx.pred(mine, [(9, 64)])

    kernel = Kernel()
    install_prefix(kernel.fs, kernel.backend, "doc.kv", [1] * 64)
    kernel.spawn(sleeper)
    kernel.run(until=0.5)
    assert kernel.fs.pool.allocated == {"device": 0, "host": 4}
    kernel.spawn(reader)
    kernel.run()
    assert [r["detail"]["pages"] for r in kernel.trace.of_type("fault_in")] == [4]
    assert all(p.exit_status == 0 for p in kernel.processes.values())
    assert kernel.fs.pool.allocated["host"] == 0
