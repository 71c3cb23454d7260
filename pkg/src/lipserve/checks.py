"""Invariant auditors runnable outside the test suite (``lipserve check``)."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import LipError, PositionConflict
from .kernel import Kernel, KernelConfig, check_transitions
from .kvfs import Kvfs
from .model import MockModel, ModelConfig, oracle_from_scratch
from .scheduler import check_no_starvation, check_work_conservation


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def __str__(self):
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def one_shot_pred(tokens):
    """LIP issuing a single ``pred`` on a fresh file, then exiting."""

    def body(ctx):
        kv = ctx.kv_create(None)
        yield ctx.pred(kv, tokens)
        ctx.kv_remove(kv)

    return body


def poisson_pred_run(n: int, rate: float, seed: int = 0, tokens_per_request: int = 1, config: KernelConfig | None = None) -> Kernel:
    """``n`` single-``pred`` LIPs arriving as a Poisson process at ``rate``."""
    kernel = Kernel(config)
    rng = np.random.default_rng(seed)
    t = 0.0
    for i in range(n):
        t += rng.exponential(1.0 / rate)
        toks = [(int(x), j) for j, x in enumerate(rng.integers(1, 256, tokens_per_request))]
        kernel.spawn(one_shot_pred(toks), at=t)
    return kernel.run()


def random_pred_session(rng: np.random.Generator, fs: Kvfs, model: MockModel, max_len: int = 512):
    """Drive one random sequence through ``pred``-style appends with interleaved
    fork/extract/merge rewrites; return ``(sequence, dists)`` for oracle comparison.

    Rewrites only ever replace the working file by one with identical
    logical content, so the concatenated distributions must equal the
    from-scratch recomputation of the whole sequence.
    """
    length = int(rng.integers(1, max_len + 1))
    tokens = rng.integers(0, model.config.vocab_size, length)
    gaps = rng.integers(1, 4, length)
    positions = np.cumsum(gaps) - 1
    seq = [(int(t), int(p)) for t, p in zip(tokens, positions)]
    kv = fs.create(None)
    got = []
    i = 0
    while i < length:
        n = int(rng.integers(1, min(64, length - i) + 1))
        entries, dists = model.compute_pred(kv, seq[i : i + n])
        fs.append(kv, entries)
        got.extend(dists[k] for k in range(n))
        i += n
        op = rng.integers(4)
        if op == 1:
            other = fs.fork(kv)
            fs.remove(kv)
            kv = other
        elif op == 2:
            other = fs.extract(kv, range(kv.length))
            fs.remove(kv)
            kv = other
        elif op == 3 and kv.length > 1:
            cut = int(rng.integers(1, kv.length))
            a = fs.extract(kv, range(cut))
            b = fs.extract(kv, range(cut, kv.length))
            parts = [b, a] if rng.random() < 0.5 else [a, b]
            merged = fs.merge(parts)
            for f in (a, b, kv):
                fs.remove(f)
            kv = merged
    fs.remove(kv)
    return seq, got


def check_cache_correctness(cases: int = 200, seed: int = 0, max_len: int = 512) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = MockModel(ModelConfig())
    fs = Kvfs(debug=False)
    for c in range(cases):
        seq, got = random_pred_session(rng, fs, model, max_len)
        want = oracle_from_scratch(seq, model.config)
        if len(got) != len(want) or not all(np.array_equal(a, b) for a, b in zip(got, want)):
            return CheckResult("cache-correctness", False, f"case {c} differs from the from-scratch oracle")
    if fs.pool.allocated["device"]:
        return CheckResult("cache-correctness", False, "pages leaked")
    return CheckResult("cache-correctness", True, f"{cases} random sessions match the oracle bitwise")


class ShadowFs:
    """Deep-copy reference semantics for KVFS content operations."""

    def __init__(self):
        self.files: dict[int, list] = {}

    def create(self, fid):
        self.files[fid] = []

    def fork(self, src, fid):
        self.files[fid] = copy.deepcopy(self.files[src])

    def append(self, fid, entries):
        self.files[fid].extend(entries)

    def extract(self, src, idx, fid):
        self.files[fid] = [self.files[src][i] for i in idx]

    def merge(self, srcs, fid):
        self.files[fid] = sorted((e for s in srcs for e in self.files[s]), key=lambda e: e.position)

    def remove(self, fid):
        del self.files[fid]


def random_kvfs_ops(rng: np.random.Generator, n_ops: int, page_size: int = 4, device_capacity: int = 1 << 16):
    """Apply ``n_ops`` random operations to a debug-audited KVFS and a shadow; yield after each op."""
    fs = Kvfs(page_size=page_size, device_capacity=device_capacity, debug=True)
    model = MockModel()
    shadow = ShadowFs()
    live: list = []
    for _ in range(n_ops):
        op = rng.integers(6) if live else 0
        if op == 0:
            f = fs.create(None)
            shadow.create(f.id)
            live.append(f)
        elif op == 1:
            src = live[rng.integers(len(live))]
            f = fs.fork(src)
            shadow.fork(src.id, f.id)
            live.append(f)
        elif op in (2, 3):
            f = live[rng.integers(len(live))]
            n = int(rng.integers(1, 3 * page_size))
            start = f.max_position + 1
            toks = [(int(t), start + k) for k, t in enumerate(rng.integers(0, 256, n))]
            entries, _ = model.compute_pred(f, toks)
            fs.append(f, entries)
            shadow.append(f.id, entries)
        elif op == 4:
            src = live[rng.integers(len(live))]
            idx = sorted(set(int(i) for i in rng.integers(0, max(src.length, 1), rng.integers(0, src.length + 1)))) if src.length else []
            f = fs.extract(src, idx)
            shadow.extract(src.id, idx, f.id)
            live.append(f)
        else:
            if rng.random() < 0.5 and len(live) > 1:
                f = live.pop(rng.integers(len(live)))
                fs.remove(f)
                shadow.remove(f.id)
            else:
                a, b = (live[i] for i in rng.choice(len(live), 2)) if len(live) > 1 else (live[0], live[0])
                try:
                    f = fs.merge([a, b])
                except PositionConflict:
                    yield fs, shadow, live
                    continue
                shadow.merge([a.id, b.id], f.id)
                live.append(f)
        yield fs, shadow, live


def check_cow_shadow(sequences: int = 20, n_ops: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for s in range(sequences):
        for fs, shadow, live in random_kvfs_ops(rng, n_ops):
            for f in live:
                if fs.read(f) != shadow.files[f.id]:
                    return CheckResult("cow-isolation", False, f"sequence {s}: file {f.id} diverged from deep-copy shadow")
        for f in list(live):
            fs.remove(f)
        if fs.pool.allocated["device"] != 0:
            return CheckResult("cow-isolation", False, f"sequence {s}: pages leaked after removing every file")
    return CheckResult("cow-isolation", True, f"{sequences} sequences x {n_ops} ops match deep-copy semantics, no leaks")


def check_scheduler(n: int = 2000, rate: float = 1000.0, seed: int = 0) -> list[CheckResult]:
    kernel = poisson_pred_run(n, rate, seed)
    w = kernel.config.scheduler.w_max
    out = []
    for report in (check_no_starvation(kernel.trace, w), check_work_conservation(kernel.trace, w)):
        out.append(CheckResult(report.name, report.ok, "; ".join(report.violations[:3]) or f"{n} requests at {rate:g}/s"))
    bad = check_transitions(kernel.trace)
    out.append(CheckResult("thread-transitions", not bad, "; ".join(bad[:3]) or "all transitions legal"))
    out.append(CheckResult("quiescence", kernel.quiescent(), "pool empty, no queued requests" if kernel.quiescent() else "work left over"))
    return out


def run_checks(quick: bool = False) -> list[CheckResult]:
    results = []
    try:
        results.append(check_cache_correctness(50 if quick else 200))
        results.append(check_cow_shadow(5 if quick else 20))
        results.extend(check_scheduler(500 if quick else 2000))
    except (LipError, AssertionError) as exc:
        results.append(CheckResult("auditor", False, f"{type(exc).__name__}: {exc}"))
    return results
