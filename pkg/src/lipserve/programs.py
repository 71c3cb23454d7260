"""Bundled example LIPs and a self-checking runner for them.

Each factory returns a LIP body (a generator function taking ``ctx``)
closed over its parameters; results are written into caller-provided
containers so tests can inspect them after ``Kernel.run``.
"""

from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .decoding import SamplerSpec, TokenAutomaton, constrained_next, greedy, sample, speculative_verify
from .kernel import Kernel, KernelConfig, check_transitions
from .kvfs import Caller, Kvfs
from .model import MockModel, ModelConfig, chain_fingerprint, next_dist


def load_automaton(name: str) -> TokenAutomaton:
    """Load one of the bundled automata (``number_list`` or ``alternating``)."""
    with resources.files("lipserve").joinpath(f"automata/{name}.json").open() as fh:
        return TokenAutomaton.from_dict(json.load(fh))


def install_prefix(fs: Kvfs, model: MockModel, name: str, tokens, owner: str = "admin"):
    """Precompute a shared prefix file: readable by every LIP, writable only by ``owner``."""
    f = fs.create(name, Caller(owner), readable_by_all=True)
    entries, _ = model.compute_pred(f, [(t, i) for i, t in enumerate(tokens)])
    fs.append(f, entries, Caller(owner))
    return f


# -- parallel generation with a shared prefix ---------------------------------------


def _generate_until_eos(ctx, kv, suffix, pos, spec: SamplerSpec, seed, out: list, max_tokens: int):
    eos = ctx.model_config.eos_token
    rng = np.random.default_rng(seed)
    feed = [(t, pos + i) for i, t in enumerate(suffix)]
    step = len(feed)
    while True:
        dists = yield ctx.pred(kv, feed)
        t = sample(dists[-1], spec, rng)
        out.append(t)
        ctx.emit(t)
        if t == eos or len(out) >= max_tokens:
            break
        feed = [(t, pos + step)]
        step += 1
    ctx.kv_remove(kv)


def parallel_generation(prefix_name: str, suffixes, outputs: list, spec: SamplerSpec | None = None, max_tokens: int = 8192):
    """Fork a shared prefix once per suffix and generate each continuation in its own thread."""
    spec = spec or SamplerSpec("temperature", temperature=1.0, rng_seed=0)

    def main(ctx):
        prefix = ctx.kv_open(prefix_name)
        for i, suffix in enumerate(suffixes):
            out: list = []
            outputs.append(out)
            kv = ctx.kv_fork(prefix)
            ctx.thread_create(_generate_until_eos, kv, suffix, len(prefix), spec, [spec.rng_seed, i], out, max_tokens)
        yield ctx.join_all()
        ctx.kv_close(prefix)

    return main


# -- greedy and speculative decoding -------------------------------------------------


def _pairs(tokens, start=0):
    return [(int(t), start + i) for i, t in enumerate(tokens)]


def greedy_lip(prompt, gen_len: int, out: list):
    """Plain greedy decoding, one token per ``pred``."""

    def body(ctx):
        kv = ctx.kv_create(None)
        ctx_pairs = _pairs(prompt)
        if len(ctx_pairs) > 1:
            yield ctx.pred(kv, ctx_pairs[:-1])
        pending = ctx_pairs[-1]
        while len(out) < gen_len:
            dist = (yield ctx.pred(kv, [pending]))[0]
            t = greedy(dist)
            out.append(t)
            ctx.emit(t)
            pending = (t, pending[1] + 1)
        ctx.kv_remove(kv)

    return body


class OracleDrafter:
    """Draft model: the target model's own greedy continuation, corrupted at random.

    ``accuracy`` is the chance each drafted token is left intact.
    """

    def __init__(self, config: ModelConfig, accuracy: float = 0.7, seed: int = 0):
        self.config = config
        self.accuracy = accuracy
        self.rng = np.random.default_rng(seed)

    def __call__(self, history, k: int) -> list[int]:
        digest = self.config.model_seed
        for t, p in history:
            digest = chain_fingerprint(digest, t, p)
        pos = history[-1][1]
        draft = []
        for _ in range(k):
            t = greedy(next_dist(digest, self.config))
            if self.rng.random() >= self.accuracy:
                t = int(self.rng.integers(self.config.vocab_size))
            draft.append(t)
            pos += 1
            digest = chain_fingerprint(digest, t, pos)
        return draft


class RandomDrafter:
    def __init__(self, vocab_size: int, seed: int = 0):
        self.vocab_size = vocab_size
        self.rng = np.random.default_rng(seed)

    def __call__(self, history, k: int) -> list[int]:
        return [int(t) for t in self.rng.integers(self.vocab_size, size=k)]


def speculative_lip(prompt, gen_len: int, drafter, out: list, k: int = 4, stats: dict | None = None):
    """Greedy speculative decoding; rejected draft entries are dropped with ``kv_extract``.

    Each round feeds the pending token plus ``k`` drafted tokens in one
    ``pred`` call, keeps the verified prefix and rolls the file back to it.
    """

    def body(ctx):
        kv = ctx.kv_create(None)
        history = _pairs(prompt)
        if len(history) > 1:
            yield ctx.pred(kv, history[:-1])
        pending = history[-1]
        while len(out) < gen_len:
            n = min(k, gen_len - len(out) - 1)
            draft = drafter(history, n) if n > 0 else []
            feed = [pending] + [(t, pending[1] + 1 + i) for i, t in enumerate(draft)]
            dists = yield ctx.pred(kv, feed)
            accepted, correction = speculative_verify(draft, dists[: len(draft)])
            nxt = correction if correction is not None else greedy(dists[len(draft)])
            if accepted < len(draft):
                keep = kv.length - (len(draft) - accepted)
                trimmed = ctx.kv_extract(kv, range(keep))
                ctx.kv_remove(kv)
                kv = trimmed
            new = draft[:accepted] + [nxt]
            for t in new:
                out.append(t)
                ctx.emit(t)
            history.extend(feed[1 : 1 + accepted])
            pending = (nxt, pending[1] + 1 + accepted)
            history.append(pending)
            if stats is not None:
                stats["rounds"] = stats.get("rounds", 0) + 1
                stats["accepted"] = stats.get("accepted", 0) + accepted
        ctx.kv_remove(kv)

    return body


# -- constrained decoding -------------------------------------------------------------------


@dataclass
class ConstrainedRun:
    tokens: list
    states: list  # state before each token
    final_state: object


def constrained_lip(aut: TokenAutomaton, prompt, runs: list, spec: SamplerSpec | None = None, max_tokens: int = 100_000):
    """Sample under ``aut`` until EOS and record every token with its pre-state."""
    spec = spec or SamplerSpec("temperature", temperature=1.0, rng_seed=0)

    def body(ctx):
        eos = ctx.model_config.eos_token
        rng = spec.rng()
        kv = ctx.kv_create(None)
        feed = _pairs(prompt)
        pos = len(feed)
        state = aut.start
        run = ConstrainedRun([], [], None)
        while True:
            dists = yield ctx.pred(kv, feed)
            run.states.append(state)
            t, state = constrained_next(dists[-1], state, aut, spec, rng)
            run.tokens.append(t)
            ctx.emit(t)
            if t == eos or len(run.tokens) >= max_tokens:
                break
            feed = [(t, pos)]
            pos += 1
        run.final_state = state
        runs.append(run)
        ctx.kv_remove(kv)

    return body


# -- function calling ----------------------------------------------------------------------------


def function_calling_lip(prompt, tool: str, record: dict, gen_before: int = 8, gen_after: int = 8):
    """Generate, call an external tool via ``sys_io``, feed the reply back, keep generating."""

    def body(ctx):
        kv = ctx.kv_create(None)
        feed = _pairs(prompt)
        pos = len(feed)
        tokens = []
        for _ in range(gen_before):
            dists = yield ctx.pred(kv, feed)
            t = greedy(dists[-1])
            tokens.append(t)
            feed = [(t, pos)]
            pos += 1
        yield ctx.pred(kv, feed)
        pos = kv.max_position + 1
        query = bytes(t % 256 for t in tokens)
        record["before_io"] = ctx.kv_read(kv)
        record["io_start"] = ctx.now
        reply = yield ctx.io(tool, query)
        record["io_end"] = ctx.now
        record["after_io"] = ctx.kv_read(kv)
        record["query"], record["reply"] = query, reply
        feed = [(b, pos + i) for i, b in enumerate(reply)] or [(0, pos)]
        pos += len(feed)
        for _ in range(gen_after):
            dists = yield ctx.pred(kv, feed)
            t = greedy(dists[-1])
            tokens.append(t)
            ctx.emit(t)
            feed = [(t, pos)]
            pos += 1
        record["tokens"] = tokens
        ctx.kv_remove(kv)

    return body


# -- cooperating agents -----------------------------------------------------------------------------


def agent_writer(prompt, n: int, peer_pid_box: list, client_rtt: float | None = None):
    """Agent A: generate ``n`` tokens and hand them to agent B.

    With ``client_rtt`` the hand-off goes through a client round trip
    (modelled as an I/O wait) instead of direct IPC.
    """

    def body(ctx):
        kv = ctx.kv_create(None)
        feed = _pairs(prompt)
        pos = len(feed)
        out = []
        for _ in range(n):
            dists = yield ctx.pred(kv, feed)
            t = greedy(dists[-1])
            out.append(t)
            feed = [(t, pos)]
            pos += 1
        ctx.kv_remove(kv)
        if client_rtt is not None:
            out = yield ctx.io("echo", out, latency=client_rtt)
        ctx.send(peer_pid_box[0], out)

    return body


def agent_reader(n: int, record: dict):
    """Agent B: wait for A's text, use it as its prompt, generate ``n`` tokens."""

    def body(ctx):
        src, text = yield ctx.recv()
        record["received_from"] = src
        record["received_at"] = ctx.now
        kv = ctx.kv_create(None)
        feed = _pairs(text)
        pos = len(feed)
        out = []
        for _ in range(n):
            dists = yield ctx.pred(kv, feed)
            t = greedy(dists[-1])
            out.append(t)
            ctx.emit(t)
            feed = [(t, pos)]
            pos += 1
        record["tokens"] = out
        record["done_at"] = ctx.now
        ctx.kv_remove(kv)

    return body


def run_agents(config: KernelConfig | None = None, client_rtt: float | None = None, n: int = 16) -> tuple[Kernel, dict]:
    kernel = Kernel(config)
    record: dict = {}
    box: list = []
    b = kernel.spawn(agent_reader(n, record), name="agent-b")
    box.append(b)
    a = kernel.spawn(agent_writer([11, 12, 13], n, box, client_rtt), name="agent-a")
    record["a_pid"], record["b_pid"] = a, b
    kernel.run()
    return kernel, record


# -- runner ---------------------------------------------------------------------------------------


@dataclass
class ExampleResult:
    name: str
    ok: bool
    message: str = ""

    def __str__(self):
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}{': ' + self.message if self.message else ''}"


def _check(cond, msg):
    if not cond:
        raise AssertionError(msg)


def example_parallel_generation(n: int = 4, seed: int = 0) -> str:
    kernel = Kernel()
    prefix = install_prefix(kernel.fs, kernel.backend, "sys_msg.kv", [(7 * i) % 250 + 1 for i in range(100)])
    before = kernel.fs.read(prefix)
    outputs: list = []
    suffixes = [[40 + i, 50 + i, 60 + i] for i in range(n)]
    kernel.spawn(parallel_generation("sys_msg.kv", suffixes, outputs, SamplerSpec("temperature", rng_seed=seed)))
    kernel.run()
    eos = kernel.backend.config.eos_token
    _check(len(outputs) == n, f"expected {n} generations, got {len(outputs)}")
    _check(all(o and o[-1] == eos for o in outputs), "a generation did not end with EOS")
    _check(kernel.fs.read(prefix) == before, "prefix file changed")
    _check(not check_transitions(kernel.trace), "illegal thread transition")
    _check(kernel.fs.pool.allocated["device"] == len(prefix.pages), "forked pages leaked")
    return f"{n} EOS-terminated outputs, lengths {[len(o) for o in outputs]}"


def example_constrained(total_tokens: int = 2000, seed: int = 0) -> str:
    aut = load_automaton("number_list")
    kernel = Kernel()
    runs: list = []
    i = 0
    while sum(len(r.tokens) for r in runs) < total_tokens:
        kernel.spawn(constrained_lip(aut, [5, 6, 7], runs, SamplerSpec("temperature", rng_seed=seed * 100_003 + i)))
        kernel.run()
        i += 1
    for run in runs:
        for state, t in zip(run.states, run.tokens):
            _check(t in set(aut.allowed(state).tolist()), f"token {t} not allowed in state {state}")
        _check(run.final_state in aut.accept, f"run ended in non-accepting state {run.final_state}")
    return f"{len(runs)} runs, {sum(len(r.tokens) for r in runs)} tokens, all inside allowed sets"


def example_speculative(seeds=range(10), gen_len: int = 64) -> str:
    for seed in seeds:
        prompt = [int(x) for x in np.random.default_rng(seed).integers(1, 256, 8)]
        plain: list = []
        spec: list = []
        k1 = Kernel()
        k1.spawn(greedy_lip(prompt, gen_len, plain))
        k1.run()
        k2 = Kernel()
        k2.spawn(speculative_lip(prompt, gen_len, OracleDrafter(k2.backend.config, 0.7, seed), spec))
        k2.run()
        _check(spec == plain, f"seed {seed}: speculative output differs from greedy")
    return f"{len(seeds)} seeds identical to greedy"


def example_function_calling() -> str:
    kernel = Kernel()
    record: dict = {}
    kernel.spawn(function_calling_lip([1, 2, 3], "echo", record))
    kernel.run()
    _check(record["reply"] == record["query"], "echo tool did not echo")
    _check(record["after_io"] == record["before_io"], "KV file changed across the I/O wait")
    _check(record["io_end"] - record["io_start"] >= kernel.tools["echo"].latency, "I/O returned early")
    (start,) = kernel.trace.of_type("io_start")
    _check(start["detail"]["offloaded_pages"] > 0, "context was not offloaded during the tool call")
    return f"tool round trip {record['io_end'] - record['io_start']:.4f}s virtual"


def example_agents() -> str:
    k_ipc, direct = run_agents()
    rtt = 0.2
    k_client, mediated = run_agents(client_rtt=rtt)
    _check(direct["tokens"] == mediated["tokens"], "agents disagree between variants")
    _check(not k_ipc.trace.of_type("io_start"), "direct IPC variant performed a client hop")
    _check(mediated["done_at"] - direct["done_at"] >= rtt, "client-mediated variant was not slower by the round trip")
    return f"direct {direct['done_at']:.4f}s vs client-mediated {mediated['done_at']:.4f}s"


EXAMPLES = {
    "parallel-generation": example_parallel_generation,
    "constrained-decoding": example_constrained,
    "speculative-decoding": example_speculative,
    "function-calling": example_function_calling,
    "two-agent-ipc": example_agents,
}


def run_examples(names=None) -> list[ExampleResult]:
    results = []
    for name, fn in EXAMPLES.items():
        if names and name not in names:
            continue
        try:
            results.append(ExampleResult(name, True, fn()))
        except Exception as exc:
            detail = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            if os.environ.get("LIPSERVE_DEBUG"):
                detail += "\n" + traceback.format_exc()
            results.append(ExampleResult(name, False, detail))
    return results
