"""Retrieval-augmented generation LIPs with application-managed prompt caching.

Each request runs as its own LIP process. The caching policy lives in the
application object shared by those processes, while the cached prefixes
themselves are ordinary KVFS files named ``doc-<id>.kv``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import PoolExhausted
from .workload import Request, WorkloadSpec, doc_tokens


@dataclass(frozen=True)
class CachePolicy:
    kind: str = "top_k"  # none | top_k | consecutive
    k: int = 20
    threshold: int = 2

    def __post_init__(self):
        if self.kind not in ("none", "top_k", "consecutive"):
            raise ValueError(f"unknown cache policy {self.kind!r}")
        if self.k < 1 or self.threshold < 1:
            raise ValueError("policy parameters must be positive")

    @classmethod
    def parse(cls, text: str) -> "CachePolicy":
        """Parse ``none``, ``topk:K`` or ``consecutive:N``."""
        name, _, arg = text.partition(":")
        name = name.strip().lower()
        if name == "none":
            return cls("none")
        if name in ("topk", "top_k"):
            return cls("top_k", k=int(arg) if arg else 20)
        if name == "consecutive":
            return cls("consecutive", threshold=int(arg) if arg else 2)
        raise ValueError(f"cannot parse cache policy {text!r}")

    def __str__(self):
        if self.kind == "top_k":
            return f"topk:{self.k}"
        if self.kind == "consecutive":
            return f"consecutive:{self.threshold}"
        return "none"


def doc_file(doc: int) -> str:
    return f"doc-{doc}.kv"


class _RagApp:
    def __init__(self, spec: WorkloadSpec, vocab_size: int):
        self.spec = spec
        self.vocab_size = vocab_size
        self._docs: dict[int, list[int]] = {}

    def prompt(self, req: Request, cached: bool) -> list[tuple[int, int]]:
        L = self.spec.doc_len
        query = [(t, L + i) for i, t in enumerate(req.query)]
        if cached:
            return query
        doc = self._docs.get(req.doc)
        if doc is None:
            doc = self._docs[req.doc] = doc_tokens(req.doc, L, self.vocab_size, self.spec.seed)
        return [(t, i) for i, t in enumerate(doc)] + query

    def _pred(self, ctx, kv, tokens):
        return (yield ctx.pred(kv, tokens))

    def generate(self, ctx, kv, dists):
        """Greedy-decode ``gen_len`` tokens after the prefill that produced ``dists``."""
        pos = self.spec.doc_len + self.spec.query_len
        t = int(np.argmax(dists[-1]))
        ctx.emit(t)
        for step in range(self.spec.gen_len - 1):
            dists = yield from self._pred(ctx, kv, [(t, pos + step)])
            t = int(np.argmax(dists[0]))
            ctx.emit(t)


class RagLip(_RagApp):
    """Prompt-caching RAG application; call it as a LIP body with a :class:`Request`."""

    def __init__(self, policy: CachePolicy, spec: WorkloadSpec, vocab_size: int = 256):
        super().__init__(spec, vocab_size)
        self.policy = policy
        self.counts: dict[int, int] = defaultdict(int)
        self.retained: set[int] = set()
        self._last_doc = None
        self._run = 0

    def _victim(self):
        if not self.retained:
            return None
        return min(self.retained, key=lambda d: (self.counts[d], -d))

    def _evict(self, ctx, doc: int) -> None:
        self.retained.discard(doc)
        name = doc_file(doc)
        if ctx.kv_exists(name):
            f = ctx.kv_open(name)
            ctx.kv_remove(f)
        ctx.note("evict", doc=doc)

    def _admit(self, ctx, doc: int, run: int) -> bool:
        """Decide whether ``doc`` joins the retained set, evicting if needed.

        ``run`` is how many consecutive requests for ``doc`` had arrived
        when this request did.
        """
        p = self.policy
        if p.kind == "none" or doc in self.retained:
            return False
        if p.kind == "consecutive" and run < p.threshold:
            return False
        if len(self.retained) >= p.k:
            victim = self._victim()
            if self.counts[doc] <= self.counts[victim]:
                return False
            self._evict(ctx, victim)
        return True

    def _pred(self, ctx, kv, tokens):
        try:
            return (yield ctx.pred(kv, tokens))
        except PoolExhausted:
            victim = self._victim()
            if victim is None:
                raise
            self._evict(ctx, victim)
        return (yield ctx.pred(kv, tokens))

    def __call__(self, ctx, req: Request):
        doc = req.doc
        self.counts[doc] += 1
        self._run = self._run + 1 if self._last_doc == doc else 1
        self._last_doc = doc
        run = self._run
        name = doc_file(doc)
        hit = doc in self.retained and ctx.kv_exists(name)
        ctx.note("cache", hit=hit, doc=doc)
        if hit:
            base = ctx.kv_open(name)
            kv = ctx.kv_fork(base)
            ctx.kv_close(base)
        else:
            kv = ctx.kv_create(None)
        try:
            dists = yield from self._pred(ctx, kv, self.prompt(req, cached=hit))
            if not hit and not ctx.kv_exists(name) and self._admit(ctx, doc, run):
                try:
                    ctx.kv_extract(kv, range(self.spec.doc_len), name)
                    self.retained.add(doc)
                except PoolExhausted:
                    pass
            yield from self.generate(ctx, kv, dists)
        finally:
            ctx.kv_remove(kv)


class BaselineLip(_RagApp):
    """Stateless prompt serving: every request prefills document and query from scratch."""

    def __call__(self, ctx, req: Request):
        ctx.note("cache", hit=False, doc=req.doc)
        kv = ctx.kv_create(None)
        try:
            dists = yield from self._pred(ctx, kv, self.prompt(req, cached=False))
            yield from self.generate(ctx, kv, dists)
        finally:
            ctx.kv_remove(kv)


def rag_lip(policy: CachePolicy, spec: WorkloadSpec, vocab_size: int = 256) -> RagLip:
    return RagLip(policy, spec, vocab_size)


def baseline_lip(spec: WorkloadSpec, vocab_size: int = 256) -> BaselineLip:
    return BaselineLip(spec, vocab_size)
