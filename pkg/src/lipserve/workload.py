"""Seeded RAG request streams with Pareto-skewed document popularity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WorkloadSpec:
    num_docs: int = 100
    doc_len: int = 3000
    pareto_alpha: float = 1.0
    request_rate: float = 20.0
    duration: float = 5.0
    query_len: int = 32
    gen_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.pareto_alpha <= 0:
            raise ValueError("pareto_alpha must be positive")
        if self.num_docs < 1 or self.doc_len < 1 or self.query_len < 1 or self.gen_len < 1:
            raise ValueError("document, query and generation sizes must be positive")
        if self.request_rate <= 0 or self.duration <= 0:
            raise ValueError("request_rate and duration must be positive")


@dataclass(frozen=True)
class Request:
    id: int
    arrival: float
    doc: int
    query: tuple


def popularity(num_docs: int, pareto_alpha: float) -> np.ndarray:
    """Probability of each document by popularity rank (index 0 is rank 1).

    Rank frequencies follow ``r ** (-1 / alpha)``, the Zipf law whose
    frequency tail is Pareto with index ``alpha``: a small index
    concentrates requests on a few documents.
    """
    ranks = np.arange(1, num_docs + 1, dtype=np.float64)
    w = ranks ** (-1.0 / pareto_alpha)
    return w / w.sum()


def top_mass(num_docs: int, pareto_alpha: float, k: int) -> float:
    return float(popularity(num_docs, pareto_alpha)[:k].sum())


def gen_requests(spec: WorkloadSpec, vocab_size: int = 256) -> list[Request]:
    """Poisson arrivals over ``[0, duration)`` with rank-distributed document choice."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    weights = popularity(spec.num_docs, spec.pareto_alpha)
    cdf = np.cumsum(weights)
    out = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / spec.request_rate)
        if t >= spec.duration:
            break
        doc = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), spec.num_docs - 1))
        query = tuple(int(x) for x in rng.integers(1, vocab_size, spec.query_len))
        out.append(Request(len(out), t, doc, query))
    return out


def doc_tokens(doc: int, doc_len: int, vocab_size: int = 256, seed: int = 0) -> list[int]:
    """Token ids of document ``doc``; never contains token 0."""
    rng = np.random.default_rng([seed, 0xD0C, doc])
    return [int(x) for x in rng.integers(1, vocab_size, doc_len)]
