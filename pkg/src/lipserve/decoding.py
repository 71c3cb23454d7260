"""Sampling, automaton-constrained decoding and greedy speculative verification.

These run inside LIPs on the distributions returned by ``pred``; nothing
here touches the kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArityMismatch, DeadState, DegenerateDist


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "greedy"  # greedy | temperature | top_k
    temperature: float = 1.0
    k: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature", "top_k"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind != "greedy" and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "top_k" and self.k < 1:
            raise ValueError("k must be at least 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


GREEDY = SamplerSpec()


def greedy(dist) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties.
    return int(np.argmax(dist))


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def _tempered(p: np.ndarray, temperature: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logits = np.log(p) / temperature
    logits -= logits.max()
    out = np.exp(logits)
    return out / out.sum()


def sample(dist, spec: SamplerSpec = GREEDY, rng: np.random.Generator | None = None) -> int:
    """Draw one token from ``dist`` according to ``spec``.

    ``rng`` carries sampler state across calls; when omitted a generator
    seeded from ``spec.rng_seed`` is used, so identical inputs give
    identical draws.
    """
    p = np.asarray(dist, dtype=np.float64)
    if p.size == 0 or not np.isfinite(p).all() or p.max() <= 0:
        raise DegenerateDist("distribution has no positive mass")
    if spec.kind == "greedy":
        return greedy(p)
    rng = rng if rng is not None else spec.rng()
    if spec.kind == "top_k":
        keep = np.argsort(-p, kind="stable")[: spec.k]
        keep = keep[p[keep] > 0]
        masked = np.zeros_like(p)
        masked[keep] = p[keep]
        p = masked
    return _draw(_tempered(p, spec.temperature), rng)


@dataclass
class TokenAutomaton:
    """Explicit transition table over token ids."""

    states: list
    start: str
    accept: set
    transitions: dict = field(default_factory=dict)  # (state, token) -> state

    def __post_init__(self):
        self.accept = set(self.accept)
        known = set(self.states)
        if self.start not in known or not self.accept <= known:
            raise ValueError("start and accept states must be declared")
        for (src, _), dst in self.transitions.items():
            if src not in known or dst not in known:
                raise ValueError(f"transition {src!r} -> {dst!r} uses an undeclared state")
        self._allowed = {s: np.array(sorted(t for (q, t) in self.transitions if q == s), dtype=np.int64) for s in self.states}

    def step(self, state, token: int):
        return self.transitions.get((state, int(token)))

    def allowed(self, state) -> np.ndarray:
        return self._allowed[state]

    def accepts(self, tokens, state=None) -> bool:
        state = self.start if state is None else state
        for t in tokens:
            state = self.step(state, t)
            if state is None:
                return False
        return state in self.accept

    @classmethod
    def from_dict(cls, data: dict) -> "TokenAutomaton":
        trans = {(t["from"], int(t["token"])): t["to"] for t in data["transitions"]}
        return cls(list(data["states"]), data["start"], set(data["accept"]), trans)

    def to_dict(self) -> dict:
        return {
            "states": list(self.states),
            "start": self.start,
            "accept": sorted(self.accept),
            "transitions": [{"from": s, "token": t, "to": d} for (s, t), d in sorted(self.transitions.items())],
        }

    @classmethod
    def load(cls, path) -> "TokenAutomaton":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def mask_dist(dist, allowed: np.ndarray) -> np.ndarray:
    """Zero every token outside ``allowed`` and renormalise."""
    p = np.asarray(dist, dtype=np.float64)
    masked = np.zeros_like(p)
    masked[allowed] = p[allowed]
    total = masked.sum()
    if total <= 0:
        raise DegenerateDist("no probability mass on allowed tokens")
    return masked / total


def constrained_next(dist, state, aut: TokenAutomaton, spec: SamplerSpec = GREEDY, rng=None):
    """Sample a token permitted in ``state`` and return ``(token, next_state)``."""
    allowed = aut.allowed(state)
    if allowed.size == 0:
        raise DeadState(f"no tokens allowed in state {state!r}")
    token = sample(mask_dist(dist, allowed), spec, rng)
    return token, aut.step(state, token)


def speculative_verify(draft: Sequence[int], dists: Sequence) -> tuple[int, int | None]:
    """Greedy verification of draft tokens.

    ``dists[i]`` is the model's next-token distribution before ``draft[i]``.
    Returns the accepted prefix length and, if a token was rejected, the
    greedy correction for that position.
    """
    if len(dists) != len(draft):
        raise ArityMismatch(f"{len(draft)} draft tokens but {len(dists)} distributions")
    for i, token in enumerate(draft):
        best = greedy(dists[i])
        if best != token:
            return i, best
    return len(draft), None
