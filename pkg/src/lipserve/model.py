"""Deterministic mock transformer behind the ``pred`` system call.

The "K/V tensors" of a token are replaced by a 64-bit digest chained over
every (token, position) pair up to and including it, and the next-token
distribution is a pure function of that digest. Reusing a cached prefix is
therefore correct exactly when it yields the same digests as recomputing
from scratch, which makes KV reuse bitwise checkable.
"""

from __future__ import annotations

import functools
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .kvfs import KvEntry, KvFile

MASK64 = (1 << 64) - 1
_new_entry = functools.partial(tuple.__new__, KvEntry)
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

DIST_MAGIC = b"DST1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    eos_token: int = 0
    model_seed: int = 0x5EED_0F_5EED
    temperature_internal: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 0 <= self.eos_token < self.vocab_size:
            raise ValueError("eos_token must lie inside the vocabulary")
        if self.temperature_internal <= 0:
            raise ValueError("temperature_internal must be positive")


LARGE_VOCAB = 100_000


def chain_fingerprint(prev: int, token: int, position: int) -> int:
    """One SplitMix64 round over ``prev XOR (token * 2**32 + position)``."""
    z = ((prev ^ ((token << 32) + position)) + GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


@functools.lru_cache(maxsize=8)
def _stream_offsets(vocab_size: int) -> np.ndarray:
    j = np.arange(1, vocab_size + 1, dtype=np.uint64)
    return j * np.uint64(GAMMA)


def next_dist(context_digest: int, config: ModelConfig) -> np.ndarray:
    """Next-token distribution for a context digest: softmax of uniform(-1, 1) logits."""
    z = _stream_offsets(config.vocab_size) + np.uint64(context_digest)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    z ^= z >> np.uint64(31)
    logits = (z >> np.uint64(11)).astype(np.float64) * (2.0 / (1 << 53)) - 1.0
    logits /= config.temperature_internal
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return p


class DistList(Sequence):
    """Per-token distributions returned by ``pred``, materialised on first access."""

    def __init__(self, digests: Sequence[int], config: ModelConfig):
        self._digests = list(digests)
        self._config = config
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._digests)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        d = self._cache.get(i)
        if d is None:
            d = self._cache[i] = next_dist(self._digests[i], self._config)
        return d

    @property
    def digests(self) -> list[int]:
        return list(self._digests)

    def __repr__(self):
        return f"DistList(n={len(self)}, vocab={self._config.vocab_size})"


class Backend(Protocol):
    config: ModelConfig

    def compute_pred(self, kv: KvFile, tokens: Sequence[tuple[int, int]]) -> tuple[list[KvEntry], Sequence[np.ndarray]]:
        ...


class MockModel:
    """Hash-chain backend: continues the digest chain from the file's last entry."""

    def __init__(self, config: ModelConfig | None = None, memo_limit: int = 1 << 20):
        self.config = config or ModelConfig()
        # Each step is a pure function of the mixed input word, so repeated
        # prefills of the same text hit this table instead of rehashing.
        self._memo: dict[int, int] = {}
        self._memo_limit = memo_limit

    def compute_pred(self, kv: KvFile, tokens):
        """Return the entries to append to ``kv`` and one distribution per input token.

        Does not modify ``kv``; the caller appends the entries through KVFS.
        """
        prev = kv.last_fingerprint
        if prev is None:
            prev = self.config.model_seed
        digests = []
        memo = self._memo
        if len(memo) > self._memo_limit:
            memo.clear()
        # chain_fingerprint, inlined: this loop runs once per prefilled token.
        for token, position in tokens:
            x = prev ^ ((token << 32) + position)
            prev = memo.get(x)
            if prev is None:
                z = (x + GAMMA) & MASK64
                z = ((z ^ (z >> 30)) * MIX1) & MASK64
                z = ((z ^ (z >> 27)) * MIX2) & MASK64
                prev = memo[x] = z ^ (z >> 31)
            digests.append(prev)
        entries = list(map(_new_entry, ((t, p, d) for (t, p), d in zip(tokens, digests))))
        return entries, DistList(digests, self.config)


def oracle_from_scratch(sequence, config: ModelConfig) -> list[np.ndarray]:
    """Recompute every distribution of ``sequence`` with no cache at all."""
    out = []
    digest = config.model_seed
    last = -1
    for token, position in sequence:
        if position <= last:
            raise ValueError("positions must be strictly increasing")
        last = position
        digest = chain_fingerprint(digest, token, position)
        out.append(next_dist(digest, config))
    return out


def serialize_dist_fp16(dist: np.ndarray) -> bytes:
    """Wire form of one distribution: ``DST1``, little-endian u32 length, float16 values."""
    dist = np.asarray(dist)
    return DIST_MAGIC + np.uint32(dist.size).astype("<u4").tobytes() + dist.astype("<f2").tobytes()


def deserialize_dist_fp16(data: bytes) -> np.ndarray:
    if data[:4] != DIST_MAGIC:
        raise ValueError("not a serialized distribution")
    n = int(np.frombuffer(data, "<u4", 1, 4)[0])
    return np.frombuffer(data, "<f2", n, 8).astype(np.float64)
