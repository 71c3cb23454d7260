"""KVFS: the KV cache exposed as named, paged, copy-on-write files.

A file is an ordered list of page references. Pages hold up to
``page_size`` entries and are reference counted; full pages are shared
freely between files and a shared page is never written in place. Because
files are append-only, only the tail page can ever need a private copy.

All operations are atomic: when one raises, no file and no pool counter
has changed.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
import os
import threading
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    IndexOutOfRange,
    Locked,
    NameExists,
    NotFound,
    NotLockHolder,
    NotResident,
    PermissionDenied,
    PoolExhausted,
    PositionConflict,
)

DEVICE = "device"
HOST = "host"

MAGIC = b"KVF1"
ENTRY_DTYPE = np.dtype([("token", "<u4"), ("position", "<u4"), ("fingerprint", "<u8")])


class KvEntry(NamedTuple):
    token: int
    position: int
    fingerprint: int


class Caller(NamedTuple):
    """Identity attached to a KVFS operation: owning principal plus thread id."""

    principal: str
    tid: int | None = None


SYSTEM = Caller("system", None)


@dataclass
class Perms:
    owner: str
    readable_by_all: bool = False
    writable_by_all: bool = False


class Page:
    __slots__ = ("id", "entries", "refcount", "tier")

    def __init__(self, page_id: int, entries: list[KvEntry], tier: str = DEVICE):
        self.id = page_id
        self.entries = entries
        self.refcount = 1
        self.tier = tier

    def __repr__(self):
        return f"Page(id={self.id}, n={len(self.entries)}, ref={self.refcount}, tier={self.tier})"


class KvFile:
    """A KV cache file. Instances double as the handles LIPs hold."""

    __slots__ = ("id", "name", "perms", "pages", "length", "lock_holder", "removed")

    def __init__(self, file_id: int, name: str | None, perms: Perms):
        self.id = file_id
        self.name = name
        self.perms = perms
        self.pages: list[Page] = []
        self.length = 0
        self.lock_holder: int | None = None
        self.removed = False

    def __len__(self):
        return self.length

    @property
    def max_position(self) -> int:
        return self.pages[-1].entries[-1].position if self.length else -1

    @property
    def last_fingerprint(self) -> int | None:
        return self.pages[-1].entries[-1].fingerprint if self.length else None

    def entries(self) -> list[KvEntry]:
        return [e for page in self.pages for e in page.entries]

    def residency(self) -> list[str]:
        return [page.tier for page in self.pages]

    def __repr__(self):
        return f"KvFile(id={self.id}, name={self.name!r}, length={self.length}, pages={len(self.pages)})"


class PagePool:
    """Two-tier page accounting (device memory and host memory)."""

    def __init__(self, device_capacity: int, host_capacity: int):
        self.capacity = {DEVICE: device_capacity, HOST: host_capacity}
        self.allocated = {DEVICE: 0, HOST: 0}

    def free(self, tier: str) -> int:
        return self.capacity[tier] - self.allocated[tier]

    def require(self, tier: str, n: int) -> None:
        if n > self.free(tier):
            raise PoolExhausted(tier, n, self.free(tier))

    def __repr__(self):
        return f"PagePool(device={self.allocated[DEVICE]}/{self.capacity[DEVICE]}, host={self.allocated[HOST]}/{self.capacity[HOST]})"


def _atomic(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        with self._lock:
            result = method(self, *args, **kwargs)
            if self.debug:
                self.audit()
            return result

    return wrapper


class Kvfs:
    """Flat namespace of KV files over a shared :class:`PagePool`.

    Parameters
    ----------
    page_size : int
        Entries per page.
    device_capacity, host_capacity : int
        Page budgets of the two tiers.
    debug : bool
        Run :meth:`audit` after every operation.
    """

    def __init__(self, page_size=16, device_capacity=1 << 20, host_capacity=1 << 20, debug=False):
        if page_size < 1:
            raise ValueError("page_size must be positive")
        self.page_size = page_size
        self.pool = PagePool(device_capacity, host_capacity)
        self.debug = debug
        self._names: dict[str, KvFile] = {}
        self._files: dict[int, KvFile] = {}
        self._pages: dict[int, Page] = {}
        self._file_ids = itertools.count(1)
        self._page_ids = itertools.count(1)
        self._lock = threading.RLock()

    # -- internal helpers -------------------------------------------------

    def _new_page(self, entries: list[KvEntry]) -> Page:
        page = Page(next(self._page_ids), entries)
        self._pages[page.id] = page
        self.pool.allocated[DEVICE] += 1
        return page

    def _release(self, page: Page) -> bool:
        page.refcount -= 1
        if page.refcount == 0:
            del self._pages[page.id]
            self.pool.allocated[page.tier] -= 1
            return True
        return False

    def _live(self, f: KvFile) -> KvFile:
        if f.removed or self._files.get(f.id) is not f:
            raise NotFound(f"KV file {f.id} no longer exists")
        return f

    @staticmethod
    def _can_read(f: KvFile, caller: Caller) -> bool:
        return f.perms.readable_by_all or caller.principal == f.perms.owner

    @staticmethod
    def _can_write(f: KvFile, caller: Caller) -> bool:
        return f.perms.writable_by_all or caller.principal == f.perms.owner

    def _check_read(self, f: KvFile, caller: Caller) -> None:
        self._live(f)
        if not self._can_read(f, caller):
            raise PermissionDenied(f"{caller.principal} may not read {f.name or f.id}")

    def _check_write(self, f: KvFile, caller: Caller) -> None:
        self._live(f)
        if not self._can_write(f, caller):
            raise PermissionDenied(f"{caller.principal} may not write {f.name or f.id}")
        if f.lock_holder is not None and f.lock_holder != caller.tid:
            raise Locked(f"{f.name or f.id} is locked by thread {f.lock_holder}")

    def _check_name(self, name: str | None) -> None:
        if name is not None and name in self._names:
            raise NameExists(name)

    def _register(self, name: str | None, caller: Caller, readable_by_all=False, writable_by_all=False) -> KvFile:
        f = KvFile(next(self._file_ids), name, Perms(caller.principal, readable_by_all, writable_by_all))
        self._files[f.id] = f
        if name is not None:
            self._names[name] = f
        return f

    def _build(self, entries: list[KvEntry], name: str | None, caller: Caller) -> KvFile:
        self._check_name(name)
        P = self.page_size
        self.pool.require(DEVICE, math.ceil(len(entries) / P))
        f = self._register(name, caller)
        f.pages = [self._new_page(entries[i : i + P]) for i in range(0, len(entries), P)]
        f.length = len(entries)
        return f

    # -- namespace ---------------------------------------------------------

    def exists(self, name: str) -> bool:
        return name in self._names

    def names(self) -> list[str]:
        return sorted(self._names)

    def files(self) -> list[KvFile]:
        return list(self._files.values())

    @_atomic
    def create(self, name: str | None, caller: Caller = SYSTEM, *, readable_by_all=False, writable_by_all=False) -> KvFile:
        """Create an empty file. ``name=None`` creates an anonymous file."""
        self._check_name(name)
        return self._register(name, caller, readable_by_all, writable_by_all)

    @_atomic
    def open(self, name: str, caller: Caller = SYSTEM) -> KvFile:
        f = self._names.get(name)
        if f is None:
            raise NotFound(name)
        self._check_read(f, caller)
        return f

    @_atomic
    def close(self, f: KvFile, caller: Caller = SYSTEM) -> None:
        # Handles carry no kernel-side resources beyond the file itself.
        self._live(f)

    @_atomic
    def remove(self, f: KvFile, caller: Caller = SYSTEM) -> int:
        """Unlink ``f`` and drop its page references. Returns the number of pages freed."""
        self._check_write(f, caller)
        freed = sum(self._release(page) for page in f.pages)
        f.pages = []
        f.length = 0
        f.removed = True
        del self._files[f.id]
        if f.name is not None and self._names.get(f.name) is f:
            del self._names[f.name]
        return freed

    def read(self, f: KvFile, caller: Caller = SYSTEM) -> list[KvEntry]:
        with self._lock:
            self._check_read(f, caller)
            return f.entries()

    def stat(self, f: KvFile) -> dict:
        with self._lock:
            self._live(f)
            return {
                "id": f.id,
                "name": f.name,
                "length": f.length,
                "pages": len(f.pages),
                "perms": asdict(f.perms),
                "locked_by": f.lock_holder,
                "residency": f.residency(),
            }

    # -- content operations -------------------------------------------------

    @_atomic
    def fork(self, src: KvFile, caller: Caller = SYSTEM, name: str | None = None) -> KvFile:
        """Clone ``src`` sharing every full page; only a partial tail page is copied."""
        self._check_read(src, caller)
        self._check_name(name)
        tail = src.pages[-1] if src.pages and len(src.pages[-1].entries) < self.page_size else None
        if tail is not None:
            self.pool.require(DEVICE, 1)
        f = self._register(name, caller)
        shared = src.pages[:-1] if tail is not None else src.pages
        for page in shared:
            page.refcount += 1
        f.pages = list(shared)
        if tail is not None:
            f.pages.append(self._new_page(list(tail.entries)))
        f.length = src.length
        return f

    def check_append(self, f: KvFile, positions: Iterable[int], caller: Caller = SYSTEM) -> None:
        """Validate an append of entries at ``positions`` without performing it.

        Covers permissions, locks, ordering and residency; pool capacity is
        only known at append time.
        """
        with self._lock:
            self._check_write(f, caller)
            last = f.max_position
            for pos in positions:
                if pos <= last:
                    raise PositionConflict(f"position {pos} not after {last}")
                last = pos
            if self.pool.allocated[HOST] and any(page.tier != DEVICE for page in f.pages):
                raise NotResident(f"{f.name or f.id} has host-resident pages")

    @_atomic
    def append(self, f: KvFile, entries: Sequence[KvEntry], caller: Caller = SYSTEM) -> None:
        self.check_append(f, [e.position for e in entries], caller)
        if not entries:
            return

        P = self.page_size
        tail = f.pages[-1] if f.pages and len(f.pages[-1].entries) < P else None
        space = P - len(tail.entries) if tail is not None else 0
        cow = tail is not None and tail.refcount > 1
        needed = math.ceil(max(0, len(entries) - space) / P) + int(cow)
        self.pool.require(DEVICE, needed)

        if cow:
            copy = self._new_page(list(tail.entries))
            self._release(tail)
            f.pages[-1] = copy
            tail = copy
        i = 0
        if tail is not None:
            i = min(space, len(entries))
            tail.entries.extend(entries[:i])
        for j in range(i, len(entries), P):
            f.pages.append(self._new_page(list(entries[j : j + P])))
        f.length += len(entries)

    @_atomic
    def extract(self, src: KvFile, indices: Iterable[int], name: str | None = None, caller: Caller = SYSTEM) -> KvFile:
        """New file holding the selected entries, absolute positions preserved."""
        self._check_read(src, caller)
        indices = list(indices)
        prev = -1
        for i in indices:
            if i <= prev:
                raise IndexOutOfRange("indices must be strictly increasing")
            if i >= src.length:
                raise IndexOutOfRange(f"index {i} >= length {src.length}")
            prev = i
        entries = src.entries()
        return self._build([entries[i] for i in indices], name, caller)

    @_atomic
    def merge(self, parts: Sequence[KvFile], name: str | None = None, caller: Caller = SYSTEM) -> KvFile:
        """New file with the entries of all ``parts`` sorted by position."""
        for f in parts:
            self._check_read(f, caller)
        entries = sorted((e for f in parts for e in f.entries()), key=lambda e: e.position)
        for a, b in zip(entries, entries[1:]):
            if a.position == b.position:
                raise PositionConflict(f"position {a.position} appears in more than one part")
        return self._build(entries, name, caller)

    # -- locking -------------------------------------------------------------

    @_atomic
    def lock(self, f: KvFile, caller: Caller) -> None:
        self._live(f)
        if not self._can_write(f, caller):
            raise PermissionDenied(f"{caller.principal} may not lock {f.name or f.id}")
        if f.lock_holder is not None:
            raise Locked(f"{f.name or f.id} is already locked by thread {f.lock_holder}")
        f.lock_holder = caller.tid

    @_atomic
    def unlock(self, f: KvFile, caller: Caller) -> None:
        self._live(f)
        if f.lock_holder is None or f.lock_holder != caller.tid:
            raise NotLockHolder(f"thread {caller.tid} does not hold the lock on {f.name or f.id}")
        f.lock_holder = None

    # -- residency -------------------------------------------------------------

    @_atomic
    def offload(self, f: KvFile) -> int:
        """Move exclusively-owned device pages to the host tier; returns pages moved."""
        self._live(f)
        movable = [p for p in f.pages if p.tier == DEVICE and p.refcount == 1]
        self.pool.require(HOST, len(movable))
        for page in movable:
            page.tier = HOST
        self.pool.allocated[DEVICE] -= len(movable)
        self.pool.allocated[HOST] += len(movable)
        return len(movable)

    @_atomic
    def restore(self, f: KvFile) -> int:
        """Move every host-resident page of ``f`` back to the device; returns pages moved."""
        self._live(f)
        movable = [p for p in f.pages if p.tier == HOST]
        self.pool.require(DEVICE, len(movable))
        for page in movable:
            page.tier = DEVICE
        self.pool.allocated[HOST] -= len(movable)
        self.pool.allocated[DEVICE] += len(movable)
        return len(movable)

    # -- verification --------------------------------------------------------------

    def audit(self) -> None:
        """Check refcount conservation, page-shape and pool invariants; raise AssertionError on violation."""
        with self._lock:
            refs: dict[int, int] = {}
            for f in self._files.values():
                assert not f.removed, f"removed file {f.id} still registered"
                assert f.length == sum(len(p.entries) for p in f.pages), f"length mismatch in {f!r}"
                for page in f.pages[:-1]:
                    assert len(page.entries) == self.page_size, f"non-full interior page in {f!r}"
                assert all(p.entries for p in f.pages), f"empty page in {f!r}"
                positions = [e.position for e in f.entries()]
                assert all(a < b for a, b in zip(positions, positions[1:])), f"positions out of order in {f!r}"
                for page in f.pages:
                    refs[page.id] = refs.get(page.id, 0) + 1
            assert set(refs) == set(self._pages), "page registry does not match referenced pages"
            tiers = {DEVICE: 0, HOST: 0}
            for pid, page in self._pages.items():
                assert page.refcount == refs[pid], f"{page!r} has {refs[pid]} references"
                tiers[page.tier] += 1
            assert tiers == self.pool.allocated, f"pool counters {self.pool.allocated} != pages {tiers}"
            for tier, used in tiers.items():
                assert used <= self.pool.capacity[tier], f"{tier} over capacity"
            for name, f in self._names.items():
                assert f.name == name and self._files.get(f.id) is f

    # -- persistence ---------------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        """Write ``manifest.json`` plus one ``<id>.kvf`` per named file."""
        with self._lock:
            os.makedirs(directory, exist_ok=True)
            manifest = {}
            for name in sorted(self._names):
                f = self._names[name]
                manifest[name] = {"id": f.id, "length": f.length, "perms": asdict(f.perms)}
                write_kvf(os.path.join(directory, f"{f.id}.kvf"), f.entries())
            with open(os.path.join(directory, "manifest.json"), "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str | os.PathLike, **kwargs) -> "Kvfs":
        fs = cls(**kwargs)
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        for name, meta in sorted(manifest.items(), key=lambda kv: kv[1]["id"]):
            entries = read_kvf(os.path.join(directory, f"{meta['id']}.kvf"))
            if len(entries) != meta["length"]:
                raise ValueError(f"{name}: manifest length {meta['length']} != {len(entries)} entries")
            perms = meta["perms"]
            f = fs._build(entries, name, Caller(perms["owner"]))
            f.perms = Perms(**perms)
        return fs


def write_kvf(path: str | os.PathLike, entries: Sequence[KvEntry]) -> None:
    arr = np.array([tuple(e) for e in entries], dtype=ENTRY_DTYPE) if entries else np.empty(0, ENTRY_DTYPE)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(entries)).astype("<u4").tobytes())
        fh.write(arr.tobytes())


def read_kvf(path: str | os.PathLike) -> list[KvEntry]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    count = int(np.frombuffer(data, "<u4", 1, 4)[0])
    arr = np.frombuffer(data, ENTRY_DTYPE, count, 8)
    return [KvEntry(int(t), int(p), int(fp)) for t, p, fp in arr.tolist()]
