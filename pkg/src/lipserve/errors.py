"""Exception hierarchy shared by the kernel, KVFS and helper libraries.

Every error a LIP can observe derives from :class:`LipError`, so a program
can implement its own recovery with a single ``except`` clause.
"""


class LipError(Exception):
    """Base class for errors surfaced to LIP programs."""


class KvfsError(LipError):
    pass


class NameExists(KvfsError):
    pass


class NotFound(KvfsError):
    pass


class PermissionDenied(KvfsError):
    pass


class Locked(KvfsError):
    pass


class NotLockHolder(KvfsError):
    pass


class PoolExhausted(KvfsError):
    def __init__(self, tier, needed, free):
        super().__init__(f"{tier} pool exhausted: need {needed} pages, {free} free")
        self.tier = tier
        self.needed = needed
        self.free = free


class PositionConflict(KvfsError):
    pass


class IndexOutOfRange(KvfsError):
    pass


class NotResident(KvfsError):
    """Raised when a write targets pages that are offloaded to the host tier."""


class KernelError(LipError):
    pass


class KernelShuttingDown(KernelError):
    pass


class NoSuchThread(KernelError):
    pass


class CrossProcessJoin(KernelError):
    pass


class NoSuchProcess(KernelError):
    pass


class NoSuchTool(KernelError):
    pass


class RestoreFailed(KernelError):
    def __init__(self, files, cause):
        super().__init__(f"could not restore {len(files)} KV file(s) after I/O: {cause}")
        self.files = files
        self.cause = cause


class IllegalTransition(RuntimeError):
    """A thread attempted a lifecycle transition outside the legal set (kernel bug)."""


class DuplicateReady(RuntimeError):
    pass


class MalformedTrace(ValueError):
    pass


class DecodingError(LipError):
    pass


class DegenerateDist(DecodingError):
    pass


class DeadState(DecodingError):
    pass


class ArityMismatch(DecodingError):
    pass


class ConfigError(ValueError):
    pass
