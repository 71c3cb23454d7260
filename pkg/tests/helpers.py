"""Small builders shared across test modules."""

from lipserve.kvfs import KvEntry


def entries(n, start=0, token=1):
    """``n`` entries at consecutive positions; fingerprints are just unique ints."""
    return [KvEntry(token, start + i, 1000 + start + i) for i in range(n)]


def filled(fs, n, name=None, **kw):
    f = fs.create(name, **kw)
    if n:
        fs.append(f, entries(n))
    return f
