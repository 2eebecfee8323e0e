"""Named, reproducible random streams.

Every stream is a Philox counter-based generator seeded from
``SeedSequence(root_seed, spawn_key=(crc32(name),))``.  Philox output is
specified bit-for-bit by numpy, so a (seed, name) pair yields the same
sequence on every platform, and streams with different names never overlap
in practice.
"""

import zlib

import numpy as np

STREAM_NAMES = ("data", "noise", "tau", "r", "init", "eval")


def stream(seed, name):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, name)``."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


def streams(seed, names=STREAM_NAMES):
    return {name: stream(seed, name) for name in names}


def as_generator(rng):
    """Accept a Generator, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return stream(0, "default")
    return stream(int(rng), "default")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return [int(v) for v in x]
    return x


def get_state(rng):
    """Bit-generator state with arrays turned into lists, safe for JSON."""
    return _plain(rng.bit_generator.state)


def set_state(rng, state):
    s = dict(state)
    inner = dict(s["state"])
    inner["counter"] = np.asarray(inner["counter"], dtype=np.uint64)
    inner["key"] = np.asarray(inner["key"], dtype=np.uint64)
    s["state"] = inner
    s["buffer"] = np.asarray(s["buffer"], dtype=np.uint64)
    rng.bit_generator.state = s
    return rng
