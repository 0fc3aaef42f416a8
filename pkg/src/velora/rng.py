"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import json
import zlib

import numpy as np


def make_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent stream for ``seed`` and a path of stream names.

    The same ``(seed, names)`` always yields the same stream, and different
    names never share state, so adding a consumer does not shift others.
    """
    key = tuple(zlib.crc32(n.encode()) for n in names)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, default=_jsonable, sort_keys=True)


def restore_rng(text: str) -> np.random.Generator:
    state = json.loads(text)
    state["state"]["counter"] = np.asarray(state["state"]["counter"], dtype=np.uint64)
    state["state"]["key"] = np.asarray(state["state"]["key"], dtype=np.uint64)
    state["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [int(i) for i in v]
    if isinstance(v, np.integer):
        return int(v)
    raise TypeError(type(v))
