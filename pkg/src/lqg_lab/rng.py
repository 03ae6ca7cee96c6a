"""Keyed random streams.

Every unit of random work (a band, a replicate, a block of walkers) draws from
its own Philox stream derived from ``(seed, key...)``.  Results therefore do not
depend on the order in which units are scheduled or on the number of workers.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

_U32 = 0xFFFFFFFF


def _key_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8")) & _U32
    value = int(part)
    if value < 0:
        raise ValueError(f"stream key parts must be non-negative, got {part!r}")
    return value


@dataclass(frozen=True)
class Streams:
    """A node in the tree of random streams.

    ``Streams(7).child("band", 3).generator()`` always yields the same
    generator state, whatever else has been drawn before.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *parts) -> "Streams":
        return Streams(self.seed, self.key + tuple(_key_word(p) for p in parts))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))


def as_streams(source) -> Streams:
    """Accept an int seed, a :class:`Streams`, or ``None`` (seed 0)."""
    if isinstance(source, Streams):
        return source
    if source is None:
        return Streams(0)
    if isinstance(source, (int, np.integer)):
        return Streams(int(source))
    raise TypeError(f"cannot derive random streams from {type(source).__name__}")


def as_generator(source) -> np.random.Generator:
    if isinstance(source, np.random.Generator):
        return source
    return as_streams(source).generator()


def default_threads() -> int:
    env = os.environ.get("LQG_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Ordered map over a thread pool; ``threads=1`` runs inline."""
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def block_sizes(total: int, block: int) -> Sequence[int]:
    """Split ``total`` items into fixed-size blocks (the last one may be short)."""
    full, rest = divmod(int(total), int(block))
    return [block] * full + ([rest] if rest else [])
