"""Binary snapshots of fields, measures and masks.

Layout (little-endian)::

    magic  b"LQGF"
    u32    format version
    u32    flags (FIELD, BANDS, MEASURE, MASK)
    f64    mass, gamma
    u32    band count N
    f64    cutoffs a_0..a_N
    f64    origin x, origin y, side length
    u32    cells per side n
    body   [X_N plane] [N band planes] [measure plane] [mask as RLE]

Planes are ``n*n`` f64 values in row-major order of the ``[i, j]`` arrays.
The mask body is a u32 run count followed by u32 run lengths that alternate
outside/inside, starting with outside.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import FieldStack, Grid, KernelParams
from .measure import LiouvilleGrid
from .report import content_hash

MAGIC = b"LQGF"
VERSION = 1

FIELD = 1
BANDS = 2
MEASURE = 4
MASK = 8


class SnapshotFormatError(ValueError):
    """Wrong magic, unsupported version or inconsistent header."""


class SnapshotCorruptError(ValueError):
    """Body length does not match the header."""


@dataclass
class Snapshot:
    params: KernelParams
    grid: Grid
    field: np.ndarray | None = None
    bands: list[np.ndarray] | None = None
    measure: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def flags(self) -> int:
        return ((FIELD if self.field is not None else 0) | (BANDS if self.bands is not None else 0)
                | (MEASURE if self.measure is not None else 0) | (MASK if self.mask is not None else 0))

    @classmethod
    def from_stack(cls, stack: FieldStack, bands: bool = False) -> "Snapshot":
        return cls(stack.params, stack.grid, np.asarray(stack.values),
                   [np.asarray(b) for b in stack.bands] if bands and stack.bands is not None else None)

    def stack(self) -> FieldStack:
        if self.field is None:
            raise SnapshotFormatError("snapshot has no field plane")
        return FieldStack(self.params, self.grid, self.field.copy(), self.params.total_variance(),
                          [b.copy() for b in self.bands] if self.bands is not None else None)

    def liouville(self) -> LiouvilleGrid:
        if self.measure is None:
            raise SnapshotFormatError("snapshot has no measure plane")
        return LiouvilleGrid(self.grid, self.params.gamma, self.measure.copy(), self.params.band_count,
                             self.params.total_variance())

    def with_measure(self, lg: LiouvilleGrid) -> "Snapshot":
        return Snapshot(self.params.with_gamma(lg.gamma), self.grid, self.field, self.bands,
                        np.asarray(lg.masses), self.mask)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        p, g = self.params, self.grid
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, self.flags))
        buf.write(struct.pack("<ddI", p.mass, p.gamma, p.band_count))
        buf.write(np.asarray(p.cutoffs, dtype="<f8").tobytes())
        buf.write(struct.pack("<dddI", g.origin[0], g.origin[1], g.side_length, g.cells))
        planes = []
        if self.field is not None:
            planes.append(self.field)
        if self.bands is not None:
            if len(self.bands) != p.band_count:
                raise SnapshotFormatError("band plane count differs from the band count")
            planes.extend(self.bands)
        if self.measure is not None:
            planes.append(self.measure)
        for a in planes:
            a = np.asarray(a, dtype=float)
            if a.shape != g.shape:
                raise SnapshotFormatError(f"plane of shape {a.shape} on a {g.shape} grid")
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        if self.mask is not None:
            runs = _rle(np.asarray(self.mask, dtype=bool).ravel())
            buf.write(struct.pack("<I", runs.size))
            buf.write(runs.astype("<u4").tobytes())
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    def content_hash(self) -> str:
        return content_hash([self.to_bytes()])


def _rle(flat: np.ndarray) -> np.ndarray:
    if flat.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.nonzero(np.diff(flat.astype(np.int8)))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs


def _unrle(runs: np.ndarray, size: int) -> np.ndarray:
    if int(runs.sum()) != size:
        raise SnapshotCorruptError(f"mask runs cover {int(runs.sum())} cells, grid has {size}")
    vals = (np.arange(runs.size) % 2).astype(bool)
    return np.repeat(vals, runs)


def from_bytes(data: bytes) -> Snapshot:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise SnapshotCorruptError(f"file ends at byte {len(view)}, needed {pos + n}")
        out = view[pos:pos + n]
        pos += n
        return out

    if len(data) < 4 or bytes(take(4)) != MAGIC:
        raise SnapshotFormatError("bad magic; not a field snapshot")
    version, flags = struct.unpack("<II", take(8))
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported format version {version}")
    if flags & ~(FIELD | BANDS | MEASURE | MASK):
        raise SnapshotFormatError(f"unknown flag bits {flags:#x}")
    mass, gamma, N = struct.unpack("<ddI", take(20))
    cutoffs = tuple(np.frombuffer(take(8 * (N + 1)), dtype="<f8").tolist())
    ox, oy, L, n = struct.unpack("<dddI", take(28))
    try:
        params = KernelParams(mass, gamma, cutoffs)
        grid = Grid((ox, oy), L, n)
    except ValueError as exc:
        raise SnapshotFormatError(f"invalid header: {exc}") from exc
    n_planes = bool(flags & FIELD) + (N if flags & BANDS else 0) + bool(flags & MEASURE)
    expected = pos + 8 * n * n * n_planes
    if not flags & MASK and len(data) != expected:
        raise SnapshotCorruptError(f"header declares {expected} bytes, file has {len(data)}")

    def plane():
        return np.frombuffer(take(8 * n * n), dtype="<f8").astype(float).reshape(n, n)

    field = plane() if flags & FIELD else None
    bands = [plane() for _ in range(N)] if flags & BANDS else None
    measure = plane() if flags & MEASURE else None
    mask = None
    if flags & MASK:
        (count,) = struct.unpack("<I", take(4))
        runs = np.frombuffer(take(4 * count), dtype="<u4").astype(np.int64)
        if pos != len(data):
            raise SnapshotCorruptError(f"{len(data) - pos} trailing bytes after the mask body")
        mask = _unrle(runs, n * n).reshape(n, n)
    return Snapshot(params, grid, field, bands, measure, mask)


def load(path) -> Snapshot:
    return from_bytes(Path(path).read_bytes())
