"""Morton codes and the gap-offset mapping for non power-of-two grids.

For a grid that is not a power-of-two cube the in-space Morton codes have
gaps. :func:`compute_morton_offsets` walks the implicit octree (quadtree in
2D) depth first and records, for every run of in-space codes that follows a
gap, the rank of the first box in the run and the number of codes skipped so
far. Complete and empty subtrees are consumed in constant time, so only the
nodes that straddle the grid surface are expanded.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BITS_3D = 21
BITS_2D = 32


class MortonOverflowError(ValueError):
    pass


def _spread3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def _spread2(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x3333333333333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x5555555555555555)
    return v


def _compact2(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x5555555555555555)
    v = (v | (v >> np.uint64(1))) & np.uint64(0x3333333333333333)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x00000000FFFFFFFF)
    return v


def _check(coords, bits):
    for c in coords:
        c = np.asarray(c)
        if c.size and (np.min(c) < 0 or np.max(c) >= (1 << bits)):
            raise MortonOverflowError(f"coordinate outside [0, 2^{bits})")


def morton_encode(ix, iy, iz=None):
    """Interleave box coordinates; x occupies the lowest bit of each group.

    With ``iz=None`` the 2D variant is used. Scalars in, int out; arrays in,
    uint64 array out.
    """
    scalar = np.ndim(ix) == 0
    if iz is None:
        _check((ix, iy), BITS_2D)
        code = _spread2(np.asarray(ix)) | (_spread2(np.asarray(iy)) << np.uint64(1))
    else:
        _check((ix, iy, iz), BITS_3D)
        code = (
            _spread3(np.asarray(ix))
            | (_spread3(np.asarray(iy)) << np.uint64(1))
            | (_spread3(np.asarray(iz)) << np.uint64(2))
        )
    return int(code) if scalar else code


def morton_decode(code, ndim: int = 3):
    code = np.asarray(code, dtype=np.uint64)
    if ndim == 2:
        return _compact2(code), _compact2(code >> np.uint64(1))
    return _compact3(code), _compact3(code >> np.uint64(1)), _compact3(code >> np.uint64(2))


@dataclass(frozen=True)
class MortonOffsets:
    dims: tuple[int, ...]
    box_counter: np.ndarray
    offset: np.ndarray
    nodes_visited: int

    @property
    def entries(self) -> list[tuple[int, int]]:
        return [(int(b), int(o)) for b, o in zip(self.box_counter, self.offset)]

    def codes(self) -> np.ndarray:
        """Morton code of every in-space box, in increasing order."""
        n = int(np.prod(self.dims))
        ranks = np.arange(n, dtype=np.int64)
        slot = np.searchsorted(self.box_counter, ranks, side="right") - 1
        return (ranks + self.offset[slot]).astype(np.uint64)

    def boxes(self) -> tuple[np.ndarray, ...]:
        """Box coordinates of every in-space box in Morton order."""
        return morton_decode(self.codes(), len(self.dims))


@lru_cache(maxsize=64)
def compute_morton_offsets(dims: tuple[int, ...]) -> MortonOffsets:
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise ValueError(f"dims must be 2 or 3 positive ints, got {dims}")
    ndim = len(dims)
    side = 1
    while side < max(dims):
        side *= 2
    fanout = 1 << ndim

    box_counter = 0
    offset = 0
    found_gap = True
    counters: list[int] = []
    offsets: list[int] = []
    visited = 0

    # explicit stack of (corner, side); children pushed in reverse Morton order
    stack = [((0,) * ndim, side)]
    while stack:
        corner, s = stack.pop()
        visited += 1
        leaves = s**ndim
        inside = 1
        for c, d in zip(corner, dims):
            inside *= max(0, min(c + s, d) - c)
        if inside == leaves:
            if found_gap:
                counters.append(box_counter)
                offsets.append(offset)
                found_gap = False
            box_counter += leaves
        elif inside == 0:
            offset += leaves
            found_gap = True
        else:
            h = s // 2
            for child in range(fanout - 1, -1, -1):
                sub = tuple(corner[a] + (h if (child >> a) & 1 else 0) for a in range(ndim))
                stack.append((sub, h))
    return MortonOffsets(dims, np.array(counters, dtype=np.int64), np.array(offsets, dtype=np.int64), visited)


def enumerate_codes(dims: tuple[int, ...]) -> np.ndarray:
    """Reference: encode every in-space box and sort."""
    grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    if len(dims) == 2:
        codes = morton_encode(grids[0].ravel(), grids[1].ravel())
    else:
        codes = morton_encode(grids[0].ravel(), grids[1].ravel(), grids[2].ravel())
    return np.sort(np.asarray(codes, dtype=np.uint64))
