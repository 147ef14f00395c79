"""Static brick decomposition of the simulation space across ranks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class PartitionError(ValueError):
    pass


def rank_grid_for(ranks: int) -> tuple[int, int, int]:
    """Factor ``ranks`` into three counts, as close to a cube as possible.

    Ties go to the factorization with more splits along x, then y.
    """
    best = None
    for px in range(1, ranks + 1):
        if ranks % px:
            continue
        for py in range(1, ranks // px + 1):
            if (ranks // px) % py:
                continue
            pz = ranks // (px * py)
            score = (max(px, py, pz) - min(px, py, pz), -px, -py)
            if best is None or score < best[0]:
                best = (score, (px, py, pz))
    return best[1]


@dataclass(frozen=True)
class PartitionMap:
    """Ranks own axis-aligned bricks of partition boxes.

    Positions outside the space belong to the nearest edge brick, so under
    open boundaries the outermost ranks absorb any growth of the space.
    """

    lower: float
    upper: float
    box_length: float
    boxes: int
    rank_grid: tuple[int, int, int]
    cuts: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    @property
    def rank_count(self) -> int:
        px, py, pz = self.rank_grid
        return px * py * pz

    def rank_of(self, gx: int, gy: int, gz: int) -> int:
        _, py, pz = self.rank_grid
        return (gx * py + gy) * pz + gz

    def grid_of(self, rank: int) -> tuple[int, int, int]:
        _, py, pz = self.rank_grid
        return rank // (py * pz), (rank // pz) % py, rank % pz

    def box_of(self, positions) -> np.ndarray:
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        b = np.floor((p - self.lower) / self.box_length).astype(np.int64)
        return np.clip(b, 0, self.boxes - 1)

    def owner_of_box(self, box) -> np.ndarray:
        b = np.atleast_2d(np.asarray(box, dtype=np.int64))
        g = [np.searchsorted(np.asarray(self.cuts[a]), b[:, a], side="right") - 1 for a in range(3)]
        _, py, pz = self.rank_grid
        return (g[0] * py + g[1]) * pz + g[2]

    def owner_of(self, positions) -> np.ndarray:
        return self.owner_of_box(self.box_of(positions))

    def bounds(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        """Owned region of ``rank``; edge bricks extend to infinity."""
        g = self.grid_of(rank)
        lo = np.empty(3)
        hi = np.empty(3)
        for a in range(3):
            c = self.cuts[a]
            lo[a] = -math.inf if g[a] == 0 else self.lower + c[g[a]] * self.box_length
            hi[a] = math.inf if g[a] == self.rank_grid[a] - 1 else self.lower + c[g[a] + 1] * self.box_length
        return lo, hi

    def distance_to(self, positions, rank: int) -> np.ndarray:
        lo, hi = self.bounds(rank)
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        return np.sqrt((d * d).sum(axis=1))

    def neighbors(self, rank: int) -> list[int]:
        """Ranks whose bricks touch ``rank``'s brick (faces, edges or corners)."""
        g = self.grid_of(rank)
        out = []
        for d in itertools.product((-1, 0, 1), repeat=3):
            h = [g[a] + d[a] for a in range(3)]
            if d == (0, 0, 0) or any(not 0 <= h[a] < self.rank_grid[a] for a in range(3)):
                continue
            out.append(self.rank_of(*h))
        return sorted(out)

    def volume_fraction(self, rank: int) -> float:
        """Share of the space cube owned by ``rank``."""
        lo, hi = self.bounds(rank)
        lo = np.clip(lo, self.lower, self.upper)
        hi = np.clip(hi, self.lower, self.upper)
        ext = np.maximum(hi - lo, 0.0)
        return float(np.prod(ext) / (self.upper - self.lower) ** 3)

    def clipped_bounds(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.bounds(rank)
        return np.clip(lo, self.lower, self.upper), np.clip(hi, self.lower, self.upper)


def partition_space(lower: float, upper: float, ranks: int, box_length: float, factor: int = 1,
                    rank_grid: tuple[int, int, int] | None = None) -> PartitionMap:
    """Split ``[lower, upper)^3`` into bricks of partition boxes, one per rank.

    Partition boxes are ``factor`` neighbor-grid boxes wide.
    """
    if ranks < 1:
        raise PartitionError("ranks must be >= 1")
    if factor < 1 or int(factor) != factor:
        raise PartitionError("partition factor must be a positive integer")
    if not upper > lower or not box_length > 0:
        raise PartitionError("space and box length must be positive")
    length = factor * box_length
    boxes = max(1, math.ceil((upper - lower) / length))
    grid = tuple(rank_grid) if rank_grid is not None else rank_grid_for(ranks)
    if len(grid) != 3 or grid[0] * grid[1] * grid[2] != ranks:
        raise PartitionError(f"rank grid {grid} does not multiply to {ranks}")
    if max(grid) > boxes:
        raise PartitionError(f"{ranks} ranks need more than the {boxes}^3 partition boxes available")
    cuts = tuple(tuple(k * boxes // p for k in range(p + 1)) for p in grid)
    return PartitionMap(float(lower), float(upper), float(length), boxes, grid, cuts)
