"""Timestamped uniform grid for fixed-radius neighbor search.

Boxes hold a singly linked chain of agent slots (``box_head`` plus a
per-agent ``successor``). A box counts as empty unless its timestamp equals
the grid's current stamp, so a rebuild never clears the box arrays and costs
O(agents) rather than O(agents + boxes).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .._jit import njit, resolve
from .morton import compute_morton_offsets

EMPTY = -1
MAX_BOXES = 1 << 24


class NotInGridError(LookupError):
    pass


@njit(inline="always")
def _box_coord(p, origin, box_length, dim):
    c = int(np.floor((p - origin) / box_length))
    if c < 0:
        return 0
    if c >= dim:
        return dim - 1
    return c


@njit
def _build_nb(pos, n, origin, box_length, dims, stamp, box_ts, box_head, box_size, successor, agent_box):
    d0, d1, d2 = dims[0], dims[1], dims[2]
    for i in range(n):
        x = _box_coord(pos[i, 0], origin[0], box_length, d0)
        y = _box_coord(pos[i, 1], origin[1], box_length, d1)
        z = _box_coord(pos[i, 2], origin[2], box_length, d2)
        b = x + d0 * (y + d1 * z)
        agent_box[i] = b
        if box_ts[b] != stamp:
            box_ts[b] = stamp
            box_head[b] = -1
            box_size[b] = 0
        successor[i] = box_head[b]
        box_head[b] = i
        box_size[b] += 1


@njit
def _insert_nb(pos, lo, hi, origin, box_length, dims, stamp, box_ts, box_head, box_size, successor, agent_box):
    d0, d1, d2 = dims[0], dims[1], dims[2]
    for i in range(lo, hi):
        x = _box_coord(pos[i, 0], origin[0], box_length, d0)
        y = _box_coord(pos[i, 1], origin[1], box_length, d1)
        z = _box_coord(pos[i, 2], origin[2], box_length, d2)
        b = x + d0 * (y + d1 * z)
        agent_box[i] = b
        if box_ts[b] != stamp:
            box_ts[b] = stamp
            box_head[b] = -1
            box_size[b] = 0
        successor[i] = box_head[b]
        box_head[b] = i
        box_size[b] += 1


@njit(inline="always")
def gather_neighbors(i, px, py, pz, radius2, pos, origin, box_length, dims, stamp, box_ts, box_head, successor, out):
    """Write the slots within ``sqrt(radius2)`` of (px,py,pz), excluding ``i``, into ``out``."""
    d0, d1, d2 = dims[0], dims[1], dims[2]
    cx = _box_coord(px, origin[0], box_length, d0)
    cy = _box_coord(py, origin[1], box_length, d1)
    cz = _box_coord(pz, origin[2], box_length, d2)
    k = 0
    for z in range(max(cz - 1, 0), min(cz + 2, d2)):
        for y in range(max(cy - 1, 0), min(cy + 2, d1)):
            for x in range(max(cx - 1, 0), min(cx + 2, d0)):
                b = x + d0 * (y + d1 * z)
                if box_ts[b] != stamp:
                    continue
                j = box_head[b]
                while j != -1:
                    if j != i:
                        dx = pos[j, 0] - px
                        dy = pos[j, 1] - py
                        dz = pos[j, 2] - pz
                        if dx * dx + dy * dy + dz * dz <= radius2:
                            if k == out.shape[0]:
                                return -1
                            out[k] = j
                            k += 1
                    j = successor[j]
    return k


@njit
def _query_nb(i, px, py, pz, radius2, pos, origin, box_length, dims, stamp, box_ts, box_head, successor, out):
    return gather_neighbors(i, px, py, pz, radius2, pos, origin, box_length, dims, stamp, box_ts, box_head, successor, out)


@njit
def _morton_gather_nb(boxes, stamp, box_ts, box_head, box_size, successor, ascending, order, box_end):
    k = 0
    for r in range(boxes.shape[0]):
        b = boxes[r]
        if box_ts[b] == stamp:
            size = box_size[b]
            j = box_head[b]
            if ascending:
                t = k
                while j != -1:
                    order[t] = j
                    t += 1
                    j = successor[j]
            else:
                t = k + size - 1
                while j != -1:
                    order[t] = j
                    t -= 1
                    j = successor[j]
            k += size
        box_end[r] = k
    return k


@dataclass
class PartitionPlan:
    boundaries: list[tuple[int, int]]
    old_to_new: np.ndarray

    @property
    def sizes(self) -> list[int]:
        return [hi - lo for lo, hi in self.boundaries]


class UniformGrid:
    def __init__(self, backend: str | None = None):
        self.backend = resolve(backend)
        self.box_length = 1.0
        self.origin = np.zeros(3)
        self.dims = np.ones(3, dtype=np.int64)
        self.current_stamp = 0
        self.box_timestamp = np.full(1, -1, dtype=np.int64)
        self.box_head = np.full(1, EMPTY, dtype=np.int64)
        self.box_size = np.zeros(1, dtype=np.int64)
        self.successor = np.zeros(0, dtype=np.int64)
        self.agent_box = np.zeros(0, dtype=np.int64)
        self.positions = np.zeros((0, 3))
        self.n = 0
        self.chain_ascending = False
        self._buf = np.empty(64, dtype=np.int64)

    @property
    def num_boxes(self) -> int:
        return int(np.prod(self.dims))

    # -- build ---------------------------------------------------------
    def _layout(self, pos: np.ndarray, interaction_length: float) -> None:
        L = float(interaction_length)
        if pos.shape[0]:
            lo = pos.min(axis=0)
            hi = pos.max(axis=0)
        else:
            lo = hi = np.zeros(3)
        while True:
            origin = lo - L
            dims = np.floor((hi - origin) / L).astype(np.int64) + 2
            if np.prod(dims) <= MAX_BOXES:
                break
            L *= 2.0
        self.box_length = L
        self.origin = origin
        self.dims = dims
        nb = int(np.prod(dims))
        if self.box_timestamp.size < nb:
            # fresh arrays only when the grid outgrows its allocation
            self.box_timestamp = np.full(nb, -1, dtype=np.int64)
            self.box_head = np.full(nb, EMPTY, dtype=np.int64)
            self.box_size = np.zeros(nb, dtype=np.int64)

    def _ensure_agent_capacity(self, n: int) -> None:
        if self.successor.size < n:
            cap = max(n, 2 * self.successor.size, 16)
            self.successor = np.empty(cap, dtype=np.int64)
            self.agent_box = np.empty(cap, dtype=np.int64)

    def build(self, positions: np.ndarray, n: int | None = None, interaction_length: float = 1.0, box_length: float | None = None):
        """Assign slots ``[0, n)`` of ``positions`` to boxes."""
        if not interaction_length > 0:
            raise ValueError("interaction_length must be positive")
        n = positions.shape[0] if n is None else int(n)
        pos = positions[:n]
        if n and not np.all(np.isfinite(pos)):
            raise ValueError("non-finite agent position")
        L = max(float(interaction_length), float(box_length or 0.0))
        self._layout(pos, L)
        self._ensure_agent_capacity(n)
        self.current_stamp += 1
        self.positions = positions
        self.n = n
        if self.backend == "numba":
            _build_nb(positions, n, self.origin, self.box_length, self.dims, self.current_stamp,
                      self.box_timestamp, self.box_head, self.box_size, self.successor, self.agent_box)
            self.chain_ascending = False
        else:
            self._build_np(pos, n)
            self.chain_ascending = True
        return self

    def box_index_np(self, pos: np.ndarray) -> np.ndarray:
        c = np.floor((pos - self.origin) / self.box_length).astype(np.int64)
        c = np.clip(c, 0, self.dims - 1)
        return c[:, 0] + self.dims[0] * (c[:, 1] + self.dims[1] * c[:, 2])

    def _build_np(self, pos, n):
        if n == 0:
            return
        boxes = self.box_index_np(pos)
        order = np.argsort(boxes, kind="stable")
        sb = boxes[order]
        first = np.ones(n, dtype=bool)
        first[1:] = sb[1:] != sb[:-1]
        last = np.ones(n, dtype=bool)
        last[:-1] = first[1:]
        succ = np.full(n, EMPTY, dtype=np.int64)
        succ[:-1] = order[1:]
        succ[last] = EMPTY
        self.successor[order] = succ
        self.agent_box[:n] = boxes
        ub, counts = sb[first], np.diff(np.append(np.flatnonzero(first), n))
        self.box_timestamp[ub] = self.current_stamp
        self.box_head[ub] = order[first]
        self.box_size[ub] = counts

    # -- incremental updates --------------------------------------------
    def insert(self, lo: int, hi: int, positions: np.ndarray | None = None) -> None:
        """Add slots ``[lo, hi)`` to the current grid.

        Pass ``positions`` when the position array was reallocated since build.
        """
        if positions is not None:
            self.positions = positions
        if hi <= lo:
            return
        self._ensure_agent_capacity_keep(hi)
        if self.backend == "numba":
            _insert_nb(self.positions, lo, hi, self.origin, self.box_length, self.dims, self.current_stamp,
                       self.box_timestamp, self.box_head, self.box_size, self.successor, self.agent_box)
        else:
            for i in range(lo, hi):
                self._push(i, int(self.box_index_np(self.positions[i : i + 1])[0]))
        self.n = max(self.n, hi)

    def _ensure_agent_capacity_keep(self, n):
        if self.successor.size < n:
            cap = max(n, 2 * self.successor.size, 16)
            succ = np.empty(cap, dtype=np.int64)
            succ[: self.successor.size] = self.successor
            ab = np.empty(cap, dtype=np.int64)
            ab[: self.agent_box.size] = self.agent_box
            self.successor, self.agent_box = succ, ab

    def _push(self, i: int, b: int) -> None:
        if self.box_timestamp[b] != self.current_stamp:
            self.box_timestamp[b] = self.current_stamp
            self.box_head[b] = EMPTY
            self.box_size[b] = 0
        self.successor[i] = self.box_head[b]
        self.box_head[b] = i
        self.box_size[b] += 1
        self.agent_box[i] = b

    def add(self, index: int) -> None:
        self.insert(index, index + 1)

    def remove(self, index: int) -> None:
        b = int(self.agent_box[index])
        if self.box_timestamp[b] != self.current_stamp:
            raise NotInGridError(index)
        prev, j = EMPTY, int(self.box_head[b])
        while j != EMPTY and j != index:
            prev, j = j, int(self.successor[j])
        if j == EMPTY:
            raise NotInGridError(index)
        if prev == EMPTY:
            self.box_head[b] = self.successor[index]
        else:
            self.successor[prev] = self.successor[index]
        self.box_size[b] -= 1
        self.agent_box[index] = EMPTY

    def update(self, index: int) -> None:
        """Re-bucket ``index`` after its position changed."""
        b = int(self.box_index_np(self.positions[index : index + 1])[0])
        if b == self.agent_box[index]:
            return
        self.remove(index)
        self._push(index, b)

    # -- queries -------------------------------------------------------
    def box_members(self, b: int) -> list[int]:
        if self.box_timestamp[b] != self.current_stamp:
            return []
        out, j = [], int(self.box_head[b])
        while j != EMPTY:
            out.append(j)
            j = int(self.successor[j])
        return out

    def contains(self, index: int) -> bool:
        if not 0 <= index < self.n:
            return False
        b = int(self.agent_box[index])
        return b != EMPTY and index in self.box_members(b)

    def neighbors(self, index: int, radius: float | None = None) -> np.ndarray:
        if not 0 <= index < self.n or self.agent_box[index] == EMPTY:
            raise NotInGridError(index)
        return self.neighbors_of_point(self.positions[index], radius, exclude=index)

    def neighbors_of_point(self, point, radius: float | None = None, exclude: int = -1) -> np.ndarray:
        radius = self.box_length if radius is None else float(radius)
        if radius > self.box_length * (1 + 1e-12):
            raise ValueError("query radius exceeds box length")
        p = np.asarray(point, dtype=np.float64)
        while True:
            k = _query_nb(exclude, p[0], p[1], p[2], radius * radius, self.positions, self.origin, self.box_length,
                          self.dims, self.current_stamp, self.box_timestamp, self.box_head, self.successor, self._buf)
            if k >= 0:
                return self._buf[:k].copy()
            self._buf = np.empty(2 * self._buf.size, dtype=np.int64)

    def for_each_neighbor(self, index: int, radius: float | None, visitor) -> None:
        for j in self.neighbors(index, radius):
            visitor(int(j))

    def occupancy_csv(self) -> str:
        """Occupied boxes as CSV rows (box index, Morton code, count)."""
        offsets = compute_morton_offsets(tuple(int(d) for d in self.dims))
        codes = offsets.codes()
        x, y, z = offsets.boxes()
        flat = (x.astype(np.int64) + self.dims[0] * (y.astype(np.int64) + self.dims[1] * z.astype(np.int64)))
        buf = io.StringIO()
        buf.write("box_index,morton_code,count\n")
        for b, c in zip(flat, codes):
            if self.box_timestamp[b] == self.current_stamp and self.box_size[b] > 0:
                buf.write(f"{int(b)},{int(c)},{int(self.box_size[b])}\n")
        return buf.getvalue()

    # -- sorting ---------------------------------------------------------
    def morton_order(self) -> tuple[np.ndarray, np.ndarray]:
        """Slots in Morton box order plus the running agent count at each box end."""
        offsets = compute_morton_offsets(tuple(int(d) for d in self.dims))
        x, y, z = offsets.boxes()
        boxes = x.astype(np.int64) + self.dims[0] * (y.astype(np.int64) + self.dims[1] * z.astype(np.int64))
        order = np.empty(self.n, dtype=np.int64)
        box_end = np.empty(boxes.size, dtype=np.int64)
        _morton_gather_nb(boxes, self.current_stamp, self.box_timestamp, self.box_head, self.box_size,
                          self.successor, self.chain_ascending, order, box_end)
        return order, box_end


def balance(box_end: np.ndarray, n: int, workers: int) -> list[tuple[int, int]]:
    """Split ``[0, n)`` at the box boundary closest to each equal share."""
    cuts = np.unique(np.concatenate(([0], box_end, [n])))
    bounds = [0]
    for w in range(1, workers):
        target = w * n / workers
        k = np.searchsorted(cuts, target)
        cand = [cuts[max(k - 1, 0)], cuts[min(k, cuts.size - 1)]]
        best = min(cand, key=lambda c: (abs(c - target), c))
        bounds.append(max(int(best), bounds[-1]))
    bounds.append(n)
    return [(bounds[k], bounds[k + 1]) for k in range(workers)]


def sort_and_balance(store, grid: UniformGrid, workers: int) -> PartitionPlan:
    """Reorder live agents by Morton box order and split them among workers.

    ``grid`` must have been built over exactly the live agents. The grid is
    rebuilt after the permutation so it stays consistent with the store.
    """
    n = store.count
    if grid.n != n:
        raise ValueError("grid was not built over the live agents")
    order, box_end = grid.morton_order()
    old_to_new = store.permute(order)
    grid.build(store.position, n, grid.box_length)
    return PartitionPlan(balance(box_end, n, workers), old_to_new)


def brute_force_neighbors(positions: np.ndarray, index: int, radius: float, n: int | None = None) -> np.ndarray:
    n = positions.shape[0] if n is None else n
    d2 = np.sum((positions[:n] - positions[index]) ** 2, axis=1)
    mask = d2 <= radius * radius
    mask[index] = False
    return np.flatnonzero(mask)


_OFFSETS = np.array([(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64)


def neighbor_pairs(positions: np.ndarray, n_query: int, n_total: int, radius: float, keys: np.ndarray | None = None):
    """Vectorized cell-list neighbor table in CSR form.

    Rows are slots ``[0, n_query)``, candidates slots ``[0, n_total)``. Within
    a row the neighbors are ordered by ``keys`` (slot index if omitted).
    Returns ``(indptr, indices)``.
    """
    indptr = np.zeros(n_query + 1, dtype=np.int64)
    if n_query == 0 or n_total == 0:
        return indptr, np.zeros(0, dtype=np.int64)
    pos = positions[:n_total]
    L = float(radius)
    origin = pos.min(axis=0)
    coords = np.floor((pos - origin) / L).astype(np.int64)
    dims = coords.max(axis=0) + 1
    flat = coords[:, 0] + dims[0] * (coords[:, 1] + dims[1] * coords[:, 2])
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    qc = coords[:n_query]
    rows, cols = [], []
    qidx = np.arange(n_query)
    for off in _OFFSETS:
        nc = qc + off
        ok = np.all((nc >= 0) & (nc < dims), axis=1)
        nflat = nc[:, 0] + dims[0] * (nc[:, 1] + dims[1] * nc[:, 2])
        lo = np.searchsorted(sorted_flat, nflat, side="left")
        hi = np.searchsorted(sorted_flat, nflat, side="right")
        counts = np.where(ok, hi - lo, 0)
        total = int(counts.sum())
        if total == 0:
            continue
        starts = np.repeat(lo - (np.cumsum(counts) - counts), counts)
        rows.append(np.repeat(qidx, counts))
        cols.append(order[starts + np.arange(total)])
    if not rows:
        return indptr, np.zeros(0, dtype=np.int64)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    d = pos[c] - pos[r]
    keep = (r != c) & (np.einsum("ij,ij->i", d, d) <= L * L)
    r, c = r[keep], c[keep]
    second = c if keys is None else keys[c]
    srt = np.lexsort((second, r))
    r, c = r[srt], c[srt]
    np.add.at(indptr, r + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, c
