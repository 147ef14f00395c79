"""Dense agent storage with reuse-counted slot handles.

Agents live in struct-of-arrays columns. Live agents always occupy slots
``[0, count)``; read-only ghost copies received from other ranks sit directly
behind them in ``[count, count + ghost_count)`` and are dropped before any
commit. Removal keeps the store dense by moving survivors from the tail into
the holes, following the five-step parallel scheme in :func:`plan_removals`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import registry

NO_GID = -1
UINT_MAX = np.iinfo(np.int64).max

# disturbance bits consumed by static-agent detection
DISTURB_NEIGHBORS = 1  # moved, grew, or newly added: neighbors must recompute forces
DISTURB_SELF = 2  # change that only affects the agent itself (e.g. shrinking)


class StaleHandleError(LookupError):
    """A LocalAgentId whose slot has since been vacated or reused."""


class GhostMutationError(RuntimeError):
    """Attempt to mutate a read-only ghost agent."""


class RemovalConflictError(ValueError):
    """The same agent was scheduled for removal more than once."""


@dataclass(frozen=True, order=True)
class LocalAgentId:
    index: int
    reuse_counter: int


@dataclass(frozen=True, order=True)
class GlobalAgentId:
    rank: int
    counter: int


@dataclass(frozen=True)
class BehaviorInstance:
    behavior_tag: int
    parameters: tuple[float, ...] = ()
    copy_on_division: bool = True
    remove_on_division: bool = False

    def __post_init__(self):
        registry.behavior(self.behavior_tag)


def behavior_mask(behaviors: Iterable[BehaviorInstance]) -> int:
    mask = 0
    for b in behaviors:
        mask |= 1 << registry.behavior(b.behavior_tag).bit
    return mask


@dataclass(eq=False)
class AgentRecord:
    """One agent outside the store: what gets serialized and what divide() returns."""

    position: np.ndarray
    diameter: float
    kind_tag: int
    behaviors: list[BehaviorInstance] = field(default_factory=list)
    static_flag: bool = False
    state: int = 0
    age: int = 0
    rng_key: int = 0
    global_id: GlobalAgentId | None = None
    local_id: LocalAgentId | None = None
    disturbed: int = 0
    nonzero_forces: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (3,) or not np.all(np.isfinite(self.position)):
            raise ValueError(f"position must be a finite 3-vector, got {self.position!r}")
        if not self.diameter > 0:
            raise ValueError(f"diameter must be positive, got {self.diameter}")
        registry.kind(self.kind_tag)

    def __eq__(self, other):
        if not isinstance(other, AgentRecord):
            return NotImplemented
        return (
            np.array_equal(self.position, other.position)
            and self.diameter == other.diameter
            and self.kind_tag == other.kind_tag
            and list(self.behaviors) == list(other.behaviors)
            and self.static_flag == other.static_flag
            and self.state == other.state
            and self.age == other.age
            and self.rng_key == other.rng_key
            and self.global_id == other.global_id
            and self.disturbed == other.disturbed
            and self.nonzero_forces == other.nonzero_forces
        )

    __hash__ = None


_COLUMNS = {
    # name: (dtype, trailing shape)
    "position": (np.float64, (3,)),
    "diameter": (np.float64, ()),
    "kind": (np.int32, ()),
    "behavior_mask": (np.uint32, ()),
    "rng_key": (np.uint64, ()),
    "gid_rank": (np.int64, ()),
    "gid_counter": (np.int64, ()),
    "state": (np.int32, ()),
    "age": (np.int32, ()),
    "static": (np.uint8, ()),
    "disturbed": (np.uint8, ()),
    "nonzero_forces": (np.int32, ()),
}


@dataclass
class RemovalPlan:
    new_size: int
    dst: np.ndarray  # holes below new_size, filled in order
    src: np.ndarray  # surviving tail slots moved into them
    aux_elements: int


def plan_removals(old_size: int, per_worker: Sequence[np.ndarray], workers: int | None = None) -> RemovalPlan:
    """Compute the moves that compact a store after removing ``per_worker`` slots.

    Steps: (1) size the two auxiliary arrays by the number of removals;
    (2) each worker records its removed slots, holes left of ``new_size`` in
    ``to_right`` and tail hits in ``not_to_left``; (3) each block compacts its
    slice of both arrays and counts its swaps; (4) prefix sums of the swap
    counts pair the k-th hole with the k-th surviving tail slot. Only arrays of
    length ``removed`` (plus one counter per block) are allocated.
    """
    per_worker = [np.asarray(r, dtype=np.int64).ravel() for r in per_worker]
    workers = max(1, workers if workers is not None else len(per_worker))
    sizes = np.array([r.size for r in per_worker], dtype=np.int64)
    total = int(sizes.sum())
    new_size = old_size - total
    if total == 0:
        return RemovalPlan(old_size, np.empty(0, np.int64), np.empty(0, np.int64), 0)
    if new_size < 0:
        raise RemovalConflictError("more removals than agents")

    # step 1
    to_right = np.full(total, UINT_MAX, dtype=np.int64)
    not_to_left = np.zeros(total, dtype=np.int64)

    # step 2
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    for w, idx in enumerate(per_worker):
        if idx.size == 0:
            continue
        if idx.min() < 0 or idx.max() >= old_size:
            raise IndexError("removal index outside the live range")
        head = idx < new_size
        pos = offsets[w] + np.flatnonzero(head)
        to_right[pos] = idx[head]
        tail = idx[~head] - new_size
        if tail.size and (not_to_left[tail].any() or np.unique(tail).size != tail.size):
            raise RemovalConflictError("agent scheduled for removal twice")
        not_to_left[tail] = 1

    # step 3: per block compaction; not_to_left turns into to_left in place
    bounds = np.linspace(0, total, min(workers, total) + 1).astype(np.int64)
    n_blocks = bounds.size - 1
    swaps_right = np.zeros(n_blocks, dtype=np.int64)
    swaps_left = np.zeros(n_blocks, dtype=np.int64)
    for b in range(n_blocks):
        lo, hi = bounds[b], bounds[b + 1]
        seg = to_right[lo:hi]
        keep = seg[seg != UINT_MAX]
        to_right[lo : lo + keep.size] = keep
        swaps_right[b] = keep.size
        zeros = np.flatnonzero(not_to_left[lo:hi] == 0) + lo + new_size
        not_to_left[lo : lo + zeros.size] = zeros
        swaps_left[b] = zeros.size
    to_left = not_to_left

    # step 4
    n_swaps = int(swaps_right.sum())
    if n_swaps != int(swaps_left.sum()):
        raise RemovalConflictError("agent scheduled for removal twice")
    start_r = np.concatenate(([0], np.cumsum(swaps_right)[:-1]))
    start_l = np.concatenate(([0], np.cumsum(swaps_left)[:-1]))
    dst = np.concatenate([to_right[bounds[b] : bounds[b] + swaps_right[b]] for b in range(n_blocks)])
    src = np.concatenate([to_left[bounds[b] : bounds[b] + swaps_left[b]] for b in range(n_blocks)])
    assert dst.size == n_swaps and start_r[-1] <= n_swaps and start_l[-1] <= n_swaps
    if np.unique(dst).size != dst.size:
        raise RemovalConflictError("agent scheduled for removal twice")
    aux = to_right.size + not_to_left.size + swaps_right.size + swaps_left.size
    return RemovalPlan(new_size, dst, src, aux)


class AgentStore:
    """Slab of agent columns. Slots ``>= count`` (past the ghosts) are free."""

    def __init__(self, capacity: int = 64):
        capacity = max(int(capacity), 1)
        self._cols: dict[str, np.ndarray] = {
            name: np.zeros((capacity, *shape), dtype=dtype) for name, (dtype, shape) in _COLUMNS.items()
        }
        self._cols["gid_rank"][:] = NO_GID
        self._cols["gid_counter"][:] = NO_GID
        self.behaviors = np.empty(capacity, dtype=object)
        self.reuse = np.zeros(capacity, dtype=np.int64)
        self.count = 0
        self.ghost_count = 0
        self.gid_next = 0
        self.rank = 0
        self.last_removal_aux = 0

    # -- column access -------------------------------------------------
    @property
    def capacity(self) -> int:
        return self.reuse.size

    def __getattr__(self, name):
        cols = self.__dict__.get("_cols")
        if cols is not None and name in cols:
            return cols[name]
        raise AttributeError(name)

    def column(self, name: str) -> np.ndarray:
        return self._cols[name]

    def column_names(self) -> list[str]:
        return list(self._cols)

    @property
    def total(self) -> int:
        return self.count + self.ghost_count

    def free_slots(self) -> range:
        return range(self.total, self.capacity)

    def _grow(self, needed: int) -> None:
        if needed <= self.capacity:
            return
        new_cap = max(needed, 2 * self.capacity)
        for name, arr in self._cols.items():
            fill = NO_GID if name in ("gid_rank", "gid_counter") else 0
            grown = np.full((new_cap, *arr.shape[1:]), fill, dtype=arr.dtype)
            grown[: arr.shape[0]] = arr
            self._cols[name] = grown
        beh = np.empty(new_cap, dtype=object)
        beh[: self.behaviors.size] = self.behaviors
        self.behaviors = beh
        reuse = np.zeros(new_cap, dtype=np.int64)
        reuse[: self.reuse.size] = self.reuse
        self.reuse = reuse

    # -- handles -------------------------------------------------------
    def id_of(self, index: int) -> LocalAgentId:
        if not 0 <= index < self.count:
            raise IndexError(f"slot {index} holds no live agent")
        return LocalAgentId(int(index), int(self.reuse[index]))

    def resolve(self, lid: LocalAgentId) -> int:
        if not 0 <= lid.index < self.count or self.reuse[lid.index] != lid.reuse_counter:
            raise StaleHandleError(f"stale agent handle {lid}")
        return lid.index

    def is_ghost(self, index: int) -> bool:
        return self.count <= index < self.total

    def check_mutable(self, index: int) -> None:
        if self.is_ghost(index):
            raise GhostMutationError(f"slot {index} is a read-only ghost")
        if not 0 <= index < self.count:
            raise IndexError(f"slot {index} holds no live agent")

    def set_position(self, index: int, position) -> None:
        self.check_mutable(index)
        self.position[index] = position

    def set_diameter(self, index: int, diameter: float) -> None:
        self.check_mutable(index)
        if not diameter > 0:
            raise ValueError("diameter must be positive")
        self.diameter[index] = diameter

    # -- global ids ----------------------------------------------------
    def ensure_global_ids(self, indices: np.ndarray) -> None:
        """Assign ``(rank, counter)`` to agents that do not have one yet."""
        indices = np.asarray(indices, dtype=np.int64)
        missing = indices[self.gid_rank[indices] == NO_GID]
        if missing.size == 0:
            return
        missing = np.unique(missing)
        self.gid_rank[missing] = self.rank
        self.gid_counter[missing] = np.arange(self.gid_next, self.gid_next + missing.size)
        self.gid_next += missing.size

    def global_id(self, index: int) -> GlobalAgentId | None:
        if self.gid_rank[index] == NO_GID:
            return None
        return GlobalAgentId(int(self.gid_rank[index]), int(self.gid_counter[index]))

    # -- records -------------------------------------------------------
    def record(self, index: int) -> AgentRecord:
        if not 0 <= index < self.total:
            raise IndexError(index)
        return AgentRecord(
            position=self.position[index].copy(),
            diameter=float(self.diameter[index]),
            kind_tag=int(self.kind[index]),
            behaviors=list(self.behaviors[index] or ()),
            static_flag=bool(self.static[index]),
            state=int(self.state[index]),
            age=int(self.age[index]),
            rng_key=int(self.rng_key[index]),
            global_id=self.global_id(index),
            local_id=self.id_of(index) if index < self.count else None,
            disturbed=int(self.disturbed[index]),
            nonzero_forces=int(self.nonzero_forces[index]),
        )

    def records(self, indices: Iterable[int] | None = None) -> list[AgentRecord]:
        if indices is None:
            indices = range(self.count)
        return [self.record(int(i)) for i in indices]

    def _write_records(self, start: int, records: Sequence[AgentRecord]) -> None:
        n = len(records)
        if n == 0:
            return
        sl = slice(start, start + n)
        self.position[sl] = np.array([r.position for r in records], dtype=np.float64)
        self.diameter[sl] = [r.diameter for r in records]
        self.kind[sl] = [r.kind_tag for r in records]
        self.behavior_mask[sl] = [behavior_mask(r.behaviors) for r in records]
        self.static[sl] = [r.static_flag for r in records]
        self.state[sl] = [r.state for r in records]
        self.age[sl] = [r.age for r in records]
        self.rng_key[sl] = np.array([r.rng_key for r in records], dtype=np.uint64)
        self.disturbed[sl] = [r.disturbed for r in records]
        self.nonzero_forces[sl] = [r.nonzero_forces for r in records]
        self.gid_rank[sl] = [r.global_id.rank if r.global_id else NO_GID for r in records]
        self.gid_counter[sl] = [r.global_id.counter if r.global_id else NO_GID for r in records]
        for k, r in enumerate(records):
            self.behaviors[start + k] = tuple(r.behaviors)

    # -- additions -----------------------------------------------------
    def commit_additions(self, per_worker: Sequence[Sequence[AgentRecord]]) -> list[LocalAgentId]:
        """Append every worker's pending records; returns the assigned ids.

        Each worker's block lands at an offset given by the prefix sum of the
        per-worker counts, so blocks could be written concurrently.
        """
        self._require_no_ghosts()
        sizes = [len(p) for p in per_worker]
        total = sum(sizes)
        if total == 0:
            return []
        base = self.count
        self._grow(base + total)
        offset = base
        for recs in per_worker:
            self._write_records(offset, list(recs))
            offset += len(recs)
        self.count += total
        return [LocalAgentId(i, int(self.reuse[i])) for i in range(base, base + total)]

    def add(self, record: AgentRecord) -> LocalAgentId:
        return self.commit_additions([[record]])[0]

    def append_columns(self, columns: dict[str, np.ndarray], behaviors: Sequence[tuple]) -> np.ndarray:
        """Bulk append of live agents from column arrays; returns new slot indices."""
        self._require_no_ghosts()
        n = len(behaviors)
        if n == 0:
            return np.empty(0, dtype=np.int64)
        base = self.count
        self._grow(base + n)
        sl = slice(base, base + n)
        for name in _COLUMNS:
            if name in columns:
                self._cols[name][sl] = columns[name]
            elif name in ("gid_rank", "gid_counter"):
                self._cols[name][sl] = NO_GID
            else:
                self._cols[name][sl] = 0
        for k, b in enumerate(behaviors):
            self.behaviors[base + k] = tuple(b)
        self.count += n
        return np.arange(base, base + n)

    # -- ghosts --------------------------------------------------------
    def append_ghosts(self, records: Sequence[AgentRecord]) -> np.ndarray:
        start = self.total
        self._grow(start + len(records))
        self._write_records(start, records)
        self.ghost_count += len(records)
        return np.arange(start, start + len(records))

    def append_ghost_columns(self, columns: dict[str, np.ndarray], behaviors: Sequence[tuple]) -> np.ndarray:
        """Bulk append of read-only ghosts after the live agents."""
        n = len(behaviors)
        start = self.total
        if n == 0:
            return np.empty(0, dtype=np.int64)
        self._grow(start + n)
        sl = slice(start, start + n)
        for name in _COLUMNS:
            if name in columns:
                self._cols[name][sl] = columns[name]
            else:
                self._cols[name][sl] = NO_GID if name in ("gid_rank", "gid_counter") else 0
        for k, b in enumerate(behaviors):
            self.behaviors[start + k] = tuple(b)
        self.ghost_count += n
        return np.arange(start, start + n)

    def clear_ghosts(self) -> None:
        if self.ghost_count:
            sl = slice(self.count, self.total)
            self.behaviors[sl] = None
            self.gid_rank[sl] = NO_GID
            self.gid_counter[sl] = NO_GID
            self.ghost_count = 0

    def _require_no_ghosts(self):
        if self.ghost_count:
            raise RuntimeError("ghosts must be cleared before committing structural changes")

    # -- removals ------------------------------------------------------
    def commit_removals(self, per_worker: Sequence[Iterable], workers: int | None = None) -> int:
        """Remove the scheduled agents and compact the store; returns the new count.

        Entries may be LocalAgentIds (validated against the reuse counter) or
        raw slot indices. Only slots that were past the new size may move left.
        """
        self._require_no_ghosts()
        lists = []
        for items in per_worker:
            items = list(items)
            if items and isinstance(items[0], LocalAgentId):
                lists.append(np.array([self.resolve(lid) for lid in items], dtype=np.int64))
            else:
                lists.append(np.asarray(items, dtype=np.int64))
        plan = plan_removals(self.count, lists, workers)
        self.last_removal_aux = plan.aux_elements
        if plan.new_size == self.count:
            return self.count
        self.apply_moves(plan.dst, plan.src)
        vacated = slice(plan.new_size, self.count)
        self.reuse[vacated] += 1
        self.behaviors[vacated] = None
        self.gid_rank[vacated] = NO_GID
        self.gid_counter[vacated] = NO_GID
        self.count = plan.new_size
        return self.count

    def apply_moves(self, dst: np.ndarray, src: np.ndarray) -> None:
        if dst.size == 0:
            return
        for arr in self._cols.values():
            arr[dst] = arr[src]
        self.behaviors[dst] = self.behaviors[src]
        self.reuse[dst] += 1

    def permute(self, order: np.ndarray) -> np.ndarray:
        """Reorder live agents so new slot ``k`` holds old slot ``order[k]``.

        Returns the old-to-new index table. Slots whose occupant changed get
        their reuse counter bumped so old handles to them read as stale.
        """
        self._require_no_ghosts()
        n = self.count
        order = np.asarray(order, dtype=np.int64)
        if order.shape != (n,):
            raise ValueError("permutation must cover all live agents")
        old_to_new = np.empty(n, dtype=np.int64)
        old_to_new[order] = np.arange(n)
        for arr in self._cols.values():
            arr[:n] = arr[order]
        self.behaviors[:n] = self.behaviors[order]
        changed = order != np.arange(n)
        self.reuse[:n][changed] += 1
        return old_to_new

    # -- misc ------------------------------------------------------------
    def set_behaviors(self, index: int, behaviors: Sequence[BehaviorInstance]) -> None:
        self.check_mutable(index)
        self.behaviors[index] = tuple(behaviors)
        self.behavior_mask[index] = behavior_mask(behaviors)

    def live_ids(self) -> list[LocalAgentId]:
        return [LocalAgentId(i, int(self.reuse[i])) for i in range(self.count)]
