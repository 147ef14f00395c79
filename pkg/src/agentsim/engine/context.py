"""Execution contexts and the worker pool.

The pool splits ``[0, n)`` into fixed blocks. Workers claim blocks from a
shared counter, so an idle worker always picks up the next unprocessed block.
Which worker ran which block is recorded, because pending additions and
removals are attributed to the worker that produced them.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .store import AgentRecord, AgentStore, LocalAgentId, RemovalConflictError

IN_PLACE = "in-place"
COPY = "copy"
MODES = (IN_PLACE, COPY)

# columns that neighbors may read; copy mode snapshots them before agent ops
NEIGHBOR_COLUMNS = ("position", "diameter", "state")


class WorkerPool:
    def __init__(self, workers: int = 1, block_size: int = 256):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = int(workers)
        self.block_size = int(block_size)
        self._executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._local = threading.local()

    def blocks(self, n: int) -> list[tuple[int, int]]:
        bs = self.block_size
        return [(lo, min(lo + bs, n)) for lo in range(0, n, bs)]

    @property
    def worker_id(self) -> int:
        return getattr(self._local, "wid", 0)

    def parallel_for(self, n: int, fn) -> np.ndarray:
        """Run ``fn(lo, hi, worker)`` over all blocks; returns the worker of each block."""
        blocks = self.blocks(n)
        owner = np.zeros(len(blocks), dtype=np.int64)
        if not blocks:
            return owner
        if self._executor is None:
            self._local.wid = 0
            for lo, hi in blocks:
                fn(lo, hi, 0)
            return owner

        counter = itertools.count()
        lock = threading.Lock()

        def worker(wid):
            self._local.wid = wid
            while True:
                with lock:
                    b = next(counter)
                if b >= len(blocks):
                    return
                owner[b] = wid
                lo, hi = blocks[b]
                fn(lo, hi, wid)

        futures = [self._executor.submit(worker, w) for w in range(self.workers)]
        for f in futures:
            f.result()
        return owner

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


class ExecutionContext:
    """Per-rank buffers for one iteration of agent operations.

    In copy mode the ``nb_*`` arrays are snapshots taken before the agent ops
    run, so neighbor reads see the previous iteration. In in-place mode they
    alias the live columns. Agents always read and write their own state
    through the live columns.
    """

    def __init__(self, store: AgentStore, pool: WorkerPool, mode: str = COPY, row_wise: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.store = store
        self.pool = pool
        self.mode = mode
        self.row_wise = row_wise
        self.iteration = 0
        self.nb: dict[str, np.ndarray] = {}
        self.reset(0)

    # -- iteration lifecycle -------------------------------------------
    def reset(self, iteration: int) -> None:
        self.iteration = iteration
        w = self.pool.workers
        self.pending_additions: list[list[AgentRecord]] = [[] for _ in range(w)]
        self.pending_removals: list[list[LocalAgentId]] = [[] for _ in range(w)]
        self._scheduled: list[set[int]] = [set() for _ in range(w)]
        n = self.store.count
        # flag buffers written by the compiled kernels
        self.remove_flag = np.zeros(n, dtype=np.uint8)
        self.divide_flag = np.zeros(n, dtype=np.uint8)
        self.daughter_position = np.zeros((n, 3))
        self.daughter_diameter = np.zeros(n)
        self.block_owner = np.zeros(0, dtype=np.int64)
        self._scratch: dict[str, np.ndarray] = {}

    def scratch(self, name: str, dtype=np.float64, fill=0) -> np.ndarray:
        """Per-iteration array of ``count`` entries, created on first request.

        Callers must request it before blocks run in parallel.
        """
        arr = self._scratch.get(name)
        if arr is None:
            arr = self._scratch[name] = np.full(self.store.count, fill, dtype=dtype)
        return arr

    def snapshot(self) -> None:
        s = self.store
        total = s.total
        for name in NEIGHBOR_COLUMNS:
            col = s.column(name)
            self.nb[name] = col[:total].copy() if self.mode == COPY else col[:total]

    def nb_column(self, name: str) -> np.ndarray:
        return self.nb[name]

    # -- scheduling ----------------------------------------------------
    def schedule_removal(self, lid: LocalAgentId, worker: int | None = None) -> None:
        worker = self.pool.worker_id if worker is None else worker
        index = self.store.resolve(lid)
        if index in self._scheduled[worker]:
            raise RemovalConflictError(f"{lid} already scheduled by worker {worker}")
        self._scheduled[worker].add(index)
        self.pending_removals[worker].append(lid)

    def schedule_addition(self, record: AgentRecord, worker: int | None = None) -> None:
        worker = self.pool.worker_id if worker is None else worker
        self.pending_additions[worker].append(record)

    def run_blocks(self, n: int, fn) -> None:
        self.block_owner = self.pool.parallel_for(n, fn)

    def worker_of(self, indices: np.ndarray) -> np.ndarray:
        """Worker that processed each agent index in the last parallel phase."""
        if self.block_owner.size == 0:
            return np.zeros(len(indices), dtype=np.int64)
        return self.block_owner[np.asarray(indices) // self.pool.block_size]

    def flagged_removals(self) -> list[np.ndarray]:
        idx = np.flatnonzero(self.remove_flag[: self.store.count])
        return self.split_by_worker(idx)

    def split_by_worker(self, idx: np.ndarray) -> list[np.ndarray]:
        owner = self.worker_of(idx)
        return [idx[owner == w] for w in range(self.pool.workers)]
