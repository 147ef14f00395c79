"""Operations, the per-rank engine and the iteration driver.

One iteration runs these phases on every rank, with the driver acting as the
barrier between them:

1. prepare: rebuild the neighbor grid over local agents, optionally sort them
   in Morton order;
2. aura exchange (multi-rank only): border agents arrive as read-only ghosts;
3. finish: insert ghosts into the grid, update static flags, snapshot
   neighbor-visible columns;
4. standalone-pre operations;
5. agent operations over all live agents, block parallel;
6. commit: drop ghosts, apply removals, then additions;
7. standalone-post operations (secretion merge, diffusion);
8. migration (multi-rank only), then observation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .. import rng
from .._jit import resolve
from ..analysis import TimeSeries
from ..physics import static_update_nb, static_update_np
from ..spatial.grid import UniformGrid, sort_and_balance
from .context import COPY, ExecutionContext, WorkerPool
from .store import DISTURB_NEIGHBORS, NO_GID, AgentStore, behavior_mask

AGENT = "agent"
PRE = "standalone-pre"
POST = "standalone-post"

TIMING_CATEGORIES = ("agent_ops", "environment", "sorting", "exchange", "setup_teardown")


class AgentFault(RuntimeError):
    def __init__(self, message, local_id=None, global_id=None, rng_key=None):
        super().__init__(f"{message} (agent local={local_id} global={global_id} key={rng_key})")
        self.local_id = local_id
        self.global_id = global_id
        self.rng_key = rng_key


@dataclass(frozen=True)
class OperationDescriptor:
    op_tag: str
    kind: str = AGENT
    frequency: int = 1

    def __post_init__(self):
        if self.kind not in (AGENT, PRE, POST):
            raise ValueError(f"unknown operation kind {self.kind!r}")
        if self.frequency < 1:
            raise ValueError("frequency must be >= 1")

    def due(self, iteration: int) -> bool:
        return iteration % self.frequency == 0


class Operation:
    """Agent operations implement ``run_block``; standalone ones ``run``."""

    def __init__(self, descriptor: OperationDescriptor):
        self.descriptor = descriptor

    def run_block(self, engine: "RankEngine", ctx: ExecutionContext, lo: int, hi: int) -> None:
        raise NotImplementedError

    def run(self, driver: "Driver", iteration: int) -> None:
        raise NotImplementedError

    def prepare(self, engine: "RankEngine", ctx: ExecutionContext) -> None:
        """Called once before the blocks of a due agent operation."""

    def finish(self, engine: "RankEngine", ctx: ExecutionContext) -> None:
        """Called once after every block of a due agent operation has run."""


class AgentOperation(Operation):
    """Per-agent Python callable ``fn(engine, ctx, index)``."""

    def __init__(self, tag: str, fn: Callable, frequency: int = 1):
        super().__init__(OperationDescriptor(tag, AGENT, frequency))
        self.fn = fn

    def run_agent(self, engine, ctx, i):
        self.fn(engine, ctx, i)

    def run_block(self, engine, ctx, lo, hi):
        for i in range(lo, hi):
            engine.guard(self.fn, ctx, i)


class StandaloneOperation(Operation):
    def __init__(self, tag: str, fn: Callable, kind: str = POST, frequency: int = 1):
        super().__init__(OperationDescriptor(tag, kind, frequency))
        self.fn = fn

    def run(self, driver, iteration):
        self.fn(driver, iteration)


@dataclass
class SimConfig:
    seed: int = 1
    workers: int = 1
    mode: str = COPY
    row_wise: bool = False
    sort_frequency: int = 0
    detect_static: bool = False
    backend: str | None = None
    block_size: int = 256
    ranks: int = 1
    partition_factor: int = 1
    rank_grid: tuple[int, int, int] | None = None
    delta: bool = True
    compress: bool = True
    ref_update: int = 10
    init_mode: str = "filtered"

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass
class Population:
    """Column arrays for a batch of agents plus their behavior tuples."""

    columns: dict[str, np.ndarray]
    behaviors: list[tuple]

    def __len__(self):
        return len(self.behaviors)

    def subset(self, mask: np.ndarray) -> "Population":
        idx = np.flatnonzero(mask)
        return Population({k: v[idx] for k, v in self.columns.items()}, [self.behaviors[i] for i in idx])

    @classmethod
    def empty(cls) -> "Population":
        return cls({"position": np.zeros((0, 3))}, [])


class Environment:
    """Substances shared by all ranks plus the pending secretion reduction."""

    def __init__(self, substances: dict | None = None):
        self.substances = dict(substances or {})
        self._secretions: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []

    def record_secretion(self, keys, substance, flat, amount) -> None:
        if len(keys):
            self._secretions.append((keys, substance, flat, amount))

    def merge_secretions(self) -> None:
        """Apply all recorded secretions in agent-key order."""
        if not self._secretions:
            return
        keys, sub, flat, amt = (np.concatenate(c) for c in zip(*self._secretions))
        self._secretions.clear()
        order = np.argsort(keys, kind="stable")
        sub, flat, amt = sub[order], flat[order], amt[order]
        names = list(self.substances)
        for s in np.unique(sub):
            m = sub == s
            self.substances[names[int(s)]].add_at_flat(flat[m], amt[m])


class RankEngine:
    def __init__(self, model, config: SimConfig, rank: int, pool: WorkerPool, environment: Environment):
        self.model = model
        self.config = config
        self.rank = rank
        self.pool = pool
        self.env = environment
        self.backend = resolve(config.backend)
        self.store = AgentStore()
        self.store.rank = rank
        self.grid = UniformGrid(self.backend)
        self.ctx = ExecutionContext(self.store, pool, config.mode, config.row_wise)
        self.tombstones = np.zeros((0, 3))
        self.partition = None
        self.iteration = 0
        self.agent_ops: list[Operation] = []
        self.op_calls: dict[str, int] = {}
        self._behavior_split_cache: dict = {}

    # -- population ------------------------------------------------------
    def load(self, pop: Population) -> None:
        cols = dict(pop.columns)
        n = len(pop)
        cols.setdefault("disturbed", np.full(n, DISTURB_NEIGHBORS, dtype=np.uint8))
        if "behavior_mask" not in cols:
            cols["behavior_mask"] = np.array([behavior_mask(b) for b in pop.behaviors], dtype=np.uint32)
        self.store.append_columns(cols, pop.behaviors)

    def guard(self, fn, ctx, i):
        try:
            fn(self, ctx, i)
        except AgentFault:
            raise
        except Exception as exc:
            s = self.store
            raise AgentFault(f"{type(exc).__name__}: {exc}", s.id_of(i), s.global_id(i), int(s.rng_key[i])) from exc

    # -- phases ----------------------------------------------------------
    def prepare(self, iteration: int, timings: dict) -> None:
        self.iteration = iteration
        s = self.store
        t0 = time.perf_counter()
        self.grid.build(s.position, s.count, self.model.interaction_length)
        t1 = time.perf_counter()
        f = self.config.sort_frequency
        if f and iteration % f == 0 and s.count:
            sort_and_balance(s, self.grid, self.pool.workers)
        t2 = time.perf_counter()
        timings["setup_teardown"] += t1 - t0
        timings["sorting"] += t2 - t1

    def finish_prepare(self, iteration: int, timings: dict) -> None:
        t0 = time.perf_counter()
        s = self.store
        self.grid.insert(s.count, s.total, s.position)
        n = s.count
        if self.config.detect_static:
            self._update_static(n)
        else:
            s.static[:n] = 0
        s.disturbed[:n] = 0
        self.tombstones = np.zeros((0, 3))
        self.ctx.reset(iteration)
        self.ctx.snapshot()
        timings["setup_teardown"] += time.perf_counter() - t0

    def _update_static(self, n):
        s = self.store
        radius = self.grid.box_length
        if self.backend == "numba":
            g = self.grid
            buf = np.empty(256, dtype=np.int64)
            while True:
                r = static_update_nb(n, s.static, s.nonzero_forces, s.disturbed, s.position, self.tombstones,
                                     len(self.tombstones), radius, g.origin, g.box_length, g.dims,
                                     g.current_stamp, g.box_timestamp, g.box_head, g.successor, buf)
                if r < 0:
                    break
                buf = np.empty(2 * buf.size, dtype=np.int64)
        else:
            static_update_np(n, s.total, s.static, s.nonzero_forces, s.disturbed, s.position, self.tombstones, radius)

    def run_agent_ops(self, iteration: int, timings: dict) -> None:
        t0 = time.perf_counter()
        due = [op for op in self.agent_ops if op.descriptor.due(iteration)]
        n = self.store.count
        for op in due:
            self.op_calls[op.descriptor.op_tag] = self.op_calls.get(op.descriptor.op_tag, 0) + 1
        if due and n:
            ctx = self.ctx
            for op in due:
                op.prepare(self, ctx)
            if ctx.row_wise:
                for op in due:
                    ctx.run_blocks(n, lambda lo, hi, w, op=op: op.run_block(self, ctx, lo, hi))
            elif all(isinstance(op, AgentOperation) for op in due) and len(due) > 1:
                def column(lo, hi, w):
                    for i in range(lo, hi):
                        for op in due:
                            self.guard(op.fn, ctx, i)
                ctx.run_blocks(n, column)
            else:
                def blockwise(lo, hi, w):
                    for op in due:
                        op.run_block(self, ctx, lo, hi)
                ctx.run_blocks(n, blockwise)
            for op in due:
                op.finish(self, ctx)
            pos = self.store.position[:n]
            if not np.isfinite(pos).all():
                i = int(np.flatnonzero(~np.isfinite(pos).all(axis=1))[0])
                s = self.store
                raise AgentFault("non-finite position", s.id_of(i), s.global_id(i), int(s.rng_key[i]))
        timings["agent_ops"] += time.perf_counter() - t0

    def commit(self, iteration: int, timings: dict) -> None:
        t0 = time.perf_counter()
        s, ctx = self.store, self.ctx
        s.clear_ghosts()
        n = s.count
        daughters = self._collect_daughters(n, iteration)
        removal_lists = ctx.flagged_removals()
        for w, lids in enumerate(ctx.pending_removals):
            if lids:
                extra = np.array([s.resolve(l) for l in lids], dtype=np.int64)
                removal_lists[w] = np.concatenate([removal_lists[w], extra])
        gone = np.concatenate(removal_lists) if removal_lists else np.zeros(0, dtype=np.int64)
        if gone.size:
            self.tombstones = s.position[gone].copy()
            s.commit_removals(removal_lists, self.pool.workers)
        if daughters is not None:
            self.load(daughters)
        pending = [p for p in ctx.pending_additions if p]
        if pending:
            s.commit_additions(pending)
        timings["setup_teardown"] += time.perf_counter() - t0

    def _collect_daughters(self, n, iteration) -> Population | None:
        ctx, s = self.ctx, self.store
        idx = np.flatnonzero(ctx.divide_flag[:n])
        if idx.size == 0:
            return None
        keys = rng.derive_key(s.rng_key[idx], iteration)
        behaviors = []
        for i in idx:
            mother, daughter = self._split_behaviors(s.behaviors[i])
            if mother != s.behaviors[i]:
                s.behaviors[i] = mother
                s.behavior_mask[i] = behavior_mask(mother)
            behaviors.append(daughter)
        cols = {
            "position": ctx.daughter_position[idx].copy(),
            "diameter": ctx.daughter_diameter[idx].copy(),
            "kind": s.kind[idx].copy(),
            "state": s.state[idx].copy(),
            "age": np.zeros(idx.size, dtype=np.int32),
            "rng_key": keys,
        }
        return Population(cols, behaviors)

    def _split_behaviors(self, behaviors):
        key = behaviors
        hit = self._behavior_split_cache.get(key)
        if hit is None:
            mother = tuple(b for b in behaviors if not b.remove_on_division)
            daughter = tuple(b for b in behaviors if b.copy_on_division)
            hit = self._behavior_split_cache[key] = (mother, daughter)
        return hit

    # -- helpers for kernels ---------------------------------------------
    def grid_args(self):
        g = self.grid
        return g.origin, g.box_length, g.dims, g.current_stamp, g.box_timestamp, g.box_head, g.successor

    def local_columns(self, names) -> dict[str, np.ndarray]:
        n = self.store.count
        return {k: self.store.column(k)[:n] for k in names}


@dataclass
class SimulationReport:
    iterations: int
    series: TimeSeries
    timings: dict[str, list[float]] = field(default_factory=dict)
    agent_counts: list[int] = field(default_factory=list)
    iteration_seconds: list[float] = field(default_factory=list)
    exchange_stats: dict = field(default_factory=dict)
    op_calls: dict = field(default_factory=dict)

    def timing_summary(self) -> dict[str, float]:
        return {k: float(np.sum(v)) for k, v in self.timings.items()}


class PopulationView:
    """Read access to all live agents across ranks, sorted by agent key."""

    def __init__(self, engines, iteration: int = 0):
        self._engines = engines
        self.iteration = iteration
        self._order = None

    def _gather(self, name):
        parts = [e.store.column(name)[: e.store.count] for e in self._engines]
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def order(self):
        if self._order is None:
            self._order = np.argsort(self._gather("rng_key"), kind="stable")
        return self._order

    def column(self, name: str) -> np.ndarray:
        return self._gather(name)[self.order]

    def __len__(self):
        return sum(e.store.count for e in self._engines)


class Driver:
    def __init__(self, model, config: SimConfig | None = None):
        self.model = model
        self.config = config or SimConfig()
        cfg = self.config
        if cfg.ranks < 1:
            raise ValueError("ranks must be >= 1")
        self.pool = WorkerPool(cfg.workers, cfg.block_size)
        self.env = Environment(model.create_substances(resolve(cfg.backend)))
        self.engines = [RankEngine(model, cfg, r, self.pool, self.env) for r in range(cfg.ranks)]
        ops = model.operations(cfg)
        self.pre_ops = [op for op in ops if op.descriptor.kind == PRE]
        self.post_ops = [op for op in ops if op.descriptor.kind == POST]
        for e in self.engines:
            e.agent_ops = [op for op in ops if op.descriptor.kind == AGENT]
        self.exchanger = None
        if cfg.ranks > 1:
            from ..exchange.distributed import Exchanger

            self.exchanger = Exchanger(model, cfg, self.engines)
        self.series = TimeSeries()
        self.timings = {k: [] for k in TIMING_CATEGORIES}
        self.iteration_seconds: list[float] = []
        self.agent_counts: list[int] = []
        self.op_calls: dict[str, int] = {}
        self.iteration = 0
        try:
            pop = model.initial_population(cfg.seed)
        except Exception as exc:
            raise RuntimeError(f"model initialization failed: {exc}") from exc
        if self.exchanger is None:
            self.engines[0].load(pop)
        else:
            self.exchanger.distribute(pop)
        self.observe(0)

    @property
    def view(self) -> PopulationView:
        return PopulationView(self.engines, self.iteration)

    @property
    def agent_count(self) -> int:
        return sum(e.store.count for e in self.engines)

    def observe(self, iteration: int) -> None:
        self.agent_counts.append(self.agent_count)
        for name, value in self.model.observe(self.view, self.env).items():
            self.series.add(name, iteration, value)

    def step(self) -> None:
        it = self.iteration
        t = {k: 0.0 for k in TIMING_CATEGORIES}
        start = time.perf_counter()
        for e in self.engines:
            e.prepare(it, t)
        if self.exchanger is not None:
            t0 = time.perf_counter()
            self.exchanger.aura(it)
            t["exchange"] += time.perf_counter() - t0
        for e in self.engines:
            e.finish_prepare(it, t)
        t0 = time.perf_counter()
        for op in self.pre_ops:
            if op.descriptor.due(it):
                self._count(op)
                op.run(self, it)
        t["environment"] += time.perf_counter() - t0
        for e in self.engines:
            e.run_agent_ops(it, t)
        for e in self.engines:
            e.commit(it, t)
        t0 = time.perf_counter()
        for op in self.post_ops:
            if op.descriptor.due(it):
                self._count(op)
                op.run(self, it)
        t["environment"] += time.perf_counter() - t0
        if self.exchanger is not None:
            t0 = time.perf_counter()
            self.exchanger.migrate(it)
            t["exchange"] += time.perf_counter() - t0
        self.iteration += 1
        for k, v in t.items():
            self.timings[k].append(v)
        self.iteration_seconds.append(time.perf_counter() - start)
        self.observe(self.iteration)

    def _count(self, op):
        tag = op.descriptor.op_tag
        self.op_calls[tag] = self.op_calls.get(tag, 0) + 1

    def run(self, iterations: int) -> SimulationReport:
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        for _ in range(iterations):
            self.step()
        return self.report()

    def report(self) -> SimulationReport:
        calls = dict(self.op_calls)
        for e in self.engines[:1]:
            calls.update(e.op_calls)
        stats = self.exchanger.stats() if self.exchanger is not None else {}
        return SimulationReport(self.iteration, self.series, self.timings, self.agent_counts,
                                self.iteration_seconds, stats, calls)

    def close(self):
        self.pool.close()


def simulate(model, iterations: int, config: SimConfig | None = None, **overrides) -> SimulationReport:
    config = (config or SimConfig()).with_(**overrides) if overrides else (config or SimConfig())
    driver = Driver(model, config)
    try:
        return driver.run(iterations)
    finally:
        driver.close()


def global_ids_assigned(driver: Driver) -> int:
    return int(sum(np.count_nonzero(e.store.gid_rank[: e.store.count] != NO_GID) for e in driver.engines))
