"""Shared preset plumbing: the preset interface and compiled-kernel operations."""

from __future__ import annotations

import dataclasses

import numpy as np

from ..engine.simulation import AGENT, Operation, OperationDescriptor, Population, StandaloneOperation, POST
from ..physics import BoundaryCondition, ForceParams


class ModelPreset:
    name = "base"
    channels: tuple[str, ...] = ()
    # positions are uniform in the space cube, so ranks may draw their own share
    uniform_init = False

    def __init__(self, params=None, **overrides):
        if params is None:
            params = self.default_params()
        if overrides:
            params = dataclasses.replace(params, **overrides)
        self.params = params

    # overridables ---------------------------------------------------------
    @classmethod
    def default_params(cls):
        return None

    @property
    def interaction_length(self) -> float:
        return 1.0

    @property
    def aura_margin(self) -> float:
        """Bound on how far an agent moves itself before its own neighbor queries."""
        return 0.0

    @property
    def boundary(self) -> BoundaryCondition:
        return BoundaryCondition("open")

    @property
    def force(self) -> ForceParams | None:
        return None

    @property
    def space(self) -> tuple[float, float]:
        """Initial simulation cube used for space partitioning."""
        bc = self.boundary
        return (bc.lower, bc.upper)

    def create_substances(self, backend) -> dict:
        return {}

    def initial_population(self, seed: int) -> Population:
        return Population.empty()

    def operations(self, config) -> list[Operation]:
        return []

    def observe(self, view, env) -> dict[str, float]:
        return {}

    def uniform_positions(self, seed: int, keys: np.ndarray, lower, upper) -> np.ndarray:
        from ..rng import INIT_ITERATION, STREAM_INIT

        return uniform_in_box(seed, keys, np.asarray(lower), np.asarray(upper), STREAM_INIT, INIT_ITERATION)

    # helpers ----------------------------------------------------------------
    def mechanics_args(self):
        f = self.force or ForceParams()
        bc = self.boundary
        return (f.k, f.gamma, f.dt_mech, f.max_displacement, f.force_threshold, bc.code, bc.lower, bc.upper)


class EmptyModel(ModelPreset):
    name = "empty"
    channels = ("agents",)

    def observe(self, view, env):
        return {"agents": float(len(view))}


class KernelOperation(Operation):
    """A fused per-preset agent kernel.

    ``kernel(engine, ctx, lo, hi, buf)`` runs every behavior of the preset
    for agents ``[lo, hi)``: column-wise (all behaviors of one agent, then the
    next agent) unless ``ctx.row_wise`` is set. ``buf`` is a neighbor scratch
    buffer sized to the number of visible agents, so queries cannot overflow.
    """

    def __init__(self, tag: str, kernel, frequency: int = 1, prepare=None, finish=None):
        super().__init__(OperationDescriptor(tag, AGENT, frequency))
        self.kernel = kernel
        self._prepare = prepare
        self._finish = finish

    def prepare(self, engine, ctx):
        if self._prepare is not None:
            self._prepare(engine, ctx)

    def finish(self, engine, ctx):
        if self._finish is not None:
            self._finish(engine, ctx)

    def run_block(self, engine, ctx, lo, hi):
        buf = np.empty(max(engine.store.total, 1), dtype=np.int64)
        r = self.kernel(engine, ctx, lo, hi, buf)
        if r is not None and r >= 0:
            raise RuntimeError(f"neighbor buffer overflow at agent {r}")


def environment_step(driver, iteration):
    """Merge this iteration's secretions, then advance every substance one step."""
    driver.env.merge_secretions()
    for grid in driver.env.substances.values():
        grid.step(driver.pool)


def diffusion_operation(frequency: int = 1) -> StandaloneOperation:
    return StandaloneOperation("diffusion", environment_step, POST, frequency)


def uniform_in_box(seed, keys, lower, upper, stream, iteration):
    from ..rng import uniform_np

    u = np.stack([uniform_np(seed, keys, iteration, stream, k) for k in range(3)], axis=1)
    return lower + (upper - lower) * u


def uniform_in_sphere(seed, keys, center, radius, stream, iteration):
    """Points uniform in a ball, by direction plus cube-root radius."""
    from ..rng import uniform_np, unit_vector_np

    d = unit_vector_np(seed, keys, iteration, stream)
    r = radius * np.cbrt(uniform_np(seed, keys, iteration, stream, 2))
    return np.asarray(center) + d * r[:, None]
