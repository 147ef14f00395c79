"""Agent-based SIR epidemic: infection, recovery and random movement on a torus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rng
from .._jit import njit
from ..engine import registry
from ..engine.simulation import Population
from ..engine.store import BehaviorInstance, behavior_mask
from ..physics import BoundaryCondition, apply_boundary, wrap_nb
from ..spatial.grid import gather_neighbors
from .base import KernelOperation, ModelPreset, uniform_in_box
from ..physics import _pairs_for

SUSCEPTIBLE, INFECTED, RECOVERED = 0, 1, 2


@dataclass(frozen=True)
class SirParams:
    infection_radius: float = 3.24179
    infection_probability: float = 0.28510
    recovery_probability: float = 0.00521
    max_movement: float = 5.78594
    space_length: float = 100.0
    n_susceptible: int = 2000
    n_infected: int = 20
    steps: int = 1000
    beta: float = 0.06719
    gamma: float = 0.00521
    person_diameter: float = 1.0

    def __post_init__(self):
        for p in (self.infection_probability, self.recovery_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if not (self.infection_radius > 0 and self.max_movement >= 0 and self.space_length > 0):
            raise ValueError("radius and space must be positive, movement nonnegative")

    @property
    def population(self) -> int:
        return self.n_susceptible + self.n_infected

    @property
    def r0(self) -> float:
        return self.beta / self.gamma


MEASLES = SirParams()
INFLUENZA = SirParams(
    infection_radius=3.2123,
    infection_probability=0.04980,
    recovery_probability=0.01016,
    max_movement=4.2942,
    space_length=215.0,
    n_susceptible=20000,
    n_infected=200,
    steps=2500,
    beta=0.01321,
    gamma=0.01016,
)


@njit(inline="always")
def infect_nb(i, state, pos, keys, nb_state, nb_pos, radius2, p_inf, seed, iteration,
              origin, box_length, dims, stamp, box_ts, box_head, successor, buf):
    if state[i] != 0:
        return
    if not rng.uniform_nb(seed, keys[i], iteration, 2, 0) < p_inf:
        return
    cnt = gather_neighbors(i, pos[i, 0], pos[i, 1], pos[i, 2], radius2, nb_pos, origin, box_length, dims,
                           stamp, box_ts, box_head, successor, buf)
    for t in range(cnt):
        if nb_state[buf[t]] == 1:
            state[i] = 1
            return


@njit(inline="always")
def recover_nb(i, state, keys, p_rec, seed, iteration):
    if state[i] == 1 and rng.uniform_nb(seed, keys[i], iteration, 3, 0) < p_rec:
        state[i] = 2


@njit(inline="always")
def move_nb(i, pos, keys, speed, lo, hi, seed, iteration):
    vx = 2.0 * rng.uniform_nb(seed, keys[i], iteration, 4, 0) - 1.0
    vy = 2.0 * rng.uniform_nb(seed, keys[i], iteration, 4, 1) - 1.0
    vz = 2.0 * rng.uniform_nb(seed, keys[i], iteration, 4, 2) - 1.0
    norm = np.sqrt(vx * vx + vy * vy + vz * vz)
    if norm == 0.0 or speed == 0.0:
        return
    pos[i, 0] = wrap_nb(pos[i, 0] + vx / norm * speed, lo, hi)
    pos[i, 1] = wrap_nb(pos[i, 1] + vy / norm * speed, lo, hi)
    pos[i, 2] = wrap_nb(pos[i, 2] + vz / norm * speed, lo, hi)


@njit
def sir_block_nb(lo, hi, row_wise, mask, bits, state, pos, keys, nb_state, nb_pos, radius2, p_inf, p_rec,
                 speed, space_lo, space_hi, seed, iteration,
                 origin, box_length, dims, stamp, box_ts, box_head, successor, buf):
    b_inf, b_rec, b_move = bits[0], bits[1], bits[2]
    if row_wise:
        for i in range(lo, hi):
            if mask[i] & b_inf:
                infect_nb(i, state, pos, keys, nb_state, nb_pos, radius2, p_inf, seed, iteration,
                          origin, box_length, dims, stamp, box_ts, box_head, successor, buf)
        for i in range(lo, hi):
            if mask[i] & b_rec:
                recover_nb(i, state, keys, p_rec, seed, iteration)
        for i in range(lo, hi):
            if mask[i] & b_move:
                move_nb(i, pos, keys, speed, space_lo, space_hi, seed, iteration)
        return
    for i in range(lo, hi):
        if mask[i] & b_inf:
            infect_nb(i, state, pos, keys, nb_state, nb_pos, radius2, p_inf, seed, iteration,
                      origin, box_length, dims, stamp, box_ts, box_head, successor, buf)
        if mask[i] & b_rec:
            recover_nb(i, state, keys, p_rec, seed, iteration)
        if mask[i] & b_move:
            move_nb(i, pos, keys, speed, space_lo, space_hi, seed, iteration)


def sir_block_np(lo, hi, mask, bits, state, pos, keys, nb_state, nb_pos, n_total, radius, p_inf, p_rec,
                 speed, bc, seed, iteration):
    """Vectorized twin of :func:`sir_block_nb` with copy-mode semantics."""
    sl = slice(lo, hi)
    k = keys[sl]
    m = mask[sl]
    idx = np.arange(lo, hi)
    cand = (m & bits[0] != 0) & (state[sl] == SUSCEPTIBLE)
    cand &= rng.uniform_np(seed, k, iteration, rng.STREAM_INFECTION, 0) < p_inf
    ci = idx[cand]
    if ci.size:
        indptr, cols = _pairs_for(pos[ci], nb_pos, n_total, radius, keys, ci)
        rows = np.repeat(np.arange(ci.size), np.diff(indptr))
        hit = np.zeros(ci.size, dtype=bool)
        hit[rows[nb_state[cols] == INFECTED]] = True
        state[ci[hit]] = INFECTED
    rec = (m & bits[1] != 0) & (state[sl] == INFECTED)
    rec &= rng.uniform_np(seed, k, iteration, rng.STREAM_RECOVERY, 0) < p_rec
    state[idx[rec]] = RECOVERED
    mv = (m & bits[2]) != 0
    if speed != 0.0 and mv.any():
        v = np.stack([2.0 * rng.uniform_np(seed, k, iteration, rng.STREAM_MOVEMENT, o) - 1.0 for o in range(3)], axis=1)
        norm = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2])
        mv &= norm != 0.0
        step = v[mv] / norm[mv][:, None] * speed
        pos[idx[mv]] = apply_boundary(pos[idx[mv]] + step, bc)


class SirModel(ModelPreset):
    name = "sir"
    uniform_init = True
    channels = ("susceptible", "infected", "recovered")

    @classmethod
    def default_params(cls):
        return MEASLES

    @property
    def interaction_length(self):
        return self.params.infection_radius

    @property
    def boundary(self):
        return BoundaryCondition("toroidal", 0.0, self.params.space_length)

    def behaviors(self) -> tuple:
        p = self.params
        return (
            BehaviorInstance(registry.INFECTION.tag, (p.infection_probability, p.infection_radius)),
            BehaviorInstance(registry.RECOVERY.tag, (p.recovery_probability,)),
            BehaviorInstance(registry.RANDOM_MOVEMENT.tag, (p.max_movement,)),
        )

    def initial_population(self, seed):
        p = self.params
        n = p.population
        keys = np.arange(n, dtype=np.uint64)
        pos = uniform_in_box(seed, keys, 0.0, p.space_length, rng.STREAM_INIT, rng.INIT_ITERATION)
        pos = apply_boundary(pos, self.boundary)
        state = np.full(n, SUSCEPTIBLE, dtype=np.int32)
        state[p.n_susceptible :] = INFECTED
        beh = self.behaviors()
        cols = {
            "position": pos,
            "diameter": np.full(n, p.person_diameter),
            "kind": np.full(n, registry.PERSON.tag, dtype=np.int32),
            "state": state,
            "rng_key": keys,
            "behavior_mask": np.full(n, behavior_mask(beh), dtype=np.uint32),
        }
        return Population(cols, [beh] * n)

    def operations(self, config):
        p = self.params
        bits = np.array([1 << registry.INFECTION.bit, 1 << registry.RECOVERY.bit, 1 << registry.RANDOM_MOVEMENT.bit],
                        dtype=np.uint32)
        seed = np.uint64(config.seed)
        bc = self.boundary

        def kernel(engine, ctx, lo, hi, buf):
            s = engine.store
            it = np.uint64(ctx.iteration)
            if engine.backend == "numba":
                sir_block_nb(lo, hi, ctx.row_wise, s.behavior_mask, bits, s.state, s.position, s.rng_key,
                             ctx.nb["state"], ctx.nb["position"], p.infection_radius**2, p.infection_probability,
                             p.recovery_probability, p.max_movement, bc.lower, bc.upper, seed, it,
                             *engine.grid_args(), buf)
            else:
                sir_block_np(lo, hi, s.behavior_mask, bits, s.state, s.position, s.rng_key, ctx.nb["state"],
                             ctx.nb["position"], s.total, p.infection_radius, p.infection_probability,
                             p.recovery_probability, p.max_movement, bc, seed, it)

        return [KernelOperation("sir_behaviors", kernel)]

    def observe(self, view, env):
        st = view.column("state")
        return {
            "susceptible": float(np.count_nonzero(st == SUSCEPTIBLE)),
            "infected": float(np.count_nonzero(st == INFECTED)),
            "recovered": float(np.count_nonzero(st == RECOVERED)),
        }
