"""Cell presets with mechanics: proliferation (grow and divide) and tumor spheroid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import rng
from .._jit import njit
from ..engine import registry
from ..engine.division import cube_root_np, divide_nb
from ..engine.simulation import Population
from ..engine.store import DISTURB_NEIGHBORS, BehaviorInstance, behavior_mask
from ..physics import BoundaryCondition, ForceParams, apply_boundary, mechanics_agent_nb, mechanics_np
from .base import KernelOperation, ModelPreset, uniform_in_sphere


@njit(inline="always")
def grow_nb(i, diam, static, disturbed, growth):
    d = diam[i]
    v = np.pi / 6.0 * (d * d * d) + growth
    diam[i] = (6.0 * v / np.pi) ** (1.0 / 3.0)
    static[i] = 0
    disturbed[i] |= 1


def grow_np(idx, diam, static, disturbed, growth):
    d = diam[idx]
    v = np.pi / 6.0 * (d * d * d) + growth
    diam[idx] = cube_root_np(6.0 * v / np.pi)
    static[idx] = 0
    disturbed[idx] |= DISTURB_NEIGHBORS


def divide_np(idx, ratio, pos, diam, keys, seed, iteration, bc, out_pos, out_diam):
    """Vectorized twin of :func:`divide_nb` for the agents in ``idx``."""
    d = diam[idx]
    v = np.pi / 6.0 * d * d * d
    vd = v * ratio
    vm = v - vd
    dm = cube_root_np(6.0 * vm / np.pi)
    dd = cube_root_np(6.0 * vd / np.pi)
    u = rng.unit_vector_np(seed, keys[idx], iteration, rng.STREAM_DIVISION_AXIS)
    sep = 0.5 * (dm + dd)
    v = vm + vd
    sm = -sep * vd / v
    sd = sep * vm / v
    p = pos[idx]
    out_pos[idx] = apply_boundary(p + sd[:, None] * u, bc)
    out_diam[idx] = dd
    pos[idx] = apply_boundary(p + sm[:, None] * u, bc)
    diam[idx] = dm


# -- proliferation ---------------------------------------------------------


@dataclass(frozen=True)
class ProliferationParams:
    cells_per_dim: int = 3
    spacing: float = 12.0
    initial_diameter: float = 10.0
    target_diameter: float = 10.0 * 2.0 ** (1.0 / 3.0)
    growth_speed: float = 50.0
    division_probability: float = 1.0
    volume_ratio: float = 0.5
    copy_on_division: bool = False
    remove_on_division: bool = True
    mechanics: bool = True
    dt_mech: float = 0.25
    force_threshold: float = 0.05
    max_displacement: float = 3.0

    def __post_init__(self):
        if self.cells_per_dim < 1:
            raise ValueError("cells_per_dim must be >= 1")
        if not self.growth_speed > 0:
            raise ValueError("growth_speed must be positive")


@njit
def grow_divide_block_nb(lo, hi, row_wise, mask, bit, pos, diam, keys, static, nonzero, disturbed,
                         divide_flag, d_pos, d_diam, nb_pos, nb_diam, target, growth, p_div, ratio,
                         mech, k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi, seed, iteration,
                         origin, box_length, dims, stamp, box_ts, box_head, successor, buf):
    for i in range(lo, hi):
        if mask[i] & bit:
            if diam[i] < target:
                grow_nb(i, diam, static, disturbed, growth)
            elif p_div >= 1.0 or rng.uniform_nb(seed, keys[i], iteration, 7, 0) < p_div:
                divide_nb(i, ratio, pos, diam, keys, seed, iteration, bc_mode, bc_lo, bc_hi, d_pos, d_diam)
                divide_flag[i] = 1
                static[i] = 0
                disturbed[i] |= 1
        if mech and not row_wise:
            if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                      origin, box_length, dims, stamp, box_ts, box_head, successor,
                                      k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                      seed, iteration, buf):
                return i
    if mech and row_wise:
        for i in range(lo, hi):
            if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                      origin, box_length, dims, stamp, box_ts, box_head, successor,
                                      k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                      seed, iteration, buf):
                return i
    return -1


class ProliferationModel(ModelPreset):
    name = "proliferation"
    channels = ("agents",)

    @classmethod
    def default_params(cls):
        return ProliferationParams()

    @property
    def max_diameter(self) -> float:
        p = self.params
        v = math.pi / 6.0 * max(p.target_diameter, p.initial_diameter) ** 3 + p.growth_speed
        return (6.0 * v / math.pi) ** (1.0 / 3.0)

    @property
    def interaction_length(self):
        return self.max_diameter

    @property
    def aura_margin(self):
        # division shifts the mother by at most the larger volume share of the daughters' separation
        r = self.params.volume_ratio
        return self.max_diameter * max(r, 1.0 - r)

    @property
    def force(self):
        p = self.params
        return ForceParams(max_displacement=p.max_displacement, force_threshold=p.force_threshold, dt_mech=p.dt_mech)

    @property
    def space(self):
        p = self.params
        return (-p.spacing, p.cells_per_dim * p.spacing)

    def behaviors(self):
        p = self.params
        return (BehaviorInstance(registry.GROW_DIVIDE.tag, (p.target_diameter, p.growth_speed),
                                 copy_on_division=p.copy_on_division, remove_on_division=p.remove_on_division),)

    def initial_population(self, seed):
        p = self.params
        c = np.arange(p.cells_per_dim) * p.spacing
        z, y, x = np.meshgrid(c, c, c, indexing="ij")
        pos = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
        n = len(pos)
        beh = self.behaviors()
        cols = {
            "position": pos,
            "diameter": np.full(n, p.initial_diameter),
            "kind": np.full(n, registry.CELL.tag, dtype=np.int32),
            "rng_key": np.arange(n, dtype=np.uint64),
            "behavior_mask": np.full(n, behavior_mask(beh), dtype=np.uint32),
        }
        return Population(cols, [beh] * n)

    def operations(self, config):
        p = self.params
        bit = np.uint32(1 << registry.GROW_DIVIDE.bit)
        seed = np.uint64(config.seed)
        margs = self.mechanics_args()
        force, bc = self.force, self.boundary

        def kernel(engine, ctx, lo, hi, buf):
            s = engine.store
            it = np.uint64(ctx.iteration)
            if engine.backend == "numba":
                return grow_divide_block_nb(lo, hi, ctx.row_wise, s.behavior_mask, bit, s.position, s.diameter,
                                            s.rng_key, s.static, s.nonzero_forces, s.disturbed, ctx.divide_flag,
                                            ctx.daughter_position, ctx.daughter_diameter, ctx.nb["position"],
                                            ctx.nb["diameter"], p.target_diameter, p.growth_speed,
                                            p.division_probability, p.volume_ratio, p.mechanics, *margs, seed, it,
                                            *engine.grid_args(), buf)
            idx = np.arange(lo, hi)
            has = (s.behavior_mask[lo:hi] & bit) != 0
            small = has & (s.diameter[lo:hi] < p.target_diameter)
            div = has & ~small
            if p.division_probability < 1.0:
                div &= rng.uniform_np(seed, s.rng_key[lo:hi], it, rng.STREAM_DIVISION, 0) < p.division_probability
            grow_np(idx[small], s.diameter, s.static, s.disturbed, p.growth_speed)
            di = idx[div]
            if di.size:
                divide_np(di, p.volume_ratio, s.position, s.diameter, s.rng_key, seed, it, bc,
                          ctx.daughter_position, ctx.daughter_diameter)
                ctx.divide_flag[di] = 1
                s.static[di] = 0
                s.disturbed[di] |= DISTURB_NEIGHBORS
            if p.mechanics:
                mechanics_np(lo, hi, s.position, s.diameter, s.rng_key, s.static, s.nonzero_forces, s.disturbed,
                             ctx.nb["position"], ctx.nb["diameter"], s.total, engine.grid.box_length, force, bc,
                             seed, it)
            return -1

        return [KernelOperation("grow_divide", kernel)]

    def observe(self, view, env):
        return {"agents": float(len(view))}


# -- tumor spheroid ---------------------------------------------------------


@dataclass(frozen=True)
class TumorParams:
    n_cells: int = 2000
    initial_diameter: float = 12.0
    max_diameter: float = 14.0
    growth_rate: float = 42.0
    division_probability: float = 0.0215
    death_probability: float = 0.033
    minimum_cell_age: int = 87
    displacement_rate: float = 0.005
    max_speed: float = 1.0
    adherence: float = 1.8
    volume_ratio: float = 0.5
    seed_radius: float | None = None
    steps: int = 100

    def __post_init__(self):
        for q in (self.division_probability, self.death_probability):
            if not 0.0 <= q <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if not self.growth_rate > 0:
            raise ValueError("growth_rate must be positive")

    @property
    def sphere_radius(self) -> float:
        if self.seed_radius is not None:
            return self.seed_radius
        # packing fraction of about one half
        return (self.n_cells * self.initial_diameter**3 / 4.0) ** (1.0 / 3.0)


@njit(inline="always")
def tumor_nb(i, pos, diam, age, keys, static, disturbed, remove_flag, divide_flag, d_pos, d_diam,
             max_d, growth, p_div, p_death, min_age, rate, ratio, bc_mode, bc_lo, bc_hi, seed, iteration):
    """Brownian step, death, ageing, then grow or divide. Returns False if the cell died."""
    vx = 2.0 * rng.uniform_nb(seed, keys[i], iteration, 5, 0) - 1.0
    vy = 2.0 * rng.uniform_nb(seed, keys[i], iteration, 5, 1) - 1.0
    vz = 2.0 * rng.uniform_nb(seed, keys[i], iteration, 5, 2) - 1.0
    norm = np.sqrt(vx * vx + vy * vy + vz * vz)
    if norm > 0.0 and rate != 0.0:
        pos[i, 0] = pos[i, 0] + vx / norm * rate
        pos[i, 1] = pos[i, 1] + vy / norm * rate
        pos[i, 2] = pos[i, 2] + vz / norm * rate
        disturbed[i] |= 1
        static[i] = 0
    if age[i] >= min_age and rng.uniform_nb(seed, keys[i], iteration, 6, 0) < p_death:
        remove_flag[i] = 1
        return False
    age[i] += 1
    if diam[i] < max_d:
        grow_nb(i, diam, static, disturbed, growth)
    elif rng.uniform_nb(seed, keys[i], iteration, 7, 0) < p_div:
        divide_nb(i, ratio, pos, diam, keys, seed, iteration, bc_mode, bc_lo, bc_hi, d_pos, d_diam)
        divide_flag[i] = 1
        static[i] = 0
        disturbed[i] |= 1
    return True


@njit
def tumor_block_nb(lo, hi, row_wise, mask, bit, pos, diam, age, keys, static, nonzero, disturbed,
                   remove_flag, divide_flag, d_pos, d_diam, nb_pos, nb_diam, max_d, growth, p_div, p_death,
                   min_age, rate, ratio, k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi, seed,
                   iteration, origin, box_length, dims, stamp, box_ts, box_head, successor, buf):
    for i in range(lo, hi):
        alive = True
        if mask[i] & bit:
            alive = tumor_nb(i, pos, diam, age, keys, static, disturbed, remove_flag, divide_flag, d_pos, d_diam,
                             max_d, growth, p_div, p_death, min_age, rate, ratio, bc_mode, bc_lo, bc_hi, seed,
                             iteration)
        if alive and not row_wise:
            if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                      origin, box_length, dims, stamp, box_ts, box_head, successor,
                                      k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                      seed, iteration, buf):
                return i
    if row_wise:
        for i in range(lo, hi):
            if remove_flag[i]:
                continue
            if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                      origin, box_length, dims, stamp, box_ts, box_head, successor,
                                      k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                      seed, iteration, buf):
                return i
    return -1


def tumor_block_np(lo, hi, mask, bit, s, ctx, params: TumorParams, force, bc, seed, it, box_length):
    """Vectorized twin of :func:`tumor_block_nb` with copy-mode semantics."""
    p = params
    idx = np.arange(lo, hi)
    keys = s.rng_key[lo:hi]
    has = (mask[lo:hi] & bit) != 0
    v = np.stack([2.0 * rng.uniform_np(seed, keys, it, rng.STREAM_BROWNIAN, o) - 1.0 for o in range(3)], axis=1)
    norm = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2])
    mv = has & (norm > 0.0) & (p.displacement_rate != 0.0)
    s.position[idx[mv]] = s.position[idx[mv]] + v[mv] / norm[mv][:, None] * p.displacement_rate
    s.disturbed[idx[mv]] |= DISTURB_NEIGHBORS
    s.static[idx[mv]] = 0
    dies = has & (s.age[lo:hi] >= p.minimum_cell_age)
    dies &= rng.uniform_np(seed, keys, it, rng.STREAM_DEATH, 0) < p.death_probability
    ctx.remove_flag[idx[dies]] = 1
    live = has & ~dies
    s.age[idx[live]] += 1
    small = live & (s.diameter[lo:hi] < p.max_diameter)
    div = live & ~small & (rng.uniform_np(seed, keys, it, rng.STREAM_DIVISION, 0) < p.division_probability)
    grow_np(idx[small], s.diameter, s.static, s.disturbed, p.growth_rate)
    di = idx[div]
    if di.size:
        divide_np(di, p.volume_ratio, s.position, s.diameter, s.rng_key, seed, it, bc,
                  ctx.daughter_position, ctx.daughter_diameter)
        ctx.divide_flag[di] = 1
        s.static[di] = 0
        s.disturbed[di] |= DISTURB_NEIGHBORS
    # dead cells skip mechanics: mark them static for the call, then restore
    dead = idx[dies]
    saved = s.static[dead].copy()
    s.static[dead] = 1
    mechanics_np(lo, hi, s.position, s.diameter, s.rng_key, s.static, s.nonzero_forces, s.disturbed,
                 ctx.nb["position"], ctx.nb["diameter"], s.total, box_length, force, bc, seed, it)
    s.static[dead] = saved


def spheroid_diameter(positions: np.ndarray, diameters: np.ndarray) -> float:
    """Diameter of the sphere whose volume equals the cells' bounding box.

    The box spans the cell centers, widened on every side by the largest
    radius, so adding cells never shrinks it.
    """
    if len(positions) == 0:
        raise ValueError("empty population")
    ext = positions.max(axis=0) - positions.min(axis=0) + float(np.max(diameters))
    vol = float(ext[0] * ext[1] * ext[2])
    return (6.0 * vol / math.pi) ** (1.0 / 3.0)


class TumorModel(ModelPreset):
    name = "spheroid"
    channels = ("agents", "diameter")

    @classmethod
    def default_params(cls):
        return TumorParams()

    @property
    def interaction_length(self):
        p = self.params
        v = math.pi / 6.0 * max(p.max_diameter, p.initial_diameter) ** 3 + p.growth_rate
        return (6.0 * v / math.pi) ** (1.0 / 3.0)

    @property
    def aura_margin(self):
        # random step, then possibly a division shift, before the mechanics query
        p = self.params
        return p.displacement_rate + self.interaction_length * max(p.volume_ratio, 1.0 - p.volume_ratio)

    @property
    def force(self):
        p = self.params
        return ForceParams(max_displacement=p.max_speed, force_threshold=p.adherence)

    @property
    def space(self):
        r = self.params.sphere_radius + self.params.max_diameter
        return (-r, r)

    def behaviors(self):
        p = self.params
        return (BehaviorInstance(registry.TUMOR_BEHAVIOR.tag,
                                 (p.growth_rate, p.max_diameter, p.division_probability, p.death_probability,
                                  float(p.minimum_cell_age), p.displacement_rate)),)

    def initial_population(self, seed):
        p = self.params
        n = p.n_cells
        keys = np.arange(n, dtype=np.uint64)
        pos = uniform_in_sphere(seed, keys, (0.0, 0.0, 0.0), p.sphere_radius, rng.STREAM_INIT, rng.INIT_ITERATION)
        beh = self.behaviors()
        cols = {
            "position": pos,
            "diameter": np.full(n, p.initial_diameter),
            "kind": np.full(n, registry.TUMOR_CELL.tag, dtype=np.int32),
            "rng_key": keys,
            "behavior_mask": np.full(n, behavior_mask(beh), dtype=np.uint32),
        }
        return Population(cols, [beh] * n)

    def operations(self, config):
        p = self.params
        bit = np.uint32(1 << registry.TUMOR_BEHAVIOR.bit)
        seed = np.uint64(config.seed)
        margs = self.mechanics_args()
        force, bc = self.force, self.boundary

        def kernel(engine, ctx, lo, hi, buf):
            s = engine.store
            it = np.uint64(ctx.iteration)
            if engine.backend == "numba":
                return tumor_block_nb(lo, hi, ctx.row_wise, s.behavior_mask, bit, s.position, s.diameter, s.age,
                                      s.rng_key, s.static, s.nonzero_forces, s.disturbed, ctx.remove_flag,
                                      ctx.divide_flag, ctx.daughter_position, ctx.daughter_diameter,
                                      ctx.nb["position"], ctx.nb["diameter"], p.max_diameter, p.growth_rate,
                                      p.division_probability, p.death_probability, p.minimum_cell_age,
                                      p.displacement_rate, p.volume_ratio, *margs, seed, it,
                                      *engine.grid_args(), buf)
            tumor_block_np(lo, hi, s.behavior_mask, bit, s, ctx, p, force, bc, seed, it, engine.grid.box_length)
            return -1

        return [KernelOperation("tumor_behavior", kernel)]

    def observe(self, view, env):
        n = len(view)
        out = {"agents": float(n)}
        out["diameter"] = spheroid_diameter(view.column("position"), view.column("diameter")) if n else float("nan")
        return out
