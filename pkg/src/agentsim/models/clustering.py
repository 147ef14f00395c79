"""Soma clustering: two cell types, each secreting and following its own substance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .. import rng
from .._jit import njit
from ..diffusion import DiffusionGrid, gradient_nb, node_of_nb
from ..engine import registry
from ..engine.simulation import Population
from ..engine.store import DISTURB_NEIGHBORS, BehaviorInstance, behavior_mask
from ..physics import BoundaryCondition, ForceParams, apply_boundary, bound_nb, mechanics_agent_nb, mechanics_np
from .base import KernelOperation, ModelPreset, diffusion_operation, uniform_in_box

SUBSTANCES = ("substance_a", "substance_b")


@dataclass(frozen=True)
class ClusterParams:
    n_cells: int = 2000  # per type
    diameter: float = 10.0
    space_length: float = 250.0
    secretion_quantity: float = 1.0
    gradient_weight: float = 0.75
    nu: float = 0.4
    mu: float = 0.0
    resolution: int = 64
    neighbors: int = 10
    sample_every: int = 100
    steps: int = 2000

    def __post_init__(self):
        if self.n_cells < 1 or self.resolution < 2:
            raise ValueError("n_cells must be >= 1 and resolution >= 2")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")


@njit
def cluster_block_nb(lo, hi, row_wise, mask, b_sec, b_chem, state, pos, diam, keys, static, nonzero, disturbed,
                     nb_pos, nb_diam, flat, u_a, u_b, lower, spacing, res, weight,
                     k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi, seed, iteration,
                     origin, box_length, dims, stamp, box_ts, box_head, successor, buf):
    for i in range(lo, hi):
        if mask[i] & b_sec:
            a = node_of_nb(pos[i, 0], lower, spacing, res)
            b = node_of_nb(pos[i, 1], lower, spacing, res)
            c = node_of_nb(pos[i, 2], lower, spacing, res)
            flat[i] = (a * res + b) * res + c
        if mask[i] & b_chem and weight != 0.0:
            u = u_a if state[i] == 0 else u_b
            gx, gy, gz = gradient_nb(u, pos[i, 0], pos[i, 1], pos[i, 2], lower, spacing, res)
            if gx != 0.0 or gy != 0.0 or gz != 0.0:
                pos[i, 0] = bound_nb(pos[i, 0] + gx * weight, bc_mode, bc_lo, bc_hi)
                pos[i, 1] = bound_nb(pos[i, 1] + gy * weight, bc_mode, bc_lo, bc_hi)
                pos[i, 2] = bound_nb(pos[i, 2] + gz * weight, bc_mode, bc_lo, bc_hi)
                static[i] = 0
                disturbed[i] |= 1
        if not row_wise:
            if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                      origin, box_length, dims, stamp, box_ts, box_head, successor,
                                      k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                      seed, iteration, buf):
                return i
    if row_wise:
        for i in range(lo, hi):
            if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                      origin, box_length, dims, stamp, box_ts, box_head, successor,
                                      k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                      seed, iteration, buf):
                return i
    return -1


def same_type_fraction(positions: np.ndarray, types: np.ndarray, k: int = 10) -> float:
    """Mean fraction of each agent's ``k`` nearest neighbors sharing its type."""
    n = len(positions)
    if n < 2:
        return float("nan")
    k = min(k, n - 1)
    _, idx = cKDTree(positions).query(positions, k=k + 1)
    nb = idx[:, 1:]
    return float(np.mean(types[nb] == types[:, None]))


class ClusteringModel(ModelPreset):
    name = "clustering"
    uniform_init = True
    channels = ("concentration_a", "concentration_b", "same_type_fraction")

    @classmethod
    def default_params(cls):
        return ClusterParams()

    @property
    def interaction_length(self):
        return self.params.diameter

    @property
    def aura_margin(self):
        # chemotaxis follows the unit gradient before mechanics
        return abs(self.params.gradient_weight)

    @property
    def boundary(self):
        return BoundaryCondition("closed", 0.0, self.params.space_length)

    @property
    def force(self):
        return ForceParams()

    def create_substances(self, backend):
        p = self.params
        return {name: DiffusionGrid(name, 0.0, p.space_length, p.resolution, p.nu, p.mu, backend=backend)
                for name in SUBSTANCES}

    def behaviors(self):
        p = self.params
        return (BehaviorInstance(registry.SECRETION.tag, (p.secretion_quantity,)),
                BehaviorInstance(registry.CHEMOTAXIS.tag, (p.gradient_weight,)))

    def initial_population(self, seed):
        p = self.params
        n = 2 * p.n_cells
        keys = np.arange(n, dtype=np.uint64)
        pos = uniform_in_box(seed, keys, 0.0, p.space_length, rng.STREAM_INIT, rng.INIT_ITERATION)
        # types interleaved by key so any key range holds both
        state = (np.arange(n) % 2).astype(np.int32)
        beh = self.behaviors()
        cols = {
            "position": pos,
            "diameter": np.full(n, p.diameter),
            "kind": np.full(n, registry.SOMA_CELL.tag, dtype=np.int32),
            "state": state,
            "rng_key": keys,
            "behavior_mask": np.full(n, behavior_mask(beh), dtype=np.uint32),
        }
        return Population(cols, [beh] * n)

    def operations(self, config):
        p = self.params
        b_sec = np.uint32(1 << registry.SECRETION.bit)
        b_chem = np.uint32(1 << registry.CHEMOTAXIS.bit)
        seed = np.uint64(config.seed)
        margs = self.mechanics_args()
        force, bc = self.force, self.boundary

        def prepare(engine, ctx):
            ctx.scratch("secrete_flat", np.int64, -1)

        def kernel(engine, ctx, lo, hi, buf):
            s = engine.store
            it = np.uint64(ctx.iteration)
            flat = ctx.scratch("secrete_flat", np.int64, -1)
            ga, gb = (engine.env.substances[n] for n in SUBSTANCES)
            if engine.backend == "numba":
                return cluster_block_nb(lo, hi, ctx.row_wise, s.behavior_mask, b_sec, b_chem, s.state, s.position,
                                        s.diameter, s.rng_key, s.static, s.nonzero_forces, s.disturbed,
                                        ctx.nb["position"], ctx.nb["diameter"], flat, ga.concentrations,
                                        gb.concentrations, ga.lower, ga.spacing, ga.resolution, p.gradient_weight,
                                        *margs, seed, it, *engine.grid_args(), buf)
            idx = np.arange(lo, hi)
            m = s.behavior_mask[lo:hi]
            sec = idx[(m & b_sec) != 0]
            if sec.size:
                flat[sec] = ga.flat_index(s.position[sec])
            chem = idx[(m & b_chem) != 0]
            if chem.size and p.gradient_weight != 0.0:
                g = np.zeros((chem.size, 3))
                for t, grid in enumerate((ga, gb)):
                    sel = s.state[chem] == t
                    if sel.any():
                        g[sel] = grid.gradients(s.position[chem[sel]])
                moved = (g != 0.0).any(axis=1)
                mi = chem[moved]
                s.position[mi] = apply_boundary(s.position[mi] + g[moved] * p.gradient_weight, bc)
                s.static[mi] = 0
                s.disturbed[mi] |= DISTURB_NEIGHBORS
            mechanics_np(lo, hi, s.position, s.diameter, s.rng_key, s.static, s.nonzero_forces, s.disturbed,
                         ctx.nb["position"], ctx.nb["diameter"], s.total, engine.grid.box_length, force, bc,
                         seed, it)
            return -1

        def finish(engine, ctx):
            s = engine.store
            flat = ctx.scratch("secrete_flat", np.int64, -1)
            n = s.count
            ok = flat[:n] >= 0
            engine.env.record_secretion(s.rng_key[:n][ok].copy(), s.state[:n][ok].astype(np.int64), flat[:n][ok],
                                        np.full(int(ok.sum()), p.secretion_quantity))

        return [KernelOperation("secretion_chemotaxis", kernel, prepare=prepare, finish=finish),
                diffusion_operation()]

    def observe(self, view, env):
        out = {"concentration_a": float(env.substances[SUBSTANCES[0]].concentrations.sum()),
               "concentration_b": float(env.substances[SUBSTANCES[1]].concentrations.sum())}
        p = self.params
        if view.iteration % p.sample_every == 0:
            out["same_type_fraction"] = same_type_fraction(view.column("position"), view.column("state"), p.neighbors)
        return out
