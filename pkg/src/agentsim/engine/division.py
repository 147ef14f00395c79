"""Volume-conserving division of spherical agents."""

from __future__ import annotations

import math

import numpy as np

from .. import rng
from .._jit import njit
from ..physics import bound_nb
from . import registry
from .store import DISTURB_NEIGHBORS, AgentRecord


def cube_root_np(x: np.ndarray) -> np.ndarray:
    """Elementwise ``x ** (1/3)`` through libm, matching compiled kernels bit for bit.

    numpy's vectorized power may use a SIMD routine whose last bit differs.
    """
    return np.fromiter((v ** (1.0 / 3.0) for v in x.tolist()), dtype=np.float64, count=len(x))


class NotVolumetricError(TypeError):
    pass


@njit(inline="always")
def split_diameters(d, ratio):
    v = np.pi / 6.0 * d * d * d
    vd = v * ratio
    vm = v - vd
    return (6.0 * vm / np.pi) ** (1.0 / 3.0), (6.0 * vd / np.pi) ** (1.0 / 3.0), vm, vd


@njit(inline="always")
def divide_nb(i, ratio, pos, diam, keys, seed, iteration, bc_mode, bc_lo, bc_hi, out_pos, out_diam):
    """Shrink agent ``i`` and write its daughter's position and diameter to ``out_*[i]``.

    The daughter gets ``ratio`` of the volume. Both centers move apart along a
    random axis, keeping the center of volume fixed, until the surfaces touch.
    """
    dm, dd, vm, vd = split_diameters(diam[i], ratio)
    ux, uy, uz = rng.unit_vector_nb(seed, keys[i], iteration, 8)
    sep = 0.5 * (dm + dd)
    v = vm + vd
    sm = -sep * vd / v
    sd = sep * vm / v
    px = pos[i, 0]
    py = pos[i, 1]
    pz = pos[i, 2]
    out_pos[i, 0] = bound_nb(px + sd * ux, bc_mode, bc_lo, bc_hi)
    out_pos[i, 1] = bound_nb(py + sd * uy, bc_mode, bc_lo, bc_hi)
    out_pos[i, 2] = bound_nb(pz + sd * uz, bc_mode, bc_lo, bc_hi)
    out_diam[i] = dd
    pos[i, 0] = bound_nb(px + sm * ux, bc_mode, bc_lo, bc_hi)
    pos[i, 1] = bound_nb(py + sm * uy, bc_mode, bc_lo, bc_hi)
    pos[i, 2] = bound_nb(pz + sm * uz, bc_mode, bc_lo, bc_hi)
    diam[i] = dm


@njit
def _divide_one(ratio, pos, diam, keys, seed, iteration, bc_mode, bc_lo, bc_hi, out_pos, out_diam):
    divide_nb(0, ratio, pos, diam, keys, seed, iteration, bc_mode, bc_lo, bc_hi, out_pos, out_diam)


def divide(parent: AgentRecord, volume_ratio: float, seed: int = 0, iteration: int = 0, bc=None) -> AgentRecord:
    """Split ``parent`` in place and return the daughter record.

    Behaviors flagged ``copy_on_division`` go to the daughter; those flagged
    ``remove_on_division`` leave the parent.
    """
    if not registry.kind(parent.kind_tag).volumetric:
        raise NotVolumetricError(f"{registry.kind(parent.kind_tag).name} agents cannot divide")
    if not 0.0 < volume_ratio < 1.0:
        raise ValueError("volume_ratio must lie in (0, 1)")
    pos = parent.position.reshape(1, 3).copy()
    diam = np.array([parent.diameter])
    keys = np.array([parent.rng_key], dtype=np.uint64)
    out_pos = np.zeros((1, 3))
    out_diam = np.zeros(1)
    mode, lo, hi = (0, 0.0, 1.0) if bc is None else (bc.code, bc.lower, bc.upper)
    _divide_one(volume_ratio, pos, diam, keys, np.uint64(seed), np.uint64(iteration), mode, lo, hi, out_pos, out_diam)
    inherited = [b for b in parent.behaviors if b.copy_on_division]
    parent.behaviors = [b for b in parent.behaviors if not b.remove_on_division]
    parent.position = pos[0]
    parent.diameter = float(diam[0])
    parent.disturbed |= DISTURB_NEIGHBORS
    parent.static_flag = False
    return AgentRecord(
        position=out_pos[0],
        diameter=float(out_diam[0]),
        kind_tag=parent.kind_tag,
        behaviors=inherited,
        state=parent.state,
        age=0,
        rng_key=int(rng.derive_key(parent.rng_key, iteration)),
        disturbed=DISTURB_NEIGHBORS,
    )


def sphere_volume(d: float) -> float:
    return math.pi / 6.0 * d**3


def sphere_diameter(v: float) -> float:
    return (6.0 * v / math.pi) ** (1.0 / 3.0)
