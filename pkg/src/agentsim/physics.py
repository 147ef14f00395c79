"""Sphere collision forces, displacement, static-agent detection and boundaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jit import njit
from .rng import STREAM_COLLISION, unit_vector_nb, unit_vector_np
from .spatial.grid import gather_neighbors, neighbor_pairs

OPEN, CLOSED, TOROIDAL = 0, 1, 2
_MODES = {"open": OPEN, "closed": CLOSED, "toroidal": TOROIDAL}


@dataclass(frozen=True)
class ForceParams:
    k: float = 2.0
    gamma: float = 1.0
    max_displacement: float = 3.0
    force_threshold: float = 0.0
    dt_mech: float = 1.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.max_displacement > 0:
            raise ValueError("max_displacement must be positive")
        if self.force_threshold < 0:
            raise ValueError("force_threshold must be nonnegative")


@dataclass(frozen=True)
class BoundaryCondition:
    mode: str = "open"
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"boundary mode must be one of {tuple(_MODES)}")
        if self.mode != "open" and not self.upper > self.lower:
            raise ValueError("boundary needs lower < upper")

    @property
    def code(self) -> int:
        return _MODES[self.mode]

    @property
    def extent(self) -> float:
        return self.upper - self.lower


# -- boundaries ----------------------------------------------------------------


@njit(inline="always")
def wrap_nb(x, lo, hi):
    extent = hi - lo
    el = np.fmod(x - lo, extent)
    if el < 0.0:
        el = extent + el
    if el >= extent:
        el = 0.0
    return el + lo


@njit(inline="always")
def bound_nb(x, mode, lo, hi):
    if mode == 1:
        return min(max(x, lo), hi)
    if mode == 2:
        return wrap_nb(x, lo, hi)
    return x


def apply_boundary(position, bc: BoundaryCondition) -> np.ndarray:
    p = np.asarray(position, dtype=np.float64)
    if bc.mode == "open":
        return p.copy()
    if bc.mode == "closed":
        return np.clip(p, bc.lower, bc.upper)
    extent = bc.extent
    el = np.fmod(p - bc.lower, extent)
    el = np.where(el < 0.0, extent + el, el)
    el = np.where(el >= extent, 0.0, el)
    return el + bc.lower


# -- pair force --------------------------------------------------------------


@njit(inline="always")
def pair_force_nb(ax, ay, az, ra, ka, bx, by, bz, rb, kb, k, gamma, seed, iteration):
    """Force on sphere a from sphere b; returns (fx, fy, fz, nonzero)."""
    dx = ax - bx
    dy = ay - by
    dz = az - bz
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    delta = ra + rb - dist
    if delta <= 0.0:
        return 0.0, 0.0, 0.0, False
    rbar = ra * rb / (ra + rb)
    f = k * delta - gamma * np.sqrt(rbar * delta)
    if f == 0.0:
        return 0.0, 0.0, 0.0, False
    if dist > 0.0:
        return f * dx / dist, f * dy / dist, f * dz / dist, True
    # coincident centers: direction keyed on the smaller key of the pair
    lo = min(ka, kb)
    ux, uy, uz = unit_vector_nb(seed, lo, iteration, 9)
    s = 1.0 if ka == lo else -1.0
    if ka == kb:
        s = 1.0
    return s * f * ux, s * f * uy, s * f * uz, True


def collision_force(center_a, radius_a, center_b, radius_b, params: ForceParams = ForceParams(),
                    key_a: int = 0, key_b: int = 1, seed: int = 0, iteration: int = 0) -> np.ndarray:
    if not (radius_a > 0 and radius_b > 0):
        raise ValueError("radii must be positive")
    a = np.asarray(center_a, dtype=np.float64)
    b = np.asarray(center_b, dtype=np.float64)
    fx, fy, fz, _ = pair_force_nb(a[0], a[1], a[2], float(radius_a), np.uint64(key_a),
                                  b[0], b[1], b[2], float(radius_b), np.uint64(key_b),
                                  params.k, params.gamma, np.uint64(seed), np.uint64(iteration))
    return np.array([fx, fy, fz])


def pair_forces_np(a, ra, ka, b, rb, kb, k, gamma, seed, iteration):
    """Vectorized twin of :func:`pair_force_nb` over aligned pair arrays."""
    d = a - b
    dist = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    delta = ra + rb - dist
    touch = delta > 0.0
    rbar = ra * rb / (ra + rb)
    with np.errstate(invalid="ignore"):
        f = np.where(touch, k * delta - gamma * np.sqrt(np.where(touch, rbar * delta, 0.0)), 0.0)
    nonzero = touch & (f != 0.0)
    out = np.zeros_like(d)
    far = nonzero & (dist > 0.0)
    # same operation order as the scalar path: f * dx / dist
    out[far, 0] = f[far] * d[far, 0] / dist[far]
    out[far, 1] = f[far] * d[far, 1] / dist[far]
    out[far, 2] = f[far] * d[far, 2] / dist[far]
    same = nonzero & (dist == 0.0)
    if same.any():
        lo = np.minimum(ka[same], kb[same])
        u = unit_vector_np(seed, lo, iteration, STREAM_COLLISION)
        s = np.where((ka[same] == lo) | (ka[same] == kb[same]), 1.0, -1.0)
        out[same] = (s * f[same])[:, None] * u
    return out, nonzero


# -- mechanics ---------------------------------------------------------------


@njit(inline="always")
def sort_by_key(idx, count, keys):
    # insertion sort; neighbor lists are short
    for a in range(1, count):
        v = idx[a]
        kv = keys[v]
        b = a - 1
        while b >= 0 and (keys[idx[b]] > kv or (keys[idx[b]] == kv and idx[b] > v)):
            idx[b + 1] = idx[b]
            b -= 1
        idx[b + 1] = v


@njit(inline="always")
def mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                       origin, box_length, dims, stamp, box_ts, box_head, successor,
                       k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                       seed, iteration, buf):
    """Displace agent ``i`` by the summed collision force of its neighbors.

    Returns False when the neighbor buffer overflowed (caller grows it and
    retries this agent).
    """
    if static[i]:
        return True
    px = pos[i, 0]
    py = pos[i, 1]
    pz = pos[i, 2]
    cnt = gather_neighbors(i, px, py, pz, box_length * box_length, nb_pos, origin, box_length, dims,
                           stamp, box_ts, box_head, successor, buf)
    if cnt < 0:
        return False
    sort_by_key(buf, cnt, keys)
    ri = 0.5 * diam[i]
    ki = keys[i]
    fx = 0.0
    fy = 0.0
    fz = 0.0
    nz = 0
    for t in range(cnt):
        j = buf[t]
        gx, gy, gz, hit = pair_force_nb(px, py, pz, ri, ki, nb_pos[j, 0], nb_pos[j, 1], nb_pos[j, 2],
                                        0.5 * nb_diam[j], keys[j], k, gamma, seed, iteration)
        if hit:
            fx += gx
            fy += gy
            fz += gz
            nz += 1
    nonzero[i] = nz
    fnorm = np.sqrt(fx * fx + fy * fy + fz * fz)
    if fnorm <= threshold or fnorm == 0.0:
        return True
    mx = fx * dt_mech
    my = fy * dt_mech
    mz = fz * dt_mech
    mnorm = np.sqrt(mx * mx + my * my + mz * mz)
    if mnorm > max_disp:
        scale = max_disp / mnorm
        mx *= scale
        my *= scale
        mz *= scale
    pos[i, 0] = bound_nb(px + mx, bc_mode, bc_lo, bc_hi)
    pos[i, 1] = bound_nb(py + my, bc_mode, bc_lo, bc_hi)
    pos[i, 2] = bound_nb(pz + mz, bc_mode, bc_lo, bc_hi)
    if pos[i, 0] != px or pos[i, 1] != py or pos[i, 2] != pz:
        disturbed[i] |= 1
    return True


@njit
def mechanics_block_nb(lo, hi, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                       origin, box_length, dims, stamp, box_ts, box_head, successor,
                       k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi, seed, iteration, buf):
    for i in range(lo, hi):
        if not mechanics_agent_nb(i, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam,
                                  origin, box_length, dims, stamp, box_ts, box_head, successor,
                                  k, gamma, dt_mech, max_disp, threshold, bc_mode, bc_lo, bc_hi,
                                  seed, iteration, buf):
            return i
    return -1


def mechanics_np(lo, hi, pos, diam, keys, static, nonzero, disturbed, nb_pos, nb_diam, n_total, radius,
                 params: ForceParams, bc: BoundaryCondition, seed, iteration):
    """Vectorized mechanics for slots ``[lo, hi)`` with copy-mode semantics."""
    rows = np.arange(lo, hi)
    active = rows[static[lo:hi] == 0]
    if active.size == 0:
        return
    query = pos[active]
    indptr, cols = _pairs_for(query, nb_pos, n_total, radius, keys, active)
    counts = np.diff(indptr)
    r = np.repeat(np.arange(active.size), counts)
    ai = active[r]
    f, hit = pair_forces_np(query[r], 0.5 * diam[ai], keys[ai], nb_pos[cols], 0.5 * nb_diam[cols], keys[cols],
                            params.k, params.gamma, np.uint64(seed), np.uint64(iteration))
    F = np.zeros((active.size, 3))
    nz = np.zeros(active.size, dtype=np.int64)
    # sequential accumulation in key order per row, matching the scalar kernel
    maxc = int(counts.max()) if counts.size else 0
    for t in range(maxc):
        sel = np.flatnonzero(counts > t)
        e = indptr[sel] + t
        h = hit[e]
        sel, e = sel[h], e[h]
        F[sel] += f[e]
        nz[sel] += 1
    nonzero[active] = nz
    fnorm = np.sqrt(F[:, 0] * F[:, 0] + F[:, 1] * F[:, 1] + F[:, 2] * F[:, 2])
    move = (fnorm > params.force_threshold) & (fnorm != 0.0)
    m = F[move] * params.dt_mech
    mnorm = np.sqrt(m[:, 0] * m[:, 0] + m[:, 1] * m[:, 1] + m[:, 2] * m[:, 2])
    big = mnorm > params.max_displacement
    m[big] *= (params.max_displacement / mnorm[big])[:, None]
    idx = active[move]
    old = pos[idx].copy()
    pos[idx] = apply_boundary(old + m, bc)
    changed = np.any(pos[idx] != old, axis=1)
    disturbed[idx[changed]] |= 1


def _pairs_for(query, cand, n_total, radius, keys, query_slots):
    """CSR neighbor table of ``query`` points against ``cand[:n_total]``, excluding own slot."""
    nq = query.shape[0]
    both = np.concatenate([query, cand[:n_total]])
    ip, ix = neighbor_pairs(both, nq, nq + n_total, radius)
    r = np.repeat(np.arange(nq), np.diff(ip))
    c = ix - nq
    keep = (c >= 0) & (c != query_slots[r])
    r, c = r[keep], c[keep]
    srt = np.lexsort((c, keys[c], r))
    r, c = r[srt], c[srt]
    indptr = np.zeros(nq + 1, dtype=np.int64)
    np.add.at(indptr, r + 1, 1)
    return np.cumsum(indptr), c


# -- static detection ----------------------------------------------------------


@njit
def static_update_nb(n, static, nonzero, disturbed, pos, tomb, n_tomb, radius,
                     origin, box_length, dims, stamp, box_ts, box_head, successor, buf):
    r2 = radius * radius
    for i in range(n):
        s = disturbed[i] == 0 and nonzero[i] <= 1
        if s:
            cnt = gather_neighbors(i, pos[i, 0], pos[i, 1], pos[i, 2], r2, pos, origin, box_length, dims,
                                   stamp, box_ts, box_head, successor, buf)
            if cnt < 0:
                return i
            for t in range(cnt):
                if disturbed[buf[t]] & 1:
                    s = False
                    break
        if s:
            for t in range(n_tomb):
                dx = tomb[t, 0] - pos[i, 0]
                dy = tomb[t, 1] - pos[i, 1]
                dz = tomb[t, 2] - pos[i, 2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    s = False
                    break
        static[i] = 1 if s else 0
    return -1


def static_update_np(n, n_total, static, nonzero, disturbed, pos, tomb, radius):
    s = (disturbed[:n] == 0) & (nonzero[:n] <= 1)
    ip, ix = neighbor_pairs(pos, n, n_total, radius)
    bad = (disturbed[ix] & 1) != 0
    rows = np.repeat(np.arange(n), np.diff(ip))
    hit = np.zeros(n, dtype=bool)
    hit[rows[bad]] = True
    s &= ~hit
    if len(tomb):
        d2 = ((pos[:n, None, :] - tomb[None, :, :]) ** 2).sum(axis=2)
        s &= ~np.any(d2 <= radius * radius, axis=1)
    static[:n] = s
