"""Explicit central-difference diffusion with linear decay.

Nodes sit at ``lower + i * spacing`` for ``i in [0, resolution)`` with
``spacing = (upper - lower) / resolution``. Values outside the lattice are 0,
so substance leaks out through the boundary.
"""

from __future__ import annotations

import io

import numpy as np

from ._jit import njit, resolve

GRADIENT_EPS = 1e-12


class StabilityError(ValueError):
    pass


@njit
def _step_nb(u, out, k_lo, k_hi, decay, ax, ay, az):
    nx, ny, nz = u.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(k_lo, k_hi):
                c = u[i, j, k]
                e = u[i + 1, j, k] if i + 1 < nx else 0.0
                w = u[i - 1, j, k] if i > 0 else 0.0
                n = u[i, j + 1, k] if j + 1 < ny else 0.0
                s = u[i, j - 1, k] if j > 0 else 0.0
                t = u[i, j, k + 1] if k + 1 < nz else 0.0
                b = u[i, j, k - 1] if k > 0 else 0.0
                out[i, j, k] = c * decay + ax * ((e + w) - 2.0 * c) + ay * ((n + s) - 2.0 * c) + az * ((t + b) - 2.0 * c)


def _step_np(u, out, decay, ax, ay, az):
    p = np.pad(u, 1)
    c = u
    e, w = p[2:, 1:-1, 1:-1], p[:-2, 1:-1, 1:-1]
    n, s = p[1:-1, 2:, 1:-1], p[1:-1, :-2, 1:-1]
    t, b = p[1:-1, 1:-1, 2:], p[1:-1, 1:-1, :-2]
    out[...] = c * decay + ax * ((e + w) - 2.0 * c) + ay * ((n + s) - 2.0 * c) + az * ((t + b) - 2.0 * c)


@njit(inline="always")
def node_of_nb(x, lower, spacing, res):
    i = int(np.ceil((x - lower) / spacing - 0.5))
    if i < 0:
        return 0
    if i >= res:
        return res - 1
    return i


@njit(inline="always")
def _span(c, res):
    lo = c - 1 if c > 0 else c
    hi = c + 1 if c < res - 1 else c
    return lo, hi


@njit(inline="always")
def gradient_nb(u, x, y, z, lower, spacing, res):
    i = node_of_nb(x, lower, spacing, res)
    j = node_of_nb(y, lower, spacing, res)
    k = node_of_nb(z, lower, spacing, res)
    i0, i1 = _span(i, res)
    j0, j1 = _span(j, res)
    k0, k1 = _span(k, res)
    gx = (u[i1, j, k] - u[i0, j, k]) / ((i1 - i0) * spacing) if i1 > i0 else 0.0
    gy = (u[i, j1, k] - u[i, j0, k]) / ((j1 - j0) * spacing) if j1 > j0 else 0.0
    gz = (u[i, j, k1] - u[i, j, k0]) / ((k1 - k0) * spacing) if k1 > k0 else 0.0
    m = np.sqrt(gx * gx + gy * gy + gz * gz)
    if m < 1e-12:
        return 0.0, 0.0, 0.0
    return gx / m, gy / m, gz / m


@njit
def _gradient_many_nb(u, pts, lower, spacing, res, out):
    for p in range(pts.shape[0]):
        gx, gy, gz = gradient_nb(u, pts[p, 0], pts[p, 1], pts[p, 2], lower, spacing, res)
        out[p, 0] = gx
        out[p, 1] = gy
        out[p, 2] = gz


def gradient_np(u, pts, lower, spacing, res):
    idx = nearest_node_np(pts, lower, spacing, res)
    g = np.zeros((len(pts), 3))
    for axis in range(3):
        c = idx[:, axis]
        lo_i, hi_i = idx.copy(), idx.copy()
        lo_i[:, axis] = np.maximum(c - 1, 0)
        hi_i[:, axis] = np.minimum(c + 1, res - 1)
        span = hi_i[:, axis] - lo_i[:, axis]
        diff = u[tuple(hi_i.T)] - u[tuple(lo_i.T)]
        with np.errstate(invalid="ignore", divide="ignore"):
            g[:, axis] = np.where(span > 0, diff / (span * spacing), 0.0)
    m = np.sqrt(g[:, 0] * g[:, 0] + g[:, 1] * g[:, 1] + g[:, 2] * g[:, 2])
    ok = m >= GRADIENT_EPS
    out = np.zeros_like(g)
    out[ok] = g[ok] / m[ok][:, None]
    return out


def nearest_node_np(pts, lower, spacing, res) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    i = np.ceil((pts - lower) / spacing - 0.5).astype(np.int64)
    return np.clip(i, 0, res - 1)


class DiffusionGrid:
    def __init__(self, name: str, lower: float, upper: float, resolution: int, nu: float, mu: float = 0.0,
                 dt: float = 1.0, backend: str | None = None):
        if resolution < 2:
            raise ValueError("resolution must be >= 2")
        if not upper > lower:
            raise ValueError("upper must exceed lower")
        if nu < 0 or mu < 0 or not dt > 0:
            raise ValueError("nu, mu must be nonnegative and dt positive")
        self.substance_name = name
        self.lower = float(lower)
        self.upper = float(upper)
        self.resolution = int(resolution)
        self.spacing = (self.upper - self.lower) / self.resolution
        self.nu = float(nu)
        self.mu = float(mu)
        self.dt = float(dt)
        self.backend = resolve(backend)
        number = self.nu * self.dt * 3.0 / self.spacing**2
        if number > 0.5:
            raise StabilityError(f"explicit scheme unstable: nu*dt*sum(1/dx^2) = {number:.4g} > 0.5")
        n = self.resolution
        self.concentrations = np.zeros((n, n, n))
        self._out = np.zeros_like(self.concentrations)
        self.steps = 0

    @property
    def spacings(self) -> tuple[float, float, float]:
        return (self.spacing,) * 3

    def node_position(self, i, j, k) -> np.ndarray:
        return self.lower + self.spacing * np.array([i, j, k], dtype=np.float64)

    def nearest_node(self, position) -> tuple[int, int, int]:
        return tuple(int(v) for v in nearest_node_np(position, self.lower, self.spacing, self.resolution)[0])

    def flat_index(self, positions) -> np.ndarray:
        idx = nearest_node_np(positions, self.lower, self.spacing, self.resolution)
        return np.ravel_multi_index(tuple(idx.T), self.concentrations.shape)

    def step(self, pool=None) -> None:
        a = self.nu * self.dt / self.spacing**2
        decay = 1.0 - self.mu * self.dt
        u, out = self.concentrations, self._out
        if self.backend == "numba":
            if pool is None or pool.workers == 1:
                _step_nb(u, out, 0, self.resolution, decay, a, a, a)
            else:
                n = self.resolution
                chunk = -(-n // pool.workers)
                pool_blocks = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
                for f in [pool._executor.submit(_step_nb, u, out, lo, hi, decay, a, a, a) for lo, hi in pool_blocks]:
                    f.result()
        else:
            _step_np(u, out, decay, a, a, a)
        self.concentrations, self._out = out, u
        self.steps += 1

    def increase_concentration(self, position, amount: float) -> None:
        self.concentrations[self.nearest_node(position)] += amount

    def add_at_flat(self, flat: np.ndarray, amounts: np.ndarray) -> None:
        np.add.at(self.concentrations.reshape(-1), flat, amounts)

    def concentration_at(self, position) -> float:
        return float(self.concentrations[self.nearest_node(position)])

    def gradient_at(self, position) -> np.ndarray:
        return self.gradients(np.atleast_2d(np.asarray(position, dtype=np.float64)))[0]

    def gradients(self, positions: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(positions, dtype=np.float64)
        if self.backend == "numba":
            out = np.zeros((len(pts), 3))
            _gradient_many_nb(self.concentrations, pts, self.lower, self.spacing, self.resolution, out)
            return out
        return gradient_np(self.concentrations, pts, self.lower, self.spacing, self.resolution)

    def total_mass(self) -> float:
        return float(self.concentrations.sum() * self.spacing**3)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,j,k,value\n")
        for (i, j, k), v in np.ndenumerate(self.concentrations):
            buf.write(f"{i},{j},{k},{float(v):.17g}\n")
        return buf.getvalue()
