"""Time series, reference solutions and CSV output."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np


class TimeSeries:
    """Named channels of (iteration, value) pairs, iterations strictly increasing."""

    def __init__(self):
        self.channels: dict[str, tuple[list[int], list[float]]] = {}

    def add(self, name: str, iteration: int, value: float) -> None:
        its, vals = self.channels.setdefault(name, ([], []))
        if its and iteration <= its[-1]:
            raise ValueError(f"channel {name!r}: iteration {iteration} not after {its[-1]}")
        its.append(int(iteration))
        vals.append(float(value))

    def __getitem__(self, name: str) -> np.ndarray:
        return np.asarray(self.channels[name][1])

    def iterations(self, name: str | None = None) -> np.ndarray:
        if name is not None:
            return np.asarray(self.channels[name][0])
        its = sorted({i for its, _ in self.channels.values() for i in its})
        return np.asarray(its, dtype=np.int64)

    def names(self) -> list[str]:
        return list(self.channels)

    def __eq__(self, other):
        return isinstance(other, TimeSeries) and self.channels == other.channels


def _fmt(v: float) -> str:
    if v != v:
        return "nan"
    return format(v, ".17g")


def to_csv(series: TimeSeries) -> str:
    names = series.names()
    rows = series.iterations()
    lookup = {n: dict(zip(*series.channels[n])) for n in names}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", *names])
    for it in rows:
        w.writerow([str(int(it)), *[_fmt(lookup[n][it]) if it in lookup[n] else "" for n in names]])
    return buf.getvalue()


def emit_csv(series: TimeSeries, path) -> Path:
    path = Path(path)
    path.write_text(to_csv(series), newline="")
    return path


def parse_csv(text: str) -> TimeSeries:
    rows = list(csv.reader(io.StringIO(text)))
    ts = TimeSeries()
    if not rows:
        return ts
    names = rows[0][1:]
    for n in names:
        ts.channels[n] = ([], [])
    for row in rows[1:]:
        it = int(row[0])
        for n, cell in zip(names, row[1:]):
            if cell != "":
                ts.add(n, it, float(cell))
    return ts


def read_csv(path) -> TimeSeries:
    return parse_csv(Path(path).read_text())


# -- reference solutions -------------------------------------------------


def _sir_rhs(y, beta, gamma, n):
    s, i, _ = y
    inf = beta * s * i / n
    rec = gamma * i
    return np.array([-inf, inf - rec, rec])


def sir_ode_oracle(beta: float, gamma: float, N: float, S0: float, I0: float, steps: int, dt: float = 1.0,
                   substeps: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 solution sampled at every ``dt``; internal step ``dt / substeps``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    h = dt / substeps
    y = np.array([S0, I0, N - S0 - I0], dtype=np.float64)
    out = np.empty((steps + 1, 3))
    out[0] = y
    for k in range(steps):
        for _ in range(substeps):
            k1 = _sir_rhs(y, beta, gamma, N)
            k2 = _sir_rhs(y + 0.5 * h * k1, beta, gamma, N)
            k3 = _sir_rhs(y + 0.5 * h * k2, beta, gamma, N)
            k4 = _sir_rhs(y + h * k3, beta, gamma, N)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y
    return out[:, 0], out[:, 1], out[:, 2]


def heat_kernel(nu: float, t, r) -> np.ndarray | float:
    """Concentration at distance ``r`` from a unit point source after time ``t``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("t must be positive")
    r = np.asarray(r, dtype=np.float64)
    val = (4.0 * math.pi * nu * t) ** -1.5 * np.exp(-(r * r) / (4.0 * nu * t))
    return float(val) if val.ndim == 0 else val
