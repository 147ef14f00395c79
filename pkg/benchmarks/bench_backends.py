"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_backends.py [--repeat 3] [--iterations 50] [--csv out.csv]

Each case runs once untimed so JIT compilation is excluded, then reports the
best of ``--repeat`` runs. Results from the two backends are also compared so
a speedup never hides a divergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from agentsim.analysis import to_csv
from agentsim.diffusion import DiffusionGrid
from agentsim.engine.simulation import SimConfig, simulate
from agentsim.models import get_preset
from agentsim.spatial.grid import UniformGrid

BACKENDS = ("numba", "numpy")


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def case_grid(backend, n=20_000):
    pos = np.random.default_rng(0).uniform(0, 200, (n, 3))

    def run():
        g = UniformGrid(backend=backend)
        g.build(pos, interaction_length=5.0)
        return sum(len(g.neighbors(i)) for i in range(0, n, 50))
    return run


def case_diffusion(backend, res=64, steps=20):
    def run():
        g = DiffusionGrid("bench", 0.0, 100.0, res, 1.0, 0.01, dt=0.1, backend=backend)
        g.increase_concentration((50.0, 50.0, 50.0), 1.0)
        for _ in range(steps):
            g.step()
        return g.total_mass()
    return run


def case_preset(name, iterations, **overrides):
    def make(backend):
        def run():
            rep = simulate(get_preset(name, **overrides), iterations, SimConfig(backend=backend))
            return to_csv(rep.series)
        return run
    return make


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=50)
    ap.add_argument("--csv", help="write results here as well")
    args = ap.parse_args(argv)
    it = args.iterations
    cases = {
        "grid_build_query": case_grid,
        "diffusion_step": case_diffusion,
        "sir": case_preset("sir", it),
        "proliferation": case_preset("proliferation", it),
        "spheroid": case_preset("spheroid", it, n_cells=1000),
        "clustering": case_preset("clustering", it, n_cells=1000),
    }
    rows = []
    print(f"{'case':<18}{'numba s':>12}{'numpy s':>12}{'speedup':>10}  match")
    for name, make in cases.items():
        res = {b: best_of(make(b), args.repeat) for b in BACKENDS}
        tn, on = res["numba"]
        tp, op = res["numpy"]
        match = on == op
        rows.append([name, f"{tn:.6f}", f"{tp:.6f}", f"{tp / tn:.2f}", match])
        print(f"{name:<18}{tn:>12.4f}{tp:>12.4f}{tp / tn:>10.2f}  {match}", flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "numba_s", "numpy_s", "speedup", "outputs_match"])
            w.writerows(rows)
    return 0 if all(r[-1] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
