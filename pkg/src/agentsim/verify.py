"""Oracle suites: each checks an engine component against an independent reference.

Every suite returns a :class:`SuiteResult` with the measured quantities, so
the CLI can print them and the acceptance tests can assert on them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._jit import BACKENDS
from .analysis import heat_kernel, sir_ode_oracle, to_csv
from .diffusion import DiffusionGrid
from .engine import registry
from .engine.simulation import Driver, SimConfig, simulate
from .engine.store import AgentStore, BehaviorInstance
from .spatial.grid import UniformGrid
from .spatial.morton import compute_morton_offsets, enumerate_codes


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        parts = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s): {parts}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> SuiteResult:
    t0 = time.perf_counter()
    ok, details = fn()
    return SuiteResult(name, bool(ok), details, time.perf_counter() - t0)


# -- neighbor search -----------------------------------------------------------


def verify_grid(instances: int = 200, max_agents: int = 1000, seed: int = 0, backends=None) -> SuiteResult:
    """Uniform-grid neighbor sets equal brute-force sets on random instances."""

    def run():
        rng = np.random.default_rng(seed)
        mismatches = 0
        queries = 0
        for b in backends or BACKENDS:
            grid = UniformGrid(b)
            for _ in range(instances):
                n = int(rng.integers(1, max_agents + 1))
                extent = float(rng.uniform(5.0, 100.0))
                pos = rng.uniform(-extent, extent, size=(n, 3))
                if rng.random() < 0.2:
                    # clumped agents and duplicated positions
                    pos[: n // 2] = pos[0] + rng.normal(scale=0.5, size=(n // 2, 3))
                    pos[-1] = pos[0]
                radius = float(rng.uniform(0.5, 20.0))
                grid.build(pos, n, radius)
                # all-pairs distances as the oracle
                d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
                within = d2 <= radius * radius
                np.fill_diagonal(within, False)
                for i in range(n):
                    queries += 1
                    if not np.array_equal(np.sort(grid.neighbors(i, radius)), np.flatnonzero(within[i])):
                        mismatches += 1
        return mismatches == 0, {"instances": instances * len(backends or BACKENDS), "queries": queries,
                                 "mismatches": mismatches}

    return _timed("grid", run)


# -- morton ------------------------------------------------------------------


def verify_morton(max_dim: int = 9) -> SuiteResult:
    """Gap-offset reconstruction equals enumeration for every grid up to ``max_dim``^3."""

    def run():
        bad = []
        checked = 0
        for x in range(1, max_dim + 1):
            for y in range(1, max_dim + 1):
                for z in range(1, max_dim + 1):
                    checked += 1
                    if not np.array_equal(compute_morton_offsets((x, y, z)).codes(), enumerate_codes((x, y, z))):
                        bad.append((x, y, z))
        flat = compute_morton_offsets((3, 3)).codes().tolist()
        flat_ok = flat == [0, 1, 2, 3, 4, 6, 8, 9, 12]
        return not bad and flat_ok, {"grids": checked, "mismatches": len(bad), "codes_3x3": flat}

    return _timed("morton", run)


# -- parallel removal ------------------------------------------------------------


def verify_removal(seeds: int = 100, max_size: int = 10_000, workers=(1, 2, 8), aux_factor: int = 4) -> SuiteResult:
    """Survivors of the parallel scheme equal a serial filter; scratch space is bounded."""

    def run():
        mismatches = 0
        aux_violations = 0
        cases = 0
        beh = (BehaviorInstance(registry.GROW_DIVIDE.tag),)
        for s in range(seeds):
            rng = np.random.default_rng(s)
            n = int(rng.integers(1, max_size + 1))
            keys = rng.permutation(n).astype(np.uint64)
            k = int(rng.integers(0, n + 1))
            gone = rng.choice(n, size=k, replace=False)
            expected = np.sort(np.delete(keys, gone))
            for w in workers:
                store = AgentStore()
                store.append_columns({"position": np.zeros((n, 3)), "diameter": np.ones(n),
                                      "kind": np.full(n, registry.CELL.tag, dtype=np.int32), "rng_key": keys},
                                     [beh] * n)
                parts = np.array_split(rng.permutation(gone), w)
                store.commit_removals(parts, w)
                cases += 1
                if not np.array_equal(np.sort(store.rng_key[: store.count]), expected):
                    mismatches += 1
                if store.last_removal_aux > aux_factor * k:
                    aux_violations += 1
        return mismatches == 0 and aux_violations == 0, {"cases": cases, "mismatches": mismatches,
                                                         "aux_violations": aux_violations}

    return _timed("removal", run)


# -- codec -------------------------------------------------------------------


def random_records(rng: np.random.Generator, n: int, gid_start: int = 0):
    from .engine.store import AgentRecord, GlobalAgentId

    kinds = [registry.CELL, registry.PERSON, registry.TUMOR_CELL, registry.SOMA_CELL]
    tags = [registry.GROW_DIVIDE, registry.INFECTION, registry.RECOVERY, registry.RANDOM_MOVEMENT,
            registry.TUMOR_BEHAVIOR, registry.SECRETION, registry.CHEMOTAXIS]
    out = []
    for i in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        nb = int(rng.integers(0, 4))
        picks = rng.choice(len(tags), size=nb, replace=False)
        behaviors = [BehaviorInstance(tags[j].tag, tuple(rng.normal(size=int(rng.integers(0, 4))).tolist()),
                                      bool(rng.integers(2)), bool(rng.integers(2))) for j in picks]
        out.append(AgentRecord(
            position=rng.normal(scale=100.0, size=3),
            diameter=float(rng.uniform(0.1, 20.0)),
            kind_tag=kind.tag,
            behaviors=behaviors,
            static_flag=bool(rng.integers(2)),
            state=int(rng.integers(0, 3)) if "state" in kind.fields else 0,
            age=int(rng.integers(0, 500)) if "age" in kind.fields else 0,
            rng_key=int(rng.integers(0, 2**63)),
            global_id=GlobalAgentId(int(rng.integers(0, 8)), gid_start + i),
            disturbed=int(rng.integers(0, 4)),
            nonzero_forces=int(rng.integers(0, 10)),
        ))
    return out


def _key(r):
    return (r.global_id.rank, r.global_id.counter)


def verify_codec(n: int = 1000, pairs: int = 1000, seed: int = 0) -> SuiteResult:
    """Serialization round trip and delta set-equality, including the edge cases."""
    from .exchange.delta import CODECS, Reference, decode_message, delta_encode, unpack_message
    from .exchange.serialization import columns_to_records, deserialize, encode_blocks, records_to_columns, serialize

    def blocks_of(recs):
        return encode_blocks(*records_to_columns(recs))

    def run():
        rng = np.random.default_rng(seed)
        recs = random_records(rng, n)
        roundtrip = deserialize(serialize(recs)) == recs
        failures = 0
        zero_body = True
        for p in range(pairs):
            pool = random_records(rng, int(rng.integers(0, 40)), gid_start=0)
            mode = p % 5
            ref = [r for r in pool if rng.random() < 0.6]
            if mode == 0:  # all new
                ref, msg = pool[: len(pool) // 2], pool[len(pool) // 2:]
            elif mode == 1:  # all removed
                msg = []
            elif mode == 2:  # identical
                msg = list(ref)
            elif mode == 3:  # permuted
                msg = [ref[i] for i in rng.permutation(len(ref))]
            else:  # mixed, with updated state for some agents
                msg = [r for r in pool if rng.random() < 0.6]
                for r in msg:
                    if rng.random() < 0.5:
                        r.position = r.position + 1.0
            reference = Reference(1 + p, blocks_of(ref))
            codec = CODECS["zlib" if p % 2 else "identity"]
            wire, _ = delta_encode(blocks_of(msg), reference, codec)
            batch, _, _ = decode_message(wire, reference, codec)
            got = sorted(columns_to_records(batch), key=_key)
            if got != sorted(msg, key=_key):
                failures += 1
            if mode == 2:
                _, _, body = unpack_message(wire, codec)
                zero_body &= not any(body)
        ok = roundtrip and failures == 0 and zero_body
        return ok, {"agents": n, "roundtrip": roundtrip, "pairs": pairs, "delta_failures": failures,
                    "identical_body_zero": zero_body}

    return _timed("codec", run)


# -- SIR -----------------------------------------------------------------------


def verify_sir(seeds=tuple(range(1, 11)), tolerance: float = 0.075, steps: int | None = None,
               backend: str | None = None) -> SuiteResult:
    """Mean S/I/R over seeds against the RK4 solution of the SIR equations."""
    from .models.sir import SirModel

    def run():
        model = SirModel() if steps is None else SirModel(steps=steps)
        p = model.params
        curves = []
        for s in seeds:
            rep = simulate(model, p.steps, SimConfig(seed=s, backend=backend))
            curves.append(np.stack([rep.series[c] for c in ("susceptible", "infected", "recovered")]))
        mean = np.mean(curves, axis=0)
        S, I, R = sir_ode_oracle(p.beta, p.gamma, p.population, p.n_susceptible, p.n_infected, p.steps)
        dev = np.abs(mean - np.stack([S, I, R])).max(axis=1) / p.population
        return bool(dev.max() <= tolerance), {"seeds": len(seeds), "max_dev_S": float(dev[0]),
                                              "max_dev_I": float(dev[1]), "max_dev_R": float(dev[2]),
                                              "tolerance": tolerance}

    return _timed("sir", run)


def verify_r0(target: float = 12.9, tol: float = 0.1) -> SuiteResult:
    from .models.sir import MEASLES

    def run():
        r0 = MEASLES.beta / MEASLES.gamma
        return abs(r0 - target) <= tol, {"r0": r0, "target": target}

    return _timed("r0", run)


# -- diffusion -------------------------------------------------------------------


def point_source_errors(resolutions=(32, 64, 128), nu: float = 1.0, half_width: float = 80.0,
                        probe=(30.0, 10.0, 0.0), horizon: float = 2.0, backend: str | None = None):
    """Max error at the probe over time, for a unit point source at the origin.

    The run lasts ``horizon`` times the analytic peak time at the probe. Errors
    are relative to the analytic peak concentration there.
    """
    r2 = float(np.dot(probe, probe))
    t_peak = r2 / (6.0 * nu)
    peak = heat_kernel(nu, t_peak, math.sqrt(r2))
    out = []
    for n in resolutions:
        dx = 2.0 * half_width / n
        g = DiffusionGrid("point", -half_width, half_width, n, nu, dt=dx * dx / (8.0 * nu), backend=backend)
        src = g.nearest_node((0.0, 0.0, 0.0))
        pid = g.nearest_node(probe)
        if not np.allclose(g.node_position(*src), 0.0) or not np.allclose(g.node_position(*pid), probe):
            raise ValueError(f"resolution {n} does not put nodes on the source and probe")
        g.concentrations[src] = 1.0 / g.spacing**3
        steps = int(math.ceil(horizon * t_peak / g.dt))
        err = 0.0
        for k in range(1, steps + 1):
            g.step()
            err = max(err, abs(g.concentrations[pid] - heat_kernel(nu, k * g.dt, math.sqrt(r2))))
        out.append(err / peak)
    return out


def verify_diffusion(resolutions=(32, 64, 128), max_rel_error: float = 0.10, backend: str | None = None) -> SuiteResult:
    def run():
        errs = point_source_errors(resolutions, backend=backend)
        decreasing = all(b < a for a, b in zip(errs, errs[1:]))
        return decreasing and errs[-1] <= max_rel_error, {
            **{f"rel_error_{n}": e for n, e in zip(resolutions, errs)}, "strictly_decreasing": decreasing}

    return _timed("diffusion", run)


# -- static detection ----------------------------------------------------------


def verify_static(iterations: int = 120, tolerance: float = 1e-9, backend: str | None = None) -> SuiteResult:
    """Proliferation to rest with static detection on and off: trajectories agree."""
    from .models.cells import ProliferationModel

    def trajectory(detect):
        d = Driver(ProliferationModel(), SimConfig(detect_static=detect, backend=backend))
        out = []
        skipped = 0
        for _ in range(iterations):
            d.step()
            s = d.engines[0].store
            skipped += int(s.static[: s.count].sum())
            out.append(d.view.column("position").copy())
        d.close()
        return out, skipped

    def run():
        a, _ = trajectory(False)
        b, skipped = trajectory(True)
        same_shape = all(x.shape == y.shape for x, y in zip(a, b))
        dev = max(float(np.abs(x - y).max()) for x, y in zip(a, b)) if same_shape else math.inf
        at_rest = bool(np.array_equal(a[-1], a[-2]))
        return dev <= tolerance and at_rest, {"iterations": iterations, "max_dev": dev, "at_rest": at_rest,
                                              "agents": len(a[-1]), "static_agent_iterations": skipped}

    return _timed("static", run)


# -- distribution -----------------------------------------------------------------

# default presets at their default lengths
TRANSPARENCY_CASES = {
    "sir": ({}, 1000),
    "proliferation": ({}, 100),
    "spheroid": ({}, 100),
    "clustering": ({}, 2000),
}


def verify_transparency(cases=None, ranks=(1, 2, 4), backend: str | None = None) -> SuiteResult:
    """Byte-identical observable CSVs for every preset across rank counts."""
    from .models import get_preset

    def run():
        details = {}
        ok = True
        for name, (overrides, iterations) in (cases or TRANSPARENCY_CASES).items():
            csvs = []
            for r in ranks:
                rep = simulate(get_preset(name, **overrides), iterations, SimConfig(ranks=r, backend=backend))
                csvs.append(to_csv(rep.series))
            same = all(c == csvs[0] for c in csvs)
            details[name] = "identical" if same else "differ"
            ok &= same
        return ok, details

    return _timed("transparency", run)


# -- clustering ------------------------------------------------------------------


def verify_clustering(seeds=(1, 2, 3), iterations: int = 2000, min_gain: float = 0.15,
                      backend: str | None = None) -> SuiteResult:
    from .models.clustering import ClusteringModel

    def run():
        gains = []
        for s in seeds:
            rep = simulate(ClusteringModel(sample_every=iterations), iterations, SimConfig(seed=s, backend=backend))
            f = rep.series["same_type_fraction"]
            gains.append(float(f[-1] - f[0]))
        return min(gains) >= min_gain, {"gains": [round(g, 4) for g in gains], "min_gain": min_gain}

    return _timed("clustering", run)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "grid": verify_grid,
    "morton": verify_morton,
    "removal": verify_removal,
    "codec": verify_codec,
    "sir": verify_sir,
    "r0": verify_r0,
    "diffusion": verify_diffusion,
    "static": verify_static,
    "transparency": verify_transparency,
    "clustering": verify_clustering,
}
