"""Command-line entry point: ``agentsim run|verify|bench``.

Exit codes: 0 ok, 1 a verification suite failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import emit_csv
from .engine.context import COPY, IN_PLACE
from .engine.simulation import TIMING_CATEGORIES, SimConfig, simulate
from .models import PRESETS, get_preset

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

RUN_KEYS = ("preset", "iterations", "seed", "workers", "ranks", "partition_factor", "delta", "compress",
            "ref_update", "mode", "row_wise", "sort_frequency", "detect_static", "backend", "init_mode", "out")


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _sort_frequency(text) -> int:
    t = str(text).strip().lower()
    if t in ("off", "none", "0"):
        return 0
    try:
        f = int(t)
    except ValueError:
        raise UsageError(f"sort frequency must be 'off' or a positive integer, got {text!r}") from None
    if f < 0:
        raise UsageError("sort frequency must be nonnegative")
    return f


def _int(name):
    def conv(text):
        try:
            return int(text)
        except (TypeError, ValueError):
            raise UsageError(f"{name} must be an integer, got {text!r}") from None
    return conv


CONVERTERS = {
    "iterations": _int("iterations"),
    "seed": _int("seed"),
    "workers": _int("workers"),
    "ranks": _int("ranks"),
    "partition_factor": _int("partition_factor"),
    "ref_update": _int("ref_update"),
    "delta": _bool,
    "compress": _bool,
    "row_wise": _bool,
    "detect_static": _bool,
    "sort_frequency": _sort_frequency,
}


@dataclasses.dataclass
class RunConfig:
    preset: str = "sir"
    iterations: int | None = None
    seed: int = 1
    workers: int = 1
    ranks: int = 1
    partition_factor: int = 1
    delta: bool = True
    compress: bool = True
    ref_update: int = 10
    mode: str = COPY
    row_wise: bool = False
    sort_frequency: int = 0
    detect_static: bool = False
    backend: str | None = None
    init_mode: str = "filtered"
    out: str = "out"
    params: dict = dataclasses.field(default_factory=dict)

    def sim_config(self) -> SimConfig:
        return SimConfig(seed=self.seed, workers=self.workers, mode=self.mode, row_wise=self.row_wise,
                         sort_frequency=self.sort_frequency, detect_static=self.detect_static,
                         backend=self.backend, ranks=self.ranks, partition_factor=self.partition_factor,
                         delta=self.delta, compress=self.compress, ref_update=self.ref_update,
                         init_mode=self.init_mode)

    def model(self):
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        try:
            return get_preset(self.preset, **self.params)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid parameter for {self.preset}: {exc}") from None

    def steps(self, model) -> int:
        if self.iterations is not None:
            return self.iterations
        return int(getattr(model.params, "steps", 100))

    def validate(self) -> None:
        if self.mode not in (COPY, IN_PLACE):
            raise UsageError(f"mode must be {COPY} or {IN_PLACE}")
        if self.iterations is not None and self.iterations < 0:
            raise UsageError("iterations must be >= 0")
        for name in ("workers", "ranks", "partition_factor", "ref_update"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.backend not in (None, "numba", "numpy"):
            raise UsageError("backend must be numba or numpy")
        if self.init_mode not in ("filtered", "proportional"):
            raise UsageError("init mode must be filtered or proportional")

    def to_ini(self, model=None) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {k: _ini_value(getattr(self, k)) for k in RUN_KEYS}
        if model is not None and dataclasses.is_dataclass(model.params):
            cp[self.preset] = {f.name: _ini_value(getattr(model.params, f.name))
                               for f in dataclasses.fields(model.params)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _ini_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def convert_param(preset: str, key: str, text: str):
    """Parse ``text`` to the type of the preset's default for ``key``."""
    defaults = PRESETS[preset].default_params()
    if defaults is None or key not in {f.name for f in dataclasses.fields(defaults)}:
        raise UsageError(f"preset {preset} has no parameter {key!r}")
    current = getattr(defaults, key)
    if current is None:
        # optional numeric parameter; blank or "none" keeps it unset
        if text.strip().lower() in ("", "none"):
            return None
        current = 0.0
    try:
        if isinstance(current, bool):
            return _bool(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise UsageError(f"parameter {key}: cannot parse {text!r}") from None
    return text


def load_config(path) -> tuple[dict, dict]:
    """Return (run settings, per-preset parameter sections) from an INI file."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    run = dict(cp["run"]) if cp.has_section("run") else {}
    unknown = set(run) - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"unknown [run] keys: {', '.join(sorted(unknown))}")
    sections = {s: dict(cp[s]) for s in cp.sections() if s != "run"}
    return run, sections


def resolve_config(args) -> RunConfig:
    run, sections = load_config(args.config) if args.config else ({}, {})
    values = {}
    for k, v in run.items():
        values[k] = CONVERTERS[k](v) if k in CONVERTERS else (v or None)
    for k in RUN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    cfg = RunConfig(**values)
    if cfg.preset not in PRESETS:
        raise UsageError(f"unknown preset {cfg.preset!r}; choose from {', '.join(PRESETS)}")
    params = {k: convert_param(cfg.preset, k, v) for k, v in sections.get(cfg.preset, {}).items()}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = convert_param(cfg.preset, k.strip(), v.strip())
    cfg.params = params
    cfg.validate()
    return cfg


# -- run -------------------------------------------------------------------------


def write_timing(report, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "total_seconds", "mean_seconds_per_iteration", "share"])
        totals = report.timing_summary()
        grand = sum(totals.values()) or 1.0
        n = max(report.iterations, 1)
        for k in TIMING_CATEGORIES:
            tot = totals.get(k, 0.0)
            w.writerow([k, f"{tot:.6f}", f"{tot / n:.6e}", f"{tot / grand:.4f}"])


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    model = cfg.model()
    steps = cfg.steps(model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(model))
    t0 = time.perf_counter()
    report = simulate(model, steps, cfg.sim_config())
    wall = time.perf_counter() - t0
    emit_csv(report.series, out / "timeseries.csv")
    write_timing(report, out / "timing.csv")
    summary = {"preset": cfg.preset, "iterations": steps, "wall_seconds": wall,
               "final_agents": report.agent_counts[-1] if report.agent_counts else 0,
               "op_calls": report.op_calls}
    if report.exchange_stats:
        st = report.exchange_stats
        summary["exchange"] = {"aura_bytes": int(sum(st["aura_bytes"])),
                               "migration_bytes": int(sum(st["migration_bytes"])),
                               **{k: v for k, v in st.items() if isinstance(v, int)}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"{cfg.preset}: {steps} iterations in {wall:.2f}s, {summary['final_agents']} agents -> {out}")
    return EXIT_OK


# -- verify ----------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verify import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    for n in names:
        if n not in SUITES:
            raise UsageError(f"unknown suite {n!r}; choose from all, {', '.join(SUITES)}")
    results = []
    for n in names:
        r = SUITES[n]()
        results.append(r)
        print(r.line(), flush=True)
    if args.json:
        Path(args.json).write_text(json.dumps([dataclasses.asdict(r) for r in results], indent=2, default=str))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- bench -----------------------------------------------------------------------


def _csv_list(conv):
    def parse(text):
        try:
            return [conv(t) for t in str(text).split(",") if t.strip()]
        except UsageError:
            raise
        except ValueError:
            raise UsageError(f"cannot parse list {text!r}") from None
    return parse


def cmd_bench(args) -> int:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    params = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        params[k.strip()] = convert_param(args.preset, k.strip(), v.strip())
    workers = _csv_list(_int("workers"))(args.workers)
    ranks = _csv_list(_int("ranks"))(args.ranks)
    deltas = _csv_list(_bool)(args.delta)
    sorts = _csv_list(_sort_frequency)(args.sort_frequency)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    iter_rows = []
    run_id = 0
    for w in workers:
        for r in ranks:
            for d in deltas:
                if r == 1 and d != deltas[0]:
                    continue  # delta only matters with several ranks
                for sf in sorts:
                    model = get_preset(args.preset, **params)
                    cfg = SimConfig(seed=args.seed, workers=w, ranks=r, delta=d, sort_frequency=sf,
                                    backend=args.backend)
                    rep = simulate(model, args.iterations, cfg)
                    secs = np.asarray(rep.iteration_seconds)
                    aura = rep.exchange_stats.get("aura_bytes", [0] * len(secs))
                    mig = rep.exchange_stats.get("migration_bytes", [0] * len(secs))
                    for i in range(len(secs)):
                        iter_rows.append([run_id, i, f"{secs[i]:.6e}", aura[i], mig[i]])
                    summary_rows.append([run_id, args.preset, w, r, "on" if d else "off", sf or "off",
                                         args.iterations, f"{np.median(secs) if secs.size else 0:.6e}",
                                         f"{secs.sum():.6f}", int(np.sum(aura)),
                                         int(np.median(aura)) if len(aura) else 0, int(np.sum(mig)),
                                         rep.agent_counts[-1]])
                    print(",".join(map(str, summary_rows[-1])), flush=True)
                    run_id += 1
    with open(out / "bench.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["run", "preset", "workers", "ranks", "delta", "sort_frequency", "iterations",
                     "median_iteration_s", "total_s", "aura_bytes", "median_aura_bytes", "migration_bytes",
                     "final_agents"])
        wr.writerows(summary_rows)
    with open(out / "bench_iterations.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["run", "iteration", "seconds", "aura_bytes", "migration_bytes"])
        wr.writerows(iter_rows)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agentsim", description="Agent-based simulation engine.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="run a preset and write artifacts")
    r.add_argument("preset", nargs="?", default=None, help=f"one of {', '.join(PRESETS)}")
    r.add_argument("--config", help="INI file with a [run] section and per-preset sections")
    r.add_argument("--iterations", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--ranks", type=int)
    r.add_argument("--partition-factor", dest="partition_factor", type=int)
    r.add_argument("--delta", type=_bool, metavar="on|off")
    r.add_argument("--compress", type=_bool, metavar="on|off")
    r.add_argument("--ref-update", dest="ref_update", type=int)
    r.add_argument("--mode", choices=(COPY, IN_PLACE))
    r.add_argument("--row-wise", dest="row_wise", action="store_const", const=True)
    r.add_argument("--sort-frequency", dest="sort_frequency", type=_sort_frequency, metavar="off|N")
    r.add_argument("--detect-static", dest="detect_static", action="store_const", const=True)
    r.add_argument("--backend", choices=("numba", "numpy"))
    r.add_argument("--init-mode", dest="init_mode", choices=("filtered", "proportional"))
    r.add_argument("--out")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a preset parameter")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run an oracle suite")
    v.add_argument("suite", help="suite name or 'all'")
    v.add_argument("--json", help="also write results as JSON to this path")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="sweep workers, ranks and toggles; write timing CSVs")
    b.add_argument("preset")
    b.add_argument("--iterations", type=int, default=50)
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--workers", default="1,2,4")
    b.add_argument("--ranks", default="1")
    b.add_argument("--delta", default="on")
    b.add_argument("--sort-frequency", dest="sort_frequency", default="off")
    b.add_argument("--backend", choices=("numba", "numpy"))
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--out", default="bench-out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.command == "run" and args.preset is not None and args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        return args.func(args)
    except UsageError as exc:
        print(f"agentsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
