import csv
import json
import subprocess
import sys

import pytest

from agentsim.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main(["run", *args, "--out", str(out), "--quiet"])
    return code, out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_sir_default_run_writes_every_iteration(tmp_path):
    code, out = run(tmp_path, "sir")
    assert code == EXIT_OK
    table = rows(out / "timeseries.csv")
    assert table[0] == ["iteration", "susceptible", "infected", "recovered"]
    assert len(table) == 1002
    assert [r[0] for r in table[1:3]] == ["0", "1"] and table[-1][0] == "1000"
    for name in ("config.ini", "timing.csv", "summary.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 1000 and summary["final_agents"] == 2020


def test_timing_table_covers_categories(tmp_path):
    _, out = run(tmp_path, "proliferation", "--iterations", "5")
    table = rows(out / "timing.csv")
    assert [r[0] for r in table[1:]] == ["agent_ops", "environment", "sorting", "exchange", "setup_teardown"]
    assert sum(float(r[3]) for r in table[1:]) == pytest.approx(1.0, abs=1e-3)


def test_rank_count_does_not_change_output(tmp_path):
    _, one = run(tmp_path, "sir", "--iterations", "60", "--set", "n_susceptible=500", name="one")
    _, two = run(tmp_path, "sir", "--iterations", "60", "--set", "n_susceptible=500", "--ranks", "2", name="two")
    assert (one / "timeseries.csv").read_bytes() == (two / "timeseries.csv").read_bytes()
    summary = json.loads((two / "summary.json").read_text())
    assert summary["exchange"]["aura_bytes"] > 0


def test_zero_iterations(tmp_path):
    code, out = run(tmp_path, "proliferation", "--iterations", "0")
    assert code == EXIT_OK
    assert rows(out / "timeseries.csv") == [["iteration", "agents"], ["0", "27"]]


@pytest.mark.parametrize("argv", [
    ["run", "nope"],
    ["run", "sir", "--iterations", "-1"],
    ["run", "sir", "--workers", "0"],
    ["run", "sir", "--mode", "sideways"],
    ["run", "sir", "--set", "no_such_param=1"],
    ["run", "sir", "--set", "infection_radius=abc"],
    ["run", "sir", "--set", "infection_probability=2"],
    ["run", "sir", "--delta", "maybe"],
    ["run", "sir", "--config", "/nonexistent.ini"],
    ["verify", "nope"],
    ["bench", "nope"],
    ["bench", "sir", "--workers", "x"],
    ["bench", "sir", "--set", "oops"],
    [],
])
def test_usage_errors(argv, tmp_path, capsys):
    if argv[:1] == ["run"]:
        argv = argv + ["--out", str(tmp_path / "o")]
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[run]\npreset = sir\niterations = 7\nseed = 3\nsort_frequency = off\n\n"
                   "[sir]\nn_susceptible = 50\nn_infected = 2\n")
    code, out = run(tmp_path, "--config", str(ini), "--iterations", "4", "--set", "n_infected=5")
    assert code == EXIT_OK
    table = rows(out / "timeseries.csv")
    assert len(table) == 6
    assert int(table[1][1]) + int(table[1][2]) == 55
    echo = (out / "config.ini").read_text()
    assert "iterations = 4" in echo and "seed = 3" in echo
    assert "n_susceptible = 50" in echo and "n_infected = 5" in echo


def test_echoed_config_reproduces_run(tmp_path):
    _, first = run(tmp_path, "spheroid", "--iterations", "6", "--set", "n_cells=80", "--seed", "11", name="a")
    code, second = run(tmp_path, "--config", str(first / "config.ini"), name="b")
    assert code == EXIT_OK
    assert (first / "timeseries.csv").read_bytes() == (second / "timeseries.csv").read_bytes()


def test_run_without_preset_uses_default(tmp_path):
    code, out = run(tmp_path, "--iterations", "1", "--set", "n_susceptible=10")
    assert code == EXIT_OK
    assert rows(out / "timeseries.csv")[0][1] == "susceptible"


def test_optional_parameter_accepts_value_or_blank(tmp_path):
    code, out = run(tmp_path, "spheroid", "--iterations", "1", "--set", "n_cells=10", "--set", "seed_radius=30")
    assert code == EXIT_OK
    assert "seed_radius = 30.0" in (out / "config.ini").read_text()
    assert run(tmp_path, "spheroid", "--iterations", "1", "--set", "seed_radius=", name="b")[0] == EXIT_OK


def test_unknown_run_key_in_config(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[run]\npreset = sir\nspeed = 3\n")
    assert run(tmp_path, "--config", str(ini))[0] == EXIT_USAGE


def test_verify_passing_suite(tmp_path, capsys):
    js = tmp_path / "r.json"
    assert main(["verify", "morton", "--json", str(js)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("PASS morton")
    assert json.loads(js.read_text())[0]["passed"] is True


def test_verify_failing_suite_exit_code(monkeypatch, capsys):
    from agentsim import verify

    monkeypatch.setitem(verify.SUITES, "morton", lambda: verify.SuiteResult("morton", False, {"why": "forced"}))
    assert main(["verify", "morton"]) == EXIT_FAIL
    assert capsys.readouterr().out.startswith("FAIL morton")


def test_bench_writes_tables(tmp_path):
    out = tmp_path / "bench"
    code = main(["bench", "spheroid", "--iterations", "3", "--workers", "1,2", "--ranks", "1,2",
                 "--delta", "on,off", "--set", "n_cells=60", "--out", str(out)])
    assert code == EXIT_OK
    summary = rows(out / "bench.csv")
    # ranks=1 runs once per worker count, ranks=2 once per delta setting
    assert len(summary) == 1 + 2 * (1 + 2)
    assert summary[0][:4] == ["run", "preset", "workers", "ranks"]
    per_iter = rows(out / "bench_iterations.csv")
    assert len(per_iter) == 1 + 6 * 3
    finals = {r[-1] for r in summary[1:]}
    assert len(finals) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "agentsim", "run", "proliferation", "--iterations", "2",
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert "proliferation: 2 iterations" in proc.stdout


def test_bench_delta_shrinks_clustering_aura(tmp_path):
    out = tmp_path / "bench"
    code = main(["bench", "clustering", "--iterations", "12", "--workers", "1", "--ranks", "2", "--delta", "on,off",
                 "--sort-frequency", "off,1,10", "--set", "n_cells=200", "--set", "space_length=120",
                 "--set", "resolution=24", "--out", str(out)])
    assert code == EXIT_OK
    table = rows(out / "bench.csv")
    head = table[0]
    recs = [dict(zip(head, r)) for r in table[1:]]
    assert sorted({r["sort_frequency"] for r in recs}) == ["1", "10", "off"]
    on = [int(r["aura_bytes"]) for r in recs if r["delta"] == "on"]
    off = [int(r["aura_bytes"]) for r in recs if r["delta"] == "off"]
    assert len(on) == len(off) == 3
    assert max(on) < min(off)
