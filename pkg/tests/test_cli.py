"""Command line behavior, exit codes, and output files."""

import csv
import json
import os

import pytest

from schedtune.cli import main

from conftest import workload_path

FAST = ["--hyper", "top_k=8", "--hyper", "min_tracks=4",
        "--hyper", "initial_tracks=8", "--hyper", "cull_window=5",
        "--hyper", "episode_len=10", "--hyper", "hidden=16",
        "--hyper", "minibatch=32", "--levels", "2"]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def run_tune(out, workload="gemm_64.yaml", trials="32", extra=()):
    return main(["tune", "--workload", workload_path(workload),
                 "--trials", trials, "--out", str(out), *FAST, *extra])


# -- tune --------------------------------------------------------------------


def test_tune_produces_outputs(tmp_path, capsys):
    rc = run_tune(tmp_path / "run", workload="gemm_s.yaml", trials="200",
                  extra=["--hyper", "top_k=16"])
    assert rc == 0
    out = tmp_path / "run"
    for fname in ("trajectory.jsonl", "checkpoint.bin", "model.txt",
                  "summary.json"):
        assert (out / fname).exists(), fname
    summary = json.loads((out / "summary.json").read_text())
    assert summary["trials_used"] == 200
    assert summary["f_estimate"] is not None
    assert len(summary["subgraphs"]) == 4
    printed = capsys.readouterr().out
    assert "trials=200" in printed
    assert "wall_time_s=" in printed


def test_tune_seed_repeats_bitwise(tmp_path):
    assert run_tune(tmp_path / "a") == 0
    assert run_tune(tmp_path / "b") == 0
    for f in ("trajectory.jsonl", "checkpoint.bin", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == \
            (tmp_path / "b" / f).read_bytes(), f


def test_tune_interrupt_resume_identical(tmp_path):
    assert run_tune(tmp_path / "full") == 0
    assert run_tune(tmp_path / "part", extra=["--max-rounds", "2"]) == 0
    rc = main(["tune", "--resume", str(tmp_path / "part" / "checkpoint.bin"),
               "--out", str(tmp_path / "part")])
    assert rc == 0
    for f in ("trajectory.jsonl", "checkpoint.bin", "summary.json"):
        assert (tmp_path / "full" / f).read_bytes() == \
            (tmp_path / "part" / f).read_bytes(), f


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SCHEDTUNE_OUT", str(tmp_path / "envout"))
    rc = main(["tune", "--workload", workload_path("gemm_64.yaml"),
               "--trials", "16", *FAST])
    assert rc == 0
    assert (tmp_path / "envout" / "summary.json").exists()


def test_sim_param_overrides(tmp_path):
    rc = run_tune(tmp_path / "run", trials="16",
                  extra=["--sim", "cores=4", "--sim", "noise_sigma=0.05"])
    assert rc == 0
    events = [json.loads(l) for l
              in (tmp_path / "run" / "trajectory.jsonl").open()]
    start = events[0]
    assert start["event"] == "session_start"


# -- exit codes --------------------------------------------------------------


def test_missing_workload_flag_is_config_error(capsys):
    assert main(["tune", "--trials", "8"]) == 2
    assert "required" in capsys.readouterr().err


def test_nonexistent_workload_file(tmp_path, capsys):
    rc = main(["tune", "--workload", str(tmp_path / "nope.yaml"),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_bad_cull_fraction_rejected(tmp_path, capsys):
    rc = run_tune(tmp_path / "o", extra=["--hyper", "cull_fraction=1.5"])
    assert rc == 2
    assert "cull_fraction" in capsys.readouterr().err


def test_unknown_hyper_rejected(tmp_path, capsys):
    rc = run_tune(tmp_path / "o", extra=["--hyper", "warp_speed=9"])
    assert rc == 2
    assert "warp_speed" in capsys.readouterr().err


def test_malformed_hyper_rejected(tmp_path):
    assert run_tune(tmp_path / "o", extra=["--hyper", "top_k"]) == 2


def test_unknown_sim_param_rejected(tmp_path):
    assert run_tune(tmp_path / "o", extra=["--sim", "ghz=9"]) == 2


def test_compare_needs_two_searchers(tmp_path):
    rc = main(["compare", "--workload", workload_path("gemm_64.yaml"),
               "--searchers", "rl", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_compare_unknown_searcher(tmp_path):
    rc = main(["compare", "--workload", workload_path("gemm_64.yaml"),
               "--searchers", "rl,simulated-annealing",
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_sweep_empty_values(tmp_path):
    rc = main(["sweep", "--workload", workload_path("gemm_64.yaml"),
               "--param", "cull_window", "--values", ",",
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_broken_measurer_command_is_runtime_error(tmp_path, capsys):
    rc = main(["tune", "--workload", workload_path("gemm_64.yaml"),
               "--trials", "8", "--out", str(tmp_path / "o"), *FAST,
               "--backend", "external",
               "--measure-cmd", "/nonexistent/measurer-binary"])
    assert rc == 3
    assert "runtime failure" in capsys.readouterr().err


def test_external_backend_needs_command(tmp_path):
    rc = main(["tune", "--workload", workload_path("gemm_64.yaml"),
               "--out", str(tmp_path / "o"), "--backend", "external"])
    assert rc == 2


# -- compare -----------------------------------------------------------------


def test_compare_outputs(tmp_path):
    out = tmp_path / "cmp"
    rc = main(["compare", "--workload", workload_path("gemm_64.yaml"),
               "--searchers", "rl,random", "--seeds", "0-1",
               "--trials", "32", "--out", str(out), *FAST])
    assert rc == 0
    for sub in ("rl-s0", "rl-s1", "random-s0", "random-s1"):
        assert (out / sub / "trajectory.jsonl").exists()
        assert (out / sub / "summary.json").exists()

    header, rows = read_csv(out / "curves.csv")
    assert header == ["searcher", "seed", "trials", "f_estimate"]
    assert {r[0] for r in rows} == {"rl", "random"}

    header, rows = read_csv(out / "final.csv")
    assert header == ["searcher", "seed", "trials_used", "f_estimate",
                      "normalized_performance", "trials_to_baseline"]
    assert len(rows) == 4
    for seed in ("0", "1"):
        norms = [float(r[4]) for r in rows if r[1] == seed and r[4]]
        assert norms and max(norms) == pytest.approx(1.0)
        assert all(0.0 < n <= 1.0 for n in norms)
    # the baseline searcher reaches its own final value somewhere
    base_rows = [r for r in rows if r[0] == "rl"]
    assert all(r[5] != "" for r in base_rows)


# -- sweep -------------------------------------------------------------------


def test_sweep_outputs(tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep", "--workload", workload_path("gemm_64.yaml"),
               "--param", "cull_window", "--values", "5,10",
               "--trials", "32", "--out", str(out), *FAST])
    assert rc == 0
    header, rows = read_csv(out / "sweep.csv")
    assert header == ["cull_window", "f_estimate", "normalized_performance",
                      "visited_candidates", "normalized_iteration_cost"]
    assert [r[0] for r in rows] == ["5", "10"]
    for r in rows:
        assert float(r[1]) > 0
        assert 0.0 < float(r[2]) <= 1.0
        assert int(r[3]) > 0
        assert 0.0 < float(r[4]) <= 1.0
    assert max(float(r[4]) for r in rows) == pytest.approx(1.0)


def test_sweep_rejects_bad_value_early(tmp_path):
    rc = main(["sweep", "--workload", workload_path("gemm_64.yaml"),
               "--param", "cull_fraction", "--values", "0.25,1.5",
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert not (tmp_path / "o" / "sweep.csv").exists()


# -- report ------------------------------------------------------------------


def test_report_replays_trajectories(tmp_path, capsys):
    assert run_tune(tmp_path / "r1") == 0
    assert run_tune(tmp_path / "r2", workload="two_phase.yaml",
                    trials="48") == 0
    t1 = str(tmp_path / "r1" / "trajectory.jsonl")
    t2 = str(tmp_path / "r2" / "trajectory.jsonl")
    out = tmp_path / "rep"
    rc = main(["report", "--trajectories", f"{t1},{t2}",
               "--out", str(out)])
    assert rc == 0

    header, rows = read_csv(out / "totals.csv")
    assert header == ["run", "rounds", "trials", "visited", "skipped_lines"]
    assert [r[0] for r in rows] == ["r1", "r2"]
    assert int(rows[0][2]) == 32
    assert int(rows[1][2]) == 48
    assert [r[4] for r in rows] == ["0", "0"]

    header, rows = read_csv(out / "critical_steps.csv")
    assert len(header) == 11 and len(rows) == 2
    assert all(int(c) >= 0 for r in rows for c in r[1:])

    header, rows = read_csv(out / "allocations.csv")
    assert header == ["run", "subgraph", "trials", "share_pct", "best_time",
                      "time_share_pct"]
    for run in ("r1", "r2"):
        shares = [float(r[3]) for r in rows if r[0] == run]
        assert sum(shares) == pytest.approx(100.0, abs=0.1)
        tshares = [float(r[5]) for r in rows if r[0] == run and r[5]]
        assert sum(tshares) == pytest.approx(100.0, abs=0.1)

    header, rows = read_csv(out / "improvements.csv")
    assert len(header) == 23  # below -1, twenty 0.1 bins, at or above 1
    assert len(rows) == 2


def test_report_skips_corrupt_lines(tmp_path, capsys):
    assert run_tune(tmp_path / "r1", trials="16") == 0
    traj = tmp_path / "r1" / "trajectory.jsonl"
    text = traj.read_text()
    lines = text.splitlines()
    lines.insert(2, "{ this is not json")
    lines.insert(5, '{"no_event_key": 1}')
    traj.write_text("\n".join(lines) + "\n")
    out = tmp_path / "rep"
    rc = main(["report", "--trajectories", str(traj), "--out", str(out)])
    assert rc == 0
    assert "skipped 2 corrupt lines" in capsys.readouterr().err
    _, rows = read_csv(out / "totals.csv")
    assert rows[0][4] == "2"


def test_report_missing_trajectory(tmp_path):
    rc = main(["report", "--trajectories", str(tmp_path / "nope.jsonl"),
               "--out", str(tmp_path / "o")])
    assert rc == 3
