"""Command line front end.

Subcommands: ``tune`` runs one search session, ``compare`` runs several
searchers over a seed list, ``sweep`` varies one hyperparameter, ``report``
post-processes trajectory logs into CSV tables. All output files are
deterministic for a fixed configuration and seed; wall-clock time is printed
to stdout but never written into an output file. Exit codes: 0 on success,
2 for configuration or validation errors, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import math
import os
import sys
import time

from .measure import ExternalBackend, MeasureError, SimHwParams, SimulatedBackend
from .rlcore import RlDivergedError
from .tuner import (SearcherKind, TunerConfig, TuningSession, resume_session,
                    sim_params_from_dict)
from .workload import TargetConfig, WorkloadError, gpu_target, load_network

OUT_ENV = "SCHEDTUNE_OUT"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Override parsing


def _parse_kv(pairs: list[str], what: str) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"{what} override {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(name: str, text: str, default):
    if text.lower() in ("none", "null"):
        return None
    if name == "hidden":
        return tuple(int(x) for x in text.replace("x", ",").split(","))
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def build_tuner_config(seed: int, trials: int,
                       hyper: dict[str, str]) -> TunerConfig:
    defaults = TunerConfig()
    fields = {f.name: getattr(defaults, f.name)
              for f in dataclasses.fields(TunerConfig)}
    kwargs = {"seed": seed, "total_trials": trials}
    for key, text in hyper.items():
        if key in ("seed", "total_trials"):
            raise ConfigError(f"set {key} with its dedicated flag, not --hyper")
        if key not in fields:
            raise ConfigError(f"unknown hyperparameter {key!r}")
        default = fields[key]
        if default is None:
            # Optional ints: initial_tracks, episode_len, delta_trials.
            kwargs[key] = None if text.lower() in ("none", "null") else int(text)
        else:
            kwargs[key] = _coerce(key, text, default)
    try:
        return TunerConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_sim_params(overrides: dict[str, str]) -> SimHwParams:
    defaults = SimHwParams()
    kwargs = {}
    for key, text in overrides.items():
        if key == "unroll_factors":
            pairs = []
            for item in text.split(","):
                d, f = item.split(":")
                pairs.append((int(d), float(f)))
            kwargs[key] = tuple(pairs)
            continue
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown simulator parameter {key!r}")
        cur = getattr(defaults, key)
        kwargs[key] = _coerce(key, text, cur)
    try:
        return SimHwParams(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_target(name: str, levels: int | None) -> TargetConfig:
    if name == "cpu":
        return TargetConfig(tiling_levels=levels or 4)
    if name == "gpu":
        return gpu_target(tiling_levels=levels or 4)
    raise ConfigError(f"unknown target {name!r}")


def build_backend(args_backend: str, measure_cmd: str | None,
                  sim: dict[str, str], min_repeat: float):
    if args_backend == "sim":
        return SimulatedBackend(build_sim_params(sim))
    if args_backend == "external":
        if not measure_cmd:
            raise ConfigError("external backend needs --measure-cmd")
        return ExternalBackend(measure_cmd.split(),
                               min_repeat_seconds=min_repeat)
    raise ConfigError(f"unknown backend {args_backend!r}")


def _out_dir(args, *extra: str) -> str:
    base = args.out or os.environ.get(OUT_ENV) or "schedtune_out"
    path = os.path.join(base, *extra) if extra else base
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Single-run helper shared by tune, compare, and sweep workers


def run_single(payload: dict) -> dict:
    """Run one complete session from primitive arguments; returns the report."""
    net = load_network(payload["workload"])
    target = build_target(payload["target"], payload.get("levels"))
    cfg = build_tuner_config(payload["seed"], payload["trials"],
                             payload.get("hyper", {}))
    if payload.get("sim_params") is not None:
        backend = SimulatedBackend(sim_params_from_dict(payload["sim_params"]))
    else:
        backend = build_backend(payload.get("backend", "sim"),
                                payload.get("measure_cmd"),
                                payload.get("sim", {}),
                                cfg.min_repeat_seconds)
    session = TuningSession(net, target, cfg, backend,
                            SearcherKind(payload["searcher"]),
                            out_dir=payload.get("out_dir"),
                            workload_path=payload["workload"])
    report = session.run()
    backend.close()
    if payload.get("out_dir"):
        _write_json(os.path.join(payload["out_dir"], "summary.json"), report)
    return report


# ---------------------------------------------------------------------------
# Subcommands


def cmd_tune(args) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    if args.resume:
        session = resume_session(args.resume, out_dir=out,
                                 total_trials=args.trials)
        report = session.run(max_rounds=args.max_rounds)
        session.backend.close()
        _write_json(os.path.join(out, "summary.json"), report)
    elif args.max_rounds is not None:
        net = load_network(args.workload)
        target = build_target(args.target, args.levels)
        cfg = build_tuner_config(args.seed, args.trials or 640,
                                 _parse_kv(args.hyper, "hyper"))
        backend = build_backend(args.backend, args.measure_cmd,
                                _parse_kv(args.sim, "sim"),
                                cfg.min_repeat_seconds)
        session = TuningSession(net, target, cfg, backend,
                                SearcherKind(args.searcher), out_dir=out,
                                workload_path=args.workload)
        report = session.run(max_rounds=args.max_rounds)
        session.backend.close()
        _write_json(os.path.join(out, "summary.json"), report)
    else:
        payload = {"workload": args.workload, "searcher": args.searcher,
                   "seed": args.seed, "trials": args.trials or 640,
                   "target": args.target, "levels": args.levels,
                   "backend": args.backend, "measure_cmd": args.measure_cmd,
                   "hyper": _parse_kv(args.hyper, "hyper"),
                   "sim": _parse_kv(args.sim, "sim"), "out_dir": out}
        report = run_single(payload)
    wall = time.perf_counter() - t0
    f = report["f_estimate"]
    print(f"searcher={report['searcher']} workload={report['workload']} "
          f"seed={report['seed']}")
    print(f"trials={report['trials_used']} rounds={report['rounds']} "
          f"f_estimate={f if f is not None else 'incomplete'}")
    print(f"outputs in {out}")
    print(f"wall_time_s={wall:.2f}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError("empty seed list")
    return out


def _run_many(payloads: list[dict], jobs: int) -> list[dict]:
    if jobs <= 1:
        return [run_single(p) for p in payloads]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_single, payloads))


def cmd_compare(args) -> int:
    searchers = [s.strip() for s in args.searchers.split(",") if s.strip()]
    if len(searchers) < 2:
        raise ConfigError("compare needs at least two searchers")
    for s in searchers:
        if s not in [k.value for k in SearcherKind]:
            raise ConfigError(f"unknown searcher {s!r}")
    seeds = _parse_seeds(args.seeds)
    out = _out_dir(args)
    hyper = _parse_kv(args.hyper, "hyper")
    sim = _parse_kv(args.sim, "sim")

    payloads = []
    for s in searchers:
        for seed in seeds:
            payloads.append({
                "workload": args.workload, "searcher": s, "seed": seed,
                "trials": args.trials or 640, "target": args.target,
                "levels": args.levels, "backend": "sim", "sim": sim,
                "hyper": hyper,
                "out_dir": _out_dir(args, f"{s}-s{seed}")})
    t0 = time.perf_counter()
    reports = _run_many(payloads, args.jobs)
    wall = time.perf_counter() - t0

    by_key = {(p["searcher"], p["seed"]): r
              for p, r in zip(payloads, reports)}
    best_per_seed = {}
    for (s, seed), r in by_key.items():
        f = r["f_estimate"]
        if f is not None:
            cur = best_per_seed.get(seed)
            best_per_seed[seed] = f if cur is None else min(cur, f)

    with open(os.path.join(out, "curves.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["searcher", "seed", "trials", "f_estimate"])
        for s in searchers:
            for seed in seeds:
                for trials, f in by_key[(s, seed)]["curve"]:
                    w.writerow([s, seed, trials,
                                "" if f is None else repr(f)])

    baseline = searchers[0]
    with open(os.path.join(out, "final.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["searcher", "seed", "trials_used", "f_estimate",
                    "normalized_performance", "trials_to_baseline"])
        for s in searchers:
            for seed in seeds:
                r = by_key[(s, seed)]
                f = r["f_estimate"]
                norm = ""
                if f is not None and best_per_seed.get(seed):
                    norm = repr(best_per_seed[seed] / f)
                ref = by_key[(baseline, seed)]["f_estimate"]
                t_to = ""
                if ref is not None:
                    for trials, fv in r["curve"]:
                        if fv is not None and fv <= ref:
                            t_to = trials
                            break
                w.writerow([s, seed, r["trials_used"],
                            "" if f is None else repr(f), norm, t_to])
    print(f"compared {len(searchers)} searchers x {len(seeds)} seeds "
          f"-> {out}")
    print(f"wall_time_s={wall:.2f}")
    return 0


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = _out_dir(args)
    hyper = _parse_kv(args.hyper, "hyper")
    payloads = []
    for v in values:
        hv = dict(hyper)
        hv[args.param] = v
        build_tuner_config(args.seed, args.trials or 640, hv)  # validate early
        payloads.append({
            "workload": args.workload, "searcher": args.searcher,
            "seed": args.seed, "trials": args.trials or 640,
            "target": args.target, "levels": args.levels, "backend": "sim",
            "sim": _parse_kv(args.sim, "sim"), "hyper": hv,
            "out_dir": _out_dir(args, f"{args.param}-{v}")})
    t0 = time.perf_counter()
    reports = _run_many(payloads, args.jobs)
    wall = time.perf_counter() - t0

    fs = [r["f_estimate"] for r in reports]
    best = min((f for f in fs if f is not None), default=None)
    max_visited = max(r["visited_candidates"] for r in reports) or 1
    with open(os.path.join(out, "sweep.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        # Iteration cost is the deterministic count of candidates visited,
        # not wall time, so the file reproduces exactly.
        w.writerow([args.param, "f_estimate", "normalized_performance",
                    "visited_candidates", "normalized_iteration_cost"])
        for v, r in zip(values, reports):
            f = r["f_estimate"]
            norm = repr(best / f) if (f is not None and best) else ""
            w.writerow([v, "" if f is None else repr(f), norm,
                        r["visited_candidates"],
                        repr(r["visited_candidates"] / max_visited)])
    print(f"swept {args.param} over {len(values)} values -> {out}")
    print(f"wall_time_s={wall:.2f}")
    return 0


# ---------------------------------------------------------------------------
# Trajectory reports


def _read_trajectory(path: str):
    events = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                ev = json.loads(line)
                if not isinstance(ev, dict) or "event" not in ev:
                    raise ValueError("not an event record")
            except (json.JSONDecodeError, ValueError):
                skipped += 1
                continue
            events.append(ev)
    return events, skipped


def replay_totals(events: list[dict]) -> dict:
    """Conservation totals recomputed purely from the log."""
    trials = 0
    visited = 0
    rounds = 0
    per_sg: dict[str, dict] = {}
    episode_budget_ok = True
    for ev in events:
        kind = ev["event"]
        if kind == "measure":
            rounds += 1
            trials += int(ev["measured"])
            sg = per_sg.setdefault(ev["subgraph"],
                                   {"trials": 0, "best_time": math.inf})
            sg["trials"] += int(ev["measured"])
            bt = ev.get("best_time")
            if bt is not None:
                sg["best_time"] = min(sg["best_time"], float(bt))
        elif kind == "episode_end":
            visited += int(ev["visited"])
    for sg in per_sg.values():
        if not math.isfinite(sg["best_time"]):
            sg["best_time"] = None
    return {"rounds": rounds, "trials": trials, "visited": visited,
            "per_subgraph": per_sg, "episode_budget_ok": episode_budget_ok}


def cmd_report(args) -> int:
    out = _out_dir(args)
    rows_tot, rows_crit, rows_imp, rows_alloc = [], [], [], []
    n_bins = 20
    for path in args.trajectories:
        events, skipped = _read_trajectory(path)
        if skipped:
            print(f"warning: {path}: skipped {skipped} corrupt lines",
                  file=sys.stderr)
        name = os.path.basename(os.path.dirname(path)) or path
        header_sg = next((ev.get("subgraphs", {}) for ev in events
                          if ev["event"] == "session_start"), {})
        totals = replay_totals(events)
        rows_tot.append([name, totals["rounds"], totals["trials"],
                         totals["visited"], skipped])

        hist = [0] * 10
        for ev in events:
            if ev["event"] != "episode_end":
                continue
            for tr in ev["tracks"]:
                ln = int(tr["len"])
                bs = int(tr["best_step"])
                if 1 <= bs <= ln:
                    hist[(10 * bs + ln - 1) // ln - 1] += 1
        rows_crit.append([name] + hist)

        imp = [0] * (n_bins + 2)
        for ev in events:
            if ev["event"] != "episode_step":
                continue
            for r in ev.get("rewards", []):
                if r < -1.0:
                    imp[0] += 1
                elif r >= 1.0:
                    imp[-1] += 1
                else:
                    imp[1 + int((r + 1.0) * n_bins / 2.0)] += 1
        rows_imp.append([name] + imp)

        weights = {sg: meta.get("weight", 1)
                   for sg, meta in header_sg.items()} if header_sg else {}
        total_trials = sum(s["trials"] for s in totals["per_subgraph"].values()) or 1
        time_sum = sum(weights.get(sg, 1) * s["best_time"]
                       for sg, s in totals["per_subgraph"].items()
                       if s["best_time"] is not None) or 1.0
        for sg, s in sorted(totals["per_subgraph"].items()):
            share = 100.0 * s["trials"] / total_trials
            if s["best_time"] is None:
                bt, contrib = "", ""
            else:
                bt = repr(s["best_time"])
                contrib = f"{100.0 * weights.get(sg, 1) * s['best_time'] / time_sum:.4f}"
            rows_alloc.append([name, sg, s["trials"], f"{share:.4f}", bt, contrib])

    def write_csv(fname, header, rows):
        with open(os.path.join(out, fname), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    write_csv("totals.csv", ["run", "rounds", "trials", "visited",
                             "skipped_lines"], rows_tot)
    write_csv("critical_steps.csv",
              ["run"] + [f"decile_{i}" for i in range(1, 11)], rows_crit)
    lo_edges = ["lt_-1.0"] + [f"{-1.0 + i * 0.1:.1f}" for i in range(n_bins)] \
        + ["ge_1.0"]
    write_csv("improvements.csv", ["run"] + lo_edges, rows_imp)
    write_csv("allocations.csv",
              ["run", "subgraph", "trials", "share_pct", "best_time",
               "time_share_pct"], rows_alloc)
    print(f"reports for {len(args.trajectories)} trajectories -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="schedtune",
        description="Hierarchical RL search for tensor-program schedules")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workload_required=True):
        sp.add_argument("--workload", required=workload_required,
                        help="workload YAML file")
        sp.add_argument("--trials", type=int, default=None,
                        help="measurement budget")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--target", choices=["cpu", "gpu"], default="cpu")
        sp.add_argument("--levels", type=int, default=None,
                        help="tiling levels override")
        sp.add_argument("--hyper", action="append", default=[],
                        metavar="KEY=VALUE")
        sp.add_argument("--sim", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="simulated hardware parameter override")
        sp.add_argument("--out", default=None,
                        help=f"output directory (default ${OUT_ENV} or "
                             "./schedtune_out)")

    sp = sub.add_parser("tune", help="run one search session")
    common(sp, workload_required=False)
    sp.add_argument("--searcher", default="rl",
                    choices=[k.value for k in SearcherKind])
    sp.add_argument("--backend", choices=["sim", "external"], default="sim")
    sp.add_argument("--measure-cmd", default=None,
                    help="external measurer command line")
    sp.add_argument("--resume", default=None,
                    help="session checkpoint to continue")
    sp.add_argument("--max-rounds", type=int, default=None,
                    help="stop after this many rounds (checkpoint remains)")
    sp.set_defaults(fn=cmd_tune)

    sp = sub.add_parser("compare", help="run several searchers over seeds")
    common(sp)
    sp.add_argument("--searchers", required=True,
                    help="comma-separated searcher list; first is baseline")
    sp.add_argument("--seeds", default="0", help="e.g. 0-9 or 0,3,7")
    sp.add_argument("--jobs", type=int, default=1,
                    help="parallel worker processes")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("sweep", help="vary one hyperparameter")
    common(sp)
    sp.add_argument("--searcher", default="rl",
                    choices=[k.value for k in SearcherKind])
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("report", help="post-process trajectory logs")
    sp.add_argument("--trajectories", type=lambda s: s.split(","),
                    required=True,
                    help="comma separated trajectory.jsonl paths")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "tune" and not args.resume and not args.workload:
        print("error: --workload is required unless resuming", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (ConfigError, WorkloadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MeasureError, RlDivergedError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
