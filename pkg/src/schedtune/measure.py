"""Measurement backends: analytic hardware simulator and external measurer.

The simulator prices a schedule with a closed-form model: base time is flops
over peak, scaled up by cache-capacity misses at two levels, by an unroll
quality factor, and divided by achieved parallel speedup. It is pure by
default; optional log-normal noise turns it into a stochastic benchmark. An
exhaustive search over small spaces provides ground-truth optima for tests.
"""

from __future__ import annotations

import itertools
import json
import math
import queue
import subprocess
import threading
from dataclasses import dataclass, replace

import numpy as np

from .schedspace import ScheduleState, SketchContext, space_size


class MeasureError(RuntimeError):
    """Raised for backend configuration or protocol failures."""


class SpaceTooLarge(MeasureError):
    """Raised when exhaustive enumeration would exceed its state cap."""

    def __init__(self, size: int, cap: int):
        super().__init__(f"space has {size} states, above the cap of {cap}")
        self.size = size
        self.cap = cap


@dataclass(frozen=True)
class SimHwParams:
    """Simulated machine description.

    ``unroll_factors`` maps unroll depth to a time multiplier; depths not in
    the table cost nothing. ``noise_sigma`` of zero keeps the model pure.
    """

    cores: int = 32
    cap_l1: float = 4096.0
    cap_l2: float = 131072.0
    miss_penalty_l1: float = 0.3
    miss_penalty_l2: float = 0.6
    parallel_overhead: float = 0.02
    unroll_factors: tuple[tuple[int, float], ...] = (
        (0, 1.00), (16, 0.97), (64, 0.95), (512, 0.98), (1024, 1.00))
    peak_flops: float = 1e11
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def unroll_factor(self, depth: int) -> float:
        for d, f in self.unroll_factors:
            if d == depth:
                return f
        return 1.0


@dataclass(frozen=True)
class MeasureRequest:
    state: ScheduleState
    ctx: SketchContext


@dataclass(frozen=True)
class MeasureResult:
    time_seconds: float
    throughput: float
    valid: bool
    error: str = ""


def _miss_factor(l1: float, l2: float, p: SimHwParams) -> float:
    m1 = 1.0 + p.miss_penalty_l1 * max(0.0, l1 / p.cap_l1 - 1.0)
    m2 = 1.0 + p.miss_penalty_l2 * max(0.0, l2 / p.cap_l2 - 1.0)
    return m1 * m2


def _parallel_speedup(ctx: SketchContext, stage, state: ScheduleState,
                      p: SimHwParams) -> float:
    k = state.parallel_fuse_count
    if k == 0 or not stage.spatial_idx:
        return 1.0
    extent = 1
    for gi in stage.spatial_idx:
        for lv in range(k):
            extent *= state.tiles[gi][lv]
    used = min(extent, p.cores)
    balance = extent / (math.ceil(extent / p.cores) * p.cores)
    return used * balance * (1.0 - p.parallel_overhead * (k - 1))


def simulate_time(state: ScheduleState, ctx: SketchContext,
                  params: SimHwParams) -> float:
    """Deterministic schedule cost in seconds under the analytic model."""
    depth = ctx.sketch.space.unroll_depths[state.unroll_index]
    u = params.unroll_factor(depth)
    total = 0.0
    for stage, (l1, l2) in zip(ctx.stages, ctx.stage_footprints(state)):
        m = _miss_factor(l1, l2, params)
        spd = _parallel_speedup(ctx, stage, state, params)
        total += (stage.flops / params.peak_flops) * m * u / spd
    for _name, flops, l1, l2 in ctx.skipped:
        total += (flops / params.peak_flops) * _miss_factor(l1, l2, params)
    return total


class SimulatedBackend:
    """Measures schedules with the analytic model, optionally noisy."""

    name = "sim"

    def __init__(self, params: SimHwParams | None = None):
        self.params = params or SimHwParams()
        self._rng = np.random.default_rng(self.params.noise_seed)

    def measure_batch(self, requests: list[MeasureRequest]) -> list[MeasureResult]:
        out = []
        for req in requests:
            t = simulate_time(req.state, req.ctx, self.params)
            if self.params.noise_sigma > 0.0:
                t *= math.exp(self.params.noise_sigma *
                              float(self._rng.standard_normal()))
            thr = req.ctx.sg.flops / t
            out.append(MeasureResult(time_seconds=t, throughput=thr, valid=True))
        return out

    def close(self):
        pass


def brute_force_best(ctx: SketchContext, params: SimHwParams,
                     cap: int = 1_000_000):
    """Exhaustively find the noise-free optimum of one sketch's space.

    Ties break on canonical text order so the result is unique. Refuses
    spaces larger than ``cap`` states.
    """
    size = space_size(ctx.sketch)
    if size > cap:
        raise SpaceTooLarge(size, cap)
    pure = replace(params, noise_sigma=0.0)
    sp = ctx.sketch.space
    best_t = math.inf
    best_state = None
    best_key = ""
    for tiles in itertools.product(*ctx.tilings):
        for ca in range(len(sp.compute_at_candidates)):
            for par in range(sp.max_fusible + 1):
                for ur in range(len(sp.unroll_depths)):
                    st = ScheduleState(sketch_id=ctx.sketch.id, tiles=tiles,
                                       compute_at_index=ca,
                                       parallel_fuse_count=par,
                                       unroll_index=ur)
                    t = simulate_time(st, ctx, pure)
                    if t < best_t or (t == best_t
                                      and st.canonical() < best_key):
                        best_t = t
                        best_state = st
                        best_key = st.canonical()
    return best_state, best_t


# ---------------------------------------------------------------------------
# External measurer process


class _PipeReader(threading.Thread):
    """Pushes lines from a pipe onto a queue so reads can time out."""

    def __init__(self, pipe):
        super().__init__(daemon=True)
        self.pipe = pipe
        self.lines: queue.Queue = queue.Queue()
        self.start()

    def run(self):
        try:
            for line in self.pipe:
                self.lines.put(line)
        except ValueError:
            pass
        self.lines.put(None)


class ExternalBackend:
    """Speaks a line protocol to a long-running measurer subprocess.

    One JSON object per line on stdin describes a candidate; the process
    answers with one JSON line carrying ``time_seconds`` or ``error``. Each
    candidate is re-measured until accumulated time reaches
    ``min_repeat_seconds`` and the mean is reported. Crashes and timeouts
    invalidate the current candidate only; the batch continues with a fresh
    process.
    """

    name = "external"

    def __init__(self, command: list[str], min_repeat_seconds: float = 1.0,
                 timeout: float = 60.0, max_repeats: int = 1000):
        if not command:
            raise MeasureError("external backend needs a measurer command")
        self.command = list(command)
        self.min_repeat_seconds = min_repeat_seconds
        self.timeout = timeout
        # Safety bound so microsecond-scale candidates cannot spin forever.
        self.max_repeats = max_repeats
        self._proc = None
        self._reader = None

    def _ensure_proc(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE, text=True, bufsize=1)
            self._reader = _PipeReader(self._proc.stdout)

    def _kill(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()
        self._proc = None
        self._reader = None

    def _measure_once(self, req: MeasureRequest) -> float:
        self._ensure_proc()
        msg = json.dumps({
            "schedule": req.state.canonical(),
            "subgraph": req.ctx.sg.id,
            "flops": req.ctx.sg.flops,
        }, sort_keys=True)
        try:
            self._proc.stdin.write(msg + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._kill()
            raise MeasureError(f"measurer pipe closed: {exc}") from exc
        try:
            line = self._reader.lines.get(timeout=self.timeout)
        except queue.Empty:
            self._kill()
            raise MeasureError("measurer timed out") from None
        if line is None:
            code = self._proc.poll()
            self._kill()
            raise MeasureError(f"measurer exited with code {code}")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            self._kill()
            raise MeasureError(f"bad measurer reply: {line!r}") from exc
        if "error" in reply:
            raise MeasureError(str(reply["error"]))
        t = float(reply.get("time_seconds", -1.0))
        if not math.isfinite(t) or t <= 0.0:
            raise MeasureError(f"non-positive measured time {t}")
        return t

    def measure_batch(self, requests: list[MeasureRequest]) -> list[MeasureResult]:
        out = []
        for req in requests:
            times = []
            try:
                while not times or (sum(times) < self.min_repeat_seconds
                                    and len(times) < self.max_repeats):
                    times.append(self._measure_once(req))
            except MeasureError as exc:
                out.append(MeasureResult(time_seconds=math.inf, throughput=0.0,
                                         valid=False, error=str(exc)))
                continue
            mean_t = sum(times) / len(times)
            out.append(MeasureResult(time_seconds=mean_t,
                                     throughput=req.ctx.sg.flops / mean_t,
                                     valid=True))
        return out

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._kill()
        self._proc = None
