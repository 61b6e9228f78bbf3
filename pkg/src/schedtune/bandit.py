"""Sliding-window UCB selection for subgraphs and sketches.

Both upper levels of the search are non-stationary bandits: the value of
optimizing a subgraph or refining a sketch drains as its schedule improves.
A sliding window over the most recent reward observations keeps value
estimates current, and an exploration bonus revisits arms whose window went
empty.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field


@dataclass(frozen=True)
class BanditConfig:
    exploration_coef: float = 0.25
    window_size: int = 256
    history_weight: float = 0.2     # weight on the recent-improvement term
    similarity_weight: float = 2.0  # headroom scale against similar subgraphs
    delta_trials: int | None = None  # improvement lookback; None = last round

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 0.0 <= self.history_weight <= 1.0:
            raise ValueError("history_weight must be in [0, 1]")
        if self.exploration_coef < 0.0:
            raise ValueError("exploration_coef must be >= 0")


@dataclass
class SlidingWindowStats:
    """Last-``window`` reward observations with per-arm counts and sums.

    Records must arrive with strictly increasing step stamps; eviction keeps
    only steps newer than ``t - window``.
    """

    window: int
    entries: deque = field(default_factory=deque)
    counts: dict = field(default_factory=dict)
    sums: dict = field(default_factory=dict)
    t_latest: int = 0

    def record(self, arm: int, value: float, t: int | None = None) -> None:
        if t is None:
            t = self.t_latest + 1
        if t <= self.t_latest:
            raise ValueError(
                f"step stamps must increase: got {t} after {self.t_latest}")
        if not math.isfinite(value):
            raise ValueError("window values must be finite")
        self.t_latest = t
        self.entries.append((t, arm, value))
        self.counts[arm] = self.counts.get(arm, 0) + 1
        self.sums[arm] = self.sums.get(arm, 0.0) + value
        cutoff = t - self.window
        while self.entries and self.entries[0][0] <= cutoff:
            t0, a0, v0 = self.entries.popleft()
            self.counts[a0] -= 1
            self.sums[a0] -= v0
            if self.counts[a0] == 0:
                del self.counts[a0]
                del self.sums[a0]

    def count(self, arm: int) -> int:
        return self.counts.get(arm, 0)

    def windowed_mean(self, arm: int) -> float | None:
        n = self.counts.get(arm, 0)
        if n == 0:
            return None
        return self.sums[arm] / n


def sketch_q(stats: SlidingWindowStats, arm: int) -> float | None:
    """Windowed mean of normalized round throughputs for one sketch."""
    return stats.windowed_mean(arm)


def subgraph_q(stats: SlidingWindowStats, arm: int) -> float | None:
    """Windowed mean of allocation rewards for one subgraph."""
    return stats.windowed_mean(arm)


def ucb_scores(stats: SlidingWindowStats, arms: int,
               cfg: BanditConfig) -> list[float]:
    """Windowed mean plus exploration bonus per arm; empty arms score inf."""
    t = stats.t_latest
    scores = []
    for a in range(arms):
        n = stats.count(a)
        if n == 0:
            scores.append(math.inf)
            continue
        bonus = cfg.exploration_coef * math.sqrt(
            math.log(max(min(t, stats.window), 1)) / n)
        scores.append(stats.sums[a] / n + bonus)
    return scores


def swucb_select(stats: SlidingWindowStats, arms: int,
                 cfg: BanditConfig) -> int:
    """Pick the arm maximizing windowed value plus exploration bonus.

    Arms with no observation inside the window win immediately; all ties
    break toward the lowest index.
    """
    if arms < 1:
        raise ValueError("need at least one arm")
    scores = ucb_scores(stats, arms, cfg)
    best = 0
    for a in range(1, arms):
        if scores[a] > scores[best]:
            best = a
    return best


@dataclass
class SubgraphStats:
    """Running optimization state of one subgraph."""

    weight: int
    flops: float
    trials: int = 0
    best_time: float = math.inf
    best_throughput: float = 0.0
    # (cumulative trials, best time) appended once per measurement round
    history: list = field(default_factory=list)

    def note_round(self) -> None:
        if math.isfinite(self.best_time):
            self.history.append((self.trials, self.best_time))


def subgraph_reward(stats_map: dict, similar: dict, arm_id: str,
                    cfg: BanditConfig) -> float:
    """Allocation reward for one subgraph.

    Mixes the recent rate of latency improvement with remaining headroom,
    where headroom is bounded by the best throughput among structurally
    similar subgraphs. Unmeasured subgraphs return infinity so every
    subgraph gets measured before any is revisited. ``similar`` maps each
    subgraph id to the ids sharing its operator-kind multiset.
    """
    st = stats_map[arm_id]
    if st.trials == 0 or not math.isfinite(st.best_time):
        return math.inf
    g_now = st.best_time
    t_now = st.trials

    improve = 0.0
    if len(st.history) >= 2:
        if cfg.delta_trials is None:
            t_prev, g_prev = st.history[-2]
        else:
            t_prev, g_prev = None, None
            for tt, gg in reversed(st.history[:-1]):
                if tt <= t_now - cfg.delta_trials:
                    t_prev, g_prev = tt, gg
                    break
        if t_prev is not None and t_now > t_prev:
            improve = (g_now - g_prev) / (t_now - t_prev)

    peak = st.best_throughput
    for other in similar.get(arm_id, (arm_id,)):
        ot = stats_map.get(other)
        if ot is not None and ot.best_throughput > peak:
            peak = ot.best_throughput
    headroom = cfg.similarity_weight * st.flops / peak - g_now
    pressure = min(-g_now / t_now, headroom)

    a = cfg.history_weight
    return abs(st.weight * (a * improve + (1.0 - a) * pressure))
