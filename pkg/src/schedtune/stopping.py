"""Adaptive stopping for parallel search tracks.

An episode advances a population of tracks through the schedule space. At a
fixed cadence the weakest fraction, judged by current advantage, is
eliminated and the freed step budget flows to the survivors, which therefore
run longer than a fixed-length scheme would allow. A floor on the population
keeps enough diversity alive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class StopConfig:
    cull_window: int | None = 20   # steps between eliminations; None disables
    cull_fraction: float = 0.5
    min_tracks: int = 64

    def __post_init__(self):
        if self.cull_window is not None and self.cull_window < 1:
            raise ValueError("cull_window must be >= 1 or None")
        if not 0.0 < self.cull_fraction < 1.0:
            raise ValueError("cull_fraction must be in (0, 1)")
        if self.min_tracks < 1:
            raise ValueError("min_tracks must be >= 1")


@dataclass
class Track:
    """One search trajectory inside an episode."""

    index: int
    state: object
    features: object
    score: float
    alive: bool = True
    steps: int = 0
    best_score: float = -math.inf
    best_step: int = 0
    history: list = field(default_factory=list)

    def advance(self, state, features, score: float) -> None:
        self.state = state
        self.features = features
        self.score = score
        self.steps += 1
        self.history.append(score)
        if score > self.best_score:
            self.best_score = score
            self.best_step = self.steps


class TrackSet:
    def __init__(self, states, features, scores):
        self.tracks = [Track(index=i, state=s, features=f, score=float(c))
                       for i, (s, f, c) in enumerate(zip(states, features,
                                                         scores))]

    def alive(self) -> list[Track]:
        return [t for t in self.tracks if t.alive]

    def alive_count(self) -> int:
        return sum(1 for t in self.tracks if t.alive)

    def cull(self, advantages: dict[int, float], cfg: StopConfig) -> list[int]:
        """Eliminate the weakest tracks by advantage.

        At most ``cull_fraction`` of the living population goes, and never
        below ``min_tracks`` survivors. Ties eliminate the higher index
        first. Returns the eliminated indices.
        """
        live = self.alive()
        n = len(live)
        n_elim = min(int(math.floor(cfg.cull_fraction * n)),
                     n - cfg.min_tracks)
        if n_elim <= 0:
            return []
        ordered = sorted(live, key=lambda t: (advantages[t.index], -t.index))
        gone = []
        for t in ordered[:n_elim]:
            t.alive = False
            gone.append(t.index)
        return sorted(gone)


def should_cull(step: int, cfg: StopConfig) -> bool:
    return cfg.cull_window is not None and step % cfg.cull_window == 0


def episode_done(alive: int, used: int, budget: int, cfg: StopConfig) -> bool:
    """The episode ends when tracks drop below the floor or budget runs out."""
    return alive < cfg.min_tracks or used >= budget


def critical_step_bin(best_step: int, length: int, bins: int = 10) -> int:
    """Decile of the step where a track found its best score.

    Integer arithmetic avoids float edge effects: the bin is
    ceil(bins * best_step / length) - 1 for 1-based steps.
    """
    if not 1 <= best_step <= length:
        raise ValueError(f"best_step {best_step} outside 1..{length}")
    return (bins * best_step + length - 1) // length - 1


def critical_step_histogram(tracks: list[tuple[int, int]],
                            bins: int = 10) -> list[int]:
    """Histogram of (best_step, length) pairs over track-relative deciles."""
    hist = [0] * bins
    for best_step, length in tracks:
        hist[critical_step_bin(best_step, length, bins)] += 1
    return hist
