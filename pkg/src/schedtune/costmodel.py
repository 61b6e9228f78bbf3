"""Online surrogate cost model: gradient-boosted regression trees.

The model predicts a throughput-like score from schedule feature vectors.
Targets are throughputs normalized per subgraph by the best measured so far,
so the current best example of every subgraph sits at exactly 1.0 and scores
stay comparable across subgraphs. Each measurement round triggers a full
refit on the renormalized cumulative dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PREDICTION_FLOOR = 1e-6


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 50
    max_depth: int = 6
    learning_rate: float = 0.3
    min_samples_leaf: int = 1
    dataset_cap: int = 10000

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1:
            raise CostModelError("n_trees and max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise CostModelError("learning_rate must be in (0, 1]")
        if self.dataset_cap < 1:
            raise CostModelError("dataset_cap must be >= 1")


@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray
    target: float

    def __post_init__(self):
        if not 0.0 < self.target <= 1.0:
            raise CostModelError(
                f"training target must be in (0, 1], got {self.target}")


@dataclass(frozen=True)
class FitReport:
    n_examples: int
    loss_before: float
    loss_after: float


@dataclass
class _Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(64):
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                break
            xv = X[np.arange(len(X)), np.maximum(f, 0)]
            go_left = xv <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(active, nxt, node)
        return self.value[node]


def _fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int,
              min_leaf: int) -> _Tree:
    """Exact greedy variance-reduction fit, deterministic under ties."""
    feature, threshold, left, right, value = [], [], [], [], []

    def add_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = add_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        ys = y[idx]
        mean = float(ys.mean())
        value[nid] = mean
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            continue
        if float(((ys - mean) ** 2).sum()) <= 1e-24:
            continue
        Xs = X[idx]
        order = np.argsort(Xs, axis=0, kind="stable")
        Xsort = np.take_along_axis(Xs, order, axis=0)
        ysort = ys[order]
        csum = np.cumsum(ysort, axis=0)
        total = float(ys.sum())
        m = len(idx)
        pos = np.arange(1, m, dtype=np.float64)
        sum_l = csum[:-1]
        gain = (sum_l ** 2) / pos[:, None] + \
               ((total - sum_l) ** 2) / (m - pos)[:, None]
        ok = Xsort[1:] != Xsort[:-1]
        if min_leaf > 1:
            ok &= ((pos >= min_leaf) & (m - pos >= min_leaf))[:, None]
        gain = np.where(ok, gain, -np.inf)
        flat = int(np.argmax(gain))
        if not np.isfinite(gain.flat[flat]):
            continue
        split_pos, feat = divmod(flat, X.shape[1])
        thr = 0.5 * (Xsort[split_pos, feat] + Xsort[split_pos + 1, feat])
        go_left = Xs[:, feat] <= thr
        li, ri = idx[go_left], idx[~go_left]
        if len(li) == 0 or len(ri) == 0:
            # Midpoint collapsed onto one of the split values.
            continue
        lid, rid = add_node(), add_node()
        feature[nid] = int(feat)
        threshold[nid] = float(thr)
        left[nid] = lid
        right[nid] = rid
        stack.append((rid, ri, depth + 1))
        stack.append((lid, li, depth + 1))
    return _Tree(feature=np.asarray(feature, dtype=np.int64),
                 threshold=np.asarray(threshold, dtype=np.float64),
                 left=np.asarray(left, dtype=np.int64),
                 right=np.asarray(right, dtype=np.int64),
                 value=np.asarray(value, dtype=np.float64))


class SurrogateModel:
    """Boosted-tree score predictor trained online from measurements."""

    def __init__(self, cfg: GbtConfig | None = None):
        self.cfg = cfg or GbtConfig()
        self.base = 1.0
        self.fitted = False
        self.trees: list[_Tree] = []
        self._feat: list[np.ndarray] = []
        self._thr: list[float] = []
        self._sg: list[str] = []
        self._best_thr: dict[str, float] = {}

    # -- data --------------------------------------------------------------

    @property
    def n_observed(self) -> int:
        return len(self._thr)

    def observe(self, features: np.ndarray, throughput: float,
                subgraph_id: str) -> None:
        """Record one measured schedule; keeps the most recent examples."""
        if not math.isfinite(throughput) or throughput <= 0.0:
            raise CostModelError(f"throughput must be positive, got {throughput}")
        self._feat.append(np.asarray(features, dtype=np.float64))
        self._thr.append(float(throughput))
        self._sg.append(subgraph_id)
        cur = self._best_thr.get(subgraph_id, 0.0)
        if throughput > cur:
            self._best_thr[subgraph_id] = float(throughput)
        if len(self._thr) > self.cfg.dataset_cap:
            drop = len(self._thr) - self.cfg.dataset_cap
            del self._feat[:drop]
            del self._thr[:drop]
            del self._sg[:drop]

    def training_examples(self) -> list[TrainingExample]:
        """Cumulative dataset with targets renormalized per subgraph."""
        out = []
        for f, t, sg in zip(self._feat, self._thr, self._sg):
            out.append(TrainingExample(features=f,
                                       target=t / self._best_thr[sg]))
        return out

    # -- training ------------------------------------------------------------

    def fit_incremental(self, examples: list[TrainingExample]) -> FitReport:
        """Refit the ensemble on the given examples from scratch."""
        if not examples:
            raise CostModelError("fit_incremental needs at least one example")
        X = np.stack([e.features for e in examples])
        y = np.asarray([e.target for e in examples], dtype=np.float64)
        before = float(np.mean((self._raw_predict(X) - y) ** 2))

        self.base = float(y.mean())
        self.fitted = True
        self.trees = []
        pred = np.full(len(y), self.base)
        for _ in range(self.cfg.n_trees):
            resid = y - pred
            if float(np.abs(resid).max()) <= 1e-12:
                break
            tree = _fit_tree(X, resid, self.cfg.max_depth,
                             self.cfg.min_samples_leaf)
            pred = pred + self.cfg.learning_rate * tree.predict(X)
            self.trees.append(tree)
        after = float(np.mean((pred - y) ** 2))
        return FitReport(n_examples=len(y), loss_before=before,
                         loss_after=after)

    def fit_round(self) -> FitReport:
        return self.fit_incremental(self.training_examples())

    # -- inference -----------------------------------------------------------

    def _raw_predict(self, X: np.ndarray) -> np.ndarray:
        if not self.fitted:
            return np.ones(len(X), dtype=np.float64)
        pred = np.full(len(X), self.base)
        for tree in self.trees:
            pred = pred + self.cfg.learning_rate * tree.predict(X)
        return pred

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Scores for a batch of feature vectors; untrained models score 1."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.maximum(self._raw_predict(X), PREDICTION_FLOOR)

    def reward(self, prev_features: np.ndarray,
               next_features: np.ndarray) -> np.ndarray:
        """Relative predicted-score change caused by a modification."""
        prev = self.predict(prev_features)
        nxt = self.predict(next_features)
        return (nxt - prev) / prev

    def dump_text(self) -> str:
        """Human-readable ensemble dump (one line per node), deterministic."""
        lines = [f"base={self.base!r} trees={len(self.trees)} "
                 f"lr={self.cfg.learning_rate!r}"]
        for ti, tree in enumerate(self.trees):
            lines.append(f"tree {ti} nodes={len(tree.feature)}")
            for ni in range(len(tree.feature)):
                if tree.feature[ni] < 0:
                    lines.append(f"  n{ni} leaf value={tree.value[ni]!r}")
                else:
                    lines.append(
                        f"  n{ni} f{tree.feature[ni]}"
                        f" <= {tree.threshold[ni]!r}"
                        f" ? n{tree.left[ni]} : n{tree.right[ni]}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CandidateEntry:
    """One visited schedule awaiting possible measurement."""

    canonical: str
    features: np.ndarray
    state: object
    order: int


def rank_scores(model: SurrogateModel, entries: list[CandidateEntry],
                k: int, exclude: set[str] | None = None):
    """Top ``k`` distinct unmeasured candidates by current model score.

    Duplicates collapse to their first occurrence; ties in score break
    toward earlier insertion order. Returns fewer than ``k`` entries when
    the pool runs short.
    """
    exclude = exclude or set()
    seen: set[str] = set()
    pool: list[CandidateEntry] = []
    for e in entries:
        if e.canonical in exclude or e.canonical in seen:
            continue
        seen.add(e.canonical)
        pool.append(e)
    if not pool:
        return []
    scores = model.predict(np.stack([e.features for e in pool]))
    ranked = sorted(zip(pool, scores), key=lambda p: (-p[1], p[0].order))
    return [e for e, _ in ranked[:k]]
