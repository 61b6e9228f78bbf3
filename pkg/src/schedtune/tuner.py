"""Search session orchestration across all four decision levels.

One measurement round picks a subgraph, picks a sketch, runs an episode of
guided modification steps over a population of tracks, measures the top
candidates by predicted score, and feeds the results back into the bandit
statistics and the cost model. Sessions checkpoint after every round and can
resume bit-exactly: the checkpoint format is a deterministic binary
container, so identical runs give identical files.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .bandit import (BanditConfig, SlidingWindowStats, SubgraphStats,
                     subgraph_reward, swucb_select)
from .costmodel import CandidateEntry, GbtConfig, SurrogateModel, rank_scores
from .measure import (ExternalBackend, MeasureRequest, SimHwParams,
                      SimulatedBackend)
from .rlcore import (Adam, PolicyNet, ReplayBuffer, RlConfig, Transition,
                     ValueNet, advantage, ppo_update, select_actions)
from .schedspace import (SketchContext, action_mask, apply_action,
                         decode_action, parse_state,
                         sample_initial_schedules)
from .stopping import StopConfig, TrackSet, episode_done, should_cull
from .workload import (NetworkSpec, TargetConfig, generate_sketches,
                       load_network, similar_subgraphs)


class SearcherKind(str, enum.Enum):
    RL_ADAPTIVE = "rl"
    RL_FIXED = "rl-fixed-length"
    RL_GREEDY_SUBGRAPH = "rl-greedy-subgraph"
    EVOLUTIONARY = "evolutionary"
    RANDOM = "random"


_RL_SEARCHERS = (SearcherKind.RL_ADAPTIVE, SearcherKind.RL_FIXED,
                 SearcherKind.RL_GREEDY_SUBGRAPH)
_BANDIT_SUBGRAPH = (SearcherKind.RL_ADAPTIVE, SearcherKind.RL_FIXED)
_ADAPTIVE_STOP = (SearcherKind.RL_ADAPTIVE, SearcherKind.RL_GREEDY_SUBGRAPH)


@dataclass(frozen=True)
class TunerConfig:
    """Every tunable knob of a session, with search-scale defaults."""

    seed: int = 0
    total_trials: int = 640
    top_k: int = 64
    min_tracks: int = 64
    initial_tracks: int | None = None   # default: 2 * min_tracks
    cull_window: int = 20
    cull_fraction: float = 0.5
    episode_len: int | None = None      # default: 2 * cull_window
    train_interval: int = 2
    discount: float = 0.9
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    clip_ratio: float = 0.2
    value_loss_weight: float = 0.5
    entropy_weight: float = 0.01
    minibatch: int = 256
    buffer_capacity: int = 4096
    hidden: tuple[int, ...] = (128, 128)
    exploration_coef: float = 0.25
    bandit_window: int = 256
    history_weight: float = 0.2
    similarity_weight: float = 2.0
    delta_trials: int | None = None
    gbt_trees: int = 50
    gbt_depth: int = 6
    gbt_learning_rate: float = 0.3
    dataset_cap: int = 10000
    min_repeat_seconds: float = 1.0

    def __post_init__(self):
        if self.total_trials < 1:
            raise ValueError("total_trials must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.cull_window < 1:
            raise ValueError("cull_window must be >= 1")
        if not 0.0 < self.cull_fraction < 1.0:
            raise ValueError("cull_fraction must be in (0, 1)")
        if self.min_tracks < 1:
            raise ValueError("min_tracks must be >= 1")
        if self.initial_tracks is not None \
                and self.initial_tracks < self.min_tracks:
            raise ValueError("initial_tracks must be >= min_tracks")
        if self.episode_len is not None and self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if self.bandit_window < 1:
            raise ValueError("bandit_window must be >= 1")
        if self.min_repeat_seconds < 0:
            raise ValueError("min_repeat_seconds must be >= 0")

    @property
    def tracks(self) -> int:
        return self.initial_tracks if self.initial_tracks is not None \
            else 2 * self.min_tracks

    @property
    def track_len(self) -> int:
        return self.episode_len if self.episode_len is not None \
            else 2 * self.cull_window

    def rl_config(self) -> RlConfig:
        return RlConfig(lr_actor=self.lr_actor, lr_critic=self.lr_critic,
                        discount=self.discount, clip_ratio=self.clip_ratio,
                        value_loss_weight=self.value_loss_weight,
                        entropy_weight=self.entropy_weight,
                        hidden=self.hidden, minibatch=self.minibatch,
                        buffer_capacity=self.buffer_capacity,
                        train_interval=self.train_interval)

    def bandit_config(self) -> BanditConfig:
        return BanditConfig(exploration_coef=self.exploration_coef,
                            window_size=self.bandit_window,
                            history_weight=self.history_weight,
                            similarity_weight=self.similarity_weight,
                            delta_trials=self.delta_trials)

    def stop_config(self, adaptive: bool) -> StopConfig:
        return StopConfig(cull_window=self.cull_window if adaptive else None,
                          cull_fraction=self.cull_fraction,
                          min_tracks=self.min_tracks)

    def gbt_config(self) -> GbtConfig:
        return GbtConfig(n_trees=self.gbt_trees, max_depth=self.gbt_depth,
                         learning_rate=self.gbt_learning_rate,
                         dataset_cap=self.dataset_cap)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TunerConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (128, 128)))
        return cls(**d)


class TrajectoryLogger:
    """Append-only JSONL event log; resuming keeps appending to one file."""

    def __init__(self, path: str):
        self.path = path
        fresh = not (os.path.exists(path) and os.path.getsize(path) > 0)
        self.fh = open(path, "a", encoding="utf-8")
        self.fresh = fresh

    def write(self, obj: dict) -> None:
        self.fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# Deterministic checkpoint container


_CKPT_MAGIC = b"STCK1\n"


def write_checkpoint(path: str, meta: dict, arrays: dict) -> None:
    """Binary container: magic, length-prefixed JSON header, raw blobs.

    Array order and JSON key order are fixed, so the same state always
    produces the same bytes.
    """
    names = sorted(arrays)
    manifest = [{"name": k, "dtype": arrays[k].dtype.str,
                 "shape": list(arrays[k].shape)} for k in names]
    head = json.dumps({"meta": meta, "arrays": manifest},
                      sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack(">Q", len(head)))
        fh.write(head)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k]).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a session checkpoint")
        (hlen,) = struct.unpack(">Q", fh.read(8))
        head = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for item in head["arrays"]:
            dt = np.dtype(item["dtype"])
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(dt.itemsize * count)
            arrays[item["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    return head["meta"], arrays


def _enc(x):
    """Make a value JSON-safe; infinities become None."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _dec_inf(x):
    return math.inf if x is None else float(x)


# ---------------------------------------------------------------------------
# Session


@dataclass
class _Agent:
    policy: PolicyNet
    value: ValueNet
    opt_pi: Adam
    opt_v: Adam


class TuningSession:
    """One end-to-end search over a network with a fixed searcher."""

    def __init__(self, net: NetworkSpec, target: TargetConfig,
                 cfg: TunerConfig, backend, searcher: SearcherKind,
                 out_dir: str | None = None, workload_path: str | None = None):
        self.net = net
        self.target = target
        self.cfg = cfg
        self.backend = backend
        self.searcher = SearcherKind(searcher)
        self.workload_path = workload_path
        self.rng = np.random.default_rng(cfg.seed)

        self.sketches = {}
        self.contexts = {}
        self.slots = {}
        for sg in net.subgraphs:
            ks = generate_sketches(sg, target)
            self.sketches[sg.id] = ks
            for sk in ks:
                self.contexts[sk.id] = SketchContext(sg, sk, target)
            self.slots[sg.id] = max(self.contexts[sk.id].num_slots
                                    for sk in ks)
        flens = {self.contexts[sk.id].feature_len
                 for ks in self.sketches.values() for sk in ks}
        if len(flens) != 1:
            raise ValueError("inconsistent feature lengths across sketches")
        self.feature_len = flens.pop()

        rlcfg = cfg.rl_config()
        self.agents = {}
        self.buffers = {}
        for sg in net.subgraphs:
            s = self.slots[sg.id]
            policy = PolicyNet(self.feature_len, (s * s + 1, 3, 3, 3),
                               rlcfg, self.rng)
            value = ValueNet(self.feature_len, rlcfg, self.rng)
            self.agents[sg.id] = _Agent(
                policy=policy, value=value,
                opt_pi=Adam(policy.params(), rlcfg.lr_actor),
                opt_v=Adam(value.params(), rlcfg.lr_critic))
            self.buffers[sg.id] = ReplayBuffer(rlcfg.buffer_capacity)

        self.model = SurrogateModel(cfg.gbt_config())
        self.sub_window = SlidingWindowStats(window=cfg.bandit_window)
        self.sketch_windows = {sg.id: SlidingWindowStats(window=cfg.bandit_window)
                               for sg in net.subgraphs}
        self.sub_stats = {sg.id: SubgraphStats(weight=sg.weight, flops=sg.flops)
                          for sg in net.subgraphs}
        self.similar = {sg.id: similar_subgraphs(net, sg.id)
                        for sg in net.subgraphs}

        self.measured: set[str] = set()
        self.best_state: dict[str, str] = {}
        self.trials_used = 0
        self.round_idx = 0
        self.order_counter = 0
        self.curve: list = []
        self.consecutive_empty = 0

        self.out_dir = out_dir
        self.log = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.log = TrajectoryLogger(os.path.join(out_dir, "trajectory.jsonl"))
            if self.log.fresh:
                self.log.write({"event": "session_start",
                                "workload": net.name,
                                "searcher": self.searcher.value,
                                "seed": cfg.seed,
                                "config": cfg.to_dict(),
                                "subgraphs": {sg.id: {"weight": sg.weight,
                                                      "flops": sg.flops}
                                              for sg in net.subgraphs}})

    # -- selection -----------------------------------------------------------

    def _select_subgraph(self):
        n = len(self.net.subgraphs)
        bcfg = self.cfg.bandit_config()
        if self.searcher is SearcherKind.RANDOM:
            return int(self.rng.integers(n)), "random", []
        if self.searcher in _BANDIT_SUBGRAPH:
            idx = swucb_select(self.sub_window, n, bcfg)
            return idx, "swucb", []
        rewards = [subgraph_reward(self.sub_stats, self.similar, sg.id, bcfg)
                   for sg in self.net.subgraphs]
        best = 0
        for i in range(1, n):
            if rewards[i] > rewards[best]:
                best = i
        return best, "greedy", [_enc(r) for r in rewards]

    def _select_sketch(self, sg_id: str) -> int:
        ks = self.sketches[sg_id]
        if self.searcher in _RL_SEARCHERS:
            return swucb_select(self.sketch_windows[sg_id], len(ks),
                                self.cfg.bandit_config())
        return int(self.rng.integers(len(ks)))

    # -- episode ------------------------------------------------------------

    def _uniform_actions(self, masks):
        m = len(masks[0])
        acts = np.zeros((m, len(masks)), dtype=np.int64)
        for h, mk in enumerate(masks):
            for r in range(m):
                valid = np.flatnonzero(mk[r])
                acts[r, h] = valid[int(self.rng.integers(len(valid)))]
        return acts

    def _run_episode(self, sg, sketch, rnd: int):
        cfg = self.cfg
        ctx = self.contexts[sketch.id]
        S = self.slots[sg.id]
        rl = self.searcher in _RL_SEARCHERS
        adaptive = self.searcher in _ADAPTIVE_STOP
        stopcfg = cfg.stop_config(adaptive)
        rlcfg = cfg.rl_config()
        agent = self.agents[sg.id]
        buf = self.buffers[sg.id]

        p = cfg.tracks
        budget = p * cfg.track_len
        states = sample_initial_schedules(sketch, p, self.rng)
        feats = [ctx.featurize(s) for s in states]
        scores = self.model.predict(np.stack(feats))
        ts = TrackSet(states, feats, scores)

        entries: list[CandidateEntry] = []
        used = 0
        t = 0
        while not episode_done(ts.alive_count(), used, budget, stopcfg):
            t += 1
            live = ts.alive()
            m = min(len(live), budget - used)
            sel = live[:m]
            X = np.stack([tr.features for tr in sel])
            mask_objs = [action_mask(tr.state, sketch, S) for tr in sel]
            masks = [np.stack([mo.as_tuple()[h] for mo in mask_objs])
                     for h in range(4)]
            if rl:
                acts, logp = select_actions(agent.policy, X, masks, self.rng)
            else:
                acts = self._uniform_actions(masks)
            new_states = [apply_action(tr.state, decode_action(acts[i], S),
                                       sketch)
                          for i, tr in enumerate(sel)]
            new_feats = [ctx.featurize(s) for s in new_states]
            Xn = np.stack(new_feats)
            old_scores = np.asarray([tr.score for tr in sel])
            new_scores = self.model.predict(Xn)
            rewards = (new_scores - old_scores) / old_scores

            adv = None
            if rl:
                v_cur = agent.value.estimate(X)
                v_next = agent.value.estimate(Xn)
                adv = advantage(rewards, v_next, v_cur, rlcfg.discount)
                td = rewards + rlcfg.discount * v_next
                for i, tr in enumerate(sel):
                    buf.push(Transition(
                        features=X[i], next_features=Xn[i],
                        actions=acts[i].copy(), logp=float(logp[i]),
                        reward=float(rewards[i]), advantage=float(adv[i]),
                        td_target=float(td[i]),
                        masks=tuple(mk[i].copy() for mk in masks)))
            for i, tr in enumerate(sel):
                tr.advance(new_states[i], new_feats[i], float(new_scores[i]))
                entries.append(CandidateEntry(
                    canonical=new_states[i].canonical(),
                    features=new_feats[i], state=new_states[i],
                    order=self.order_counter))
                self.order_counter += 1
            used += m
            if self.log:
                self.log.write({"event": "episode_step", "round": rnd,
                                "step": t, "alive": m,
                                "mean_reward": float(np.mean(rewards)),
                                "rewards": [float(r) for r in rewards]})
            if adaptive and should_cull(t, stopcfg) and used < budget:
                adv_map = {tr.index: float(adv[i]) for i, tr in enumerate(sel)}
                gone = ts.cull(adv_map, stopcfg)
                if gone and self.log:
                    self.log.write({"event": "cull", "round": rnd, "step": t,
                                    "eliminated": gone,
                                    "alive": ts.alive_count()})
            if rl and t % rlcfg.train_interval == 0 and len(buf) >= 2:
                batch = buf.sample(self.rng, rlcfg.minibatch)
                metrics = ppo_update(agent.policy, agent.value, agent.opt_pi,
                                     agent.opt_v, batch, rlcfg)
                if self.log:
                    self.log.write({"event": "train", "round": rnd, "step": t,
                                    **{k: _enc(v) for k, v in metrics.items()}})
        if self.log:
            self.log.write({"event": "episode_end", "round": rnd,
                            "visited": used,
                            "tracks": [{"index": tr.index, "len": tr.steps,
                                        "best_step": tr.best_step,
                                        "alive": tr.alive}
                                       for tr in ts.tracks if tr.steps > 0]})
        return entries

    def _random_candidates(self, sketch, k: int):
        ctx = self.contexts[sketch.id]
        out = []
        seen = set()
        tries = 0
        while len(out) < k and tries < 200 * k:
            tries += 1
            s = sample_initial_schedules(sketch, 1, self.rng)[0]
            c = s.canonical()
            if c in self.measured or c in seen:
                continue
            seen.add(c)
            out.append(CandidateEntry(canonical=c, features=ctx.featurize(s),
                                      state=s, order=self.order_counter))
            self.order_counter += 1
        return out

    # -- rounds --------------------------------------------------------------

    def run_round(self) -> None:
        cfg = self.cfg
        rnd = self.round_idx + 1
        k_hat = min(cfg.top_k, cfg.total_trials - self.trials_used)
        sg_idx, rule, rewards = self._select_subgraph()
        sg = self.net.subgraphs[sg_idx]
        sketch_idx = self._select_sketch(sg.id)
        sketch = self.sketches[sg.id][sketch_idx]
        if self.log:
            rec = {"event": "round_start", "round": rnd, "subgraph": sg.id,
                   "sketch": sketch.id, "rule": rule, "budget_k": k_hat,
                   "trials_used": self.trials_used}
            if rewards:
                rec["subgraph_rewards"] = rewards
            self.log.write(rec)

        if self.searcher is SearcherKind.RANDOM:
            chosen = self._random_candidates(sketch, k_hat)
        else:
            entries = self._run_episode(sg, sketch, rnd)
            chosen = rank_scores(self.model, entries, k_hat,
                                 exclude=self.measured)

        ctx = self.contexts[sketch.id]
        results = self.backend.measure_batch(
            [MeasureRequest(state=e.state, ctx=ctx) for e in chosen])

        st = self.sub_stats[sg.id]
        round_best_thr = 0.0
        n_valid = 0
        n_invalid = 0
        for e, res in zip(chosen, results):
            self.measured.add(e.canonical)
            self.trials_used += 1
            if not res.valid:
                n_invalid += 1
                continue
            n_valid += 1
            if self.searcher is not SearcherKind.RANDOM:
                self.model.observe(e.features, res.throughput, sg.id)
            if res.throughput > round_best_thr:
                round_best_thr = res.throughput
            if res.time_seconds < st.best_time:
                st.best_time = res.time_seconds
                st.best_throughput = sg.flops / res.time_seconds
                self.best_state[sg.id] = e.canonical
        st.trials += len(chosen)
        st.note_round()
        self.consecutive_empty = 0 if chosen else self.consecutive_empty + 1

        # Sketch-level bandit value: this round's best throughput against the
        # subgraph's best so far. An all-invalid round records zero.
        x_val = None
        if self.searcher in _RL_SEARCHERS and chosen:
            x_val = (round_best_thr / st.best_throughput
                     if n_valid and st.best_throughput > 0 else 0.0)
            self.sketch_windows[sg.id].record(sketch_idx, x_val)

        r_val = None
        if self.searcher in _BANDIT_SUBGRAPH:
            r = subgraph_reward(self.sub_stats, self.similar, sg.id,
                                cfg.bandit_config())
            if math.isfinite(r):
                r_val = r
                self.sub_window.record(sg_idx, r, t=rnd)

        fit = None
        if self.searcher is not SearcherKind.RANDOM and self.model.n_observed:
            fit = self.model.fit_round()

        if self.log:
            self.log.write({"event": "measure", "round": rnd,
                            "subgraph": sg.id, "sketch": sketch.id,
                            "requested": k_hat, "measured": len(chosen),
                            "valid": n_valid, "invalid": n_invalid,
                            "round_best_throughput": round_best_thr,
                            "best_time": _enc(st.best_time),
                            "sketch_value": x_val,
                            "subgraph_reward": _enc(r_val),
                            "trials_used": self.trials_used})
            if fit:
                self.log.write({"event": "model_fit", "round": rnd,
                                "examples": fit.n_examples,
                                "loss_before": fit.loss_before,
                                "loss_after": fit.loss_after})
        self.round_idx = rnd
        self.curve.append([self.trials_used, _enc(self.f_estimate())])
        if self.out_dir is not None:
            self.save(os.path.join(self.out_dir, "checkpoint.bin"))
            with open(os.path.join(self.out_dir, "model.txt"), "w") as fh:
                fh.write(self.model.dump_text())

    def run(self, max_rounds: int | None = None) -> dict:
        done = 0
        while self.trials_used < self.cfg.total_trials:
            if max_rounds is not None and done >= max_rounds:
                break
            if self.consecutive_empty >= 10:
                if self.log:
                    self.log.write({"event": "exhausted",
                                    "round": self.round_idx})
                break
            self.run_round()
            done += 1
        report = self.report()
        if self.log and self.trials_used >= self.cfg.total_trials:
            self.log.write({"event": "session_end",
                            "trials_used": self.trials_used,
                            "rounds": self.round_idx,
                            "f_estimate": _enc(self.f_estimate())})
        return report

    # -- reporting -----------------------------------------------------------

    def f_estimate(self) -> float | None:
        total = 0.0
        for sg in self.net.subgraphs:
            st = self.sub_stats[sg.id]
            if not math.isfinite(st.best_time):
                return None
            total += sg.weight * st.best_time
        return total

    def report(self) -> dict:
        subs = {}
        for sg in self.net.subgraphs:
            st = self.sub_stats[sg.id]
            subs[sg.id] = {"weight": sg.weight, "flops": sg.flops,
                           "trials": st.trials,
                           "best_time": _enc(st.best_time),
                           "best_throughput": st.best_throughput,
                           "best_schedule": self.best_state.get(sg.id)}
        return {"workload": self.net.name, "searcher": self.searcher.value,
                "seed": self.cfg.seed, "trials_used": self.trials_used,
                "rounds": self.round_idx, "f_estimate": _enc(self.f_estimate()),
                "all_measured": self.f_estimate() is not None,
                "visited_candidates": self.order_counter,
                "subgraphs": subs, "curve": self.curve}

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        meta, arrays = self._collect_state()
        write_checkpoint(path, meta, arrays)

    def _collect_state(self):
        cfg = self.cfg
        arrays: dict[str, np.ndarray] = {}
        meta: dict = {
            "version": 1,
            "searcher": self.searcher.value,
            "cfg": cfg.to_dict(),
            "workload_path": self.workload_path,
            "net_name": self.net.name,
            "target": {"name": self.target.name,
                       "tiling_levels": self.target.tiling_levels,
                       "unroll_depths": list(self.target.unroll_depths),
                       "parallel_fuse_cap": self.target.parallel_fuse_cap,
                       "max_feature_dims": self.target.max_feature_dims},
            "trials_used": self.trials_used,
            "round_idx": self.round_idx,
            "order_counter": self.order_counter,
            "consecutive_empty": self.consecutive_empty,
            "rng_state": self.rng.bit_generator.state,
            "measured": sorted(self.measured),
            "curve": self.curve,
            "best_state": dict(sorted(self.best_state.items())),
        }
        if isinstance(self.backend, SimulatedBackend):
            meta["backend"] = {"kind": "sim",
                               "params": _sim_params_dict(self.backend.params),
                               "rng_state": self.backend._rng.bit_generator.state}
        elif isinstance(self.backend, ExternalBackend):
            meta["backend"] = {"kind": "external",
                               "command": self.backend.command,
                               "min_repeat_seconds": self.backend.min_repeat_seconds,
                               "timeout": self.backend.timeout}
        else:
            meta["backend"] = {"kind": "custom"}

        stats = {}
        for sg_id, st in self.sub_stats.items():
            stats[sg_id] = {"weight": st.weight, "flops": st.flops,
                            "trials": st.trials,
                            "best_time": _enc(st.best_time),
                            "best_throughput": st.best_throughput,
                            "history": [[t, g] for t, g in st.history]}
        meta["sub_stats"] = stats

        def window_state(w: SlidingWindowStats):
            return {"t_latest": w.t_latest,
                    "entries": [[t, a, v] for t, a, v in w.entries]}

        meta["sub_window"] = window_state(self.sub_window)
        meta["sketch_windows"] = {k: window_state(w)
                                  for k, w in sorted(self.sketch_windows.items())}

        meta["adam"] = {}
        for sg_id, agent in self.agents.items():
            meta["adam"][sg_id] = {"pi_t": agent.opt_pi.t, "v_t": agent.opt_v.t}
            for i, prm in enumerate(agent.policy.params()):
                arrays[f"agent/{sg_id}/pi/{i}"] = prm
                arrays[f"agent/{sg_id}/pi_m/{i}"] = agent.opt_pi.m[i]
                arrays[f"agent/{sg_id}/pi_v/{i}"] = agent.opt_pi.v[i]
            for i, prm in enumerate(agent.value.params()):
                arrays[f"agent/{sg_id}/vf/{i}"] = prm
                arrays[f"agent/{sg_id}/vf_m/{i}"] = agent.opt_v.m[i]
                arrays[f"agent/{sg_id}/vf_v/{i}"] = agent.opt_v.v[i]

        meta["buffers"] = {}
        for sg_id, buf in self.buffers.items():
            items = list(buf.buf)
            meta["buffers"][sg_id] = len(items)
            if not items:
                continue
            pre = f"buffer/{sg_id}/"
            arrays[pre + "features"] = np.stack([t.features for t in items])
            arrays[pre + "next_features"] = np.stack([t.next_features
                                                      for t in items])
            arrays[pre + "actions"] = np.stack([t.actions for t in items])
            arrays[pre + "scalars"] = np.asarray(
                [[t.logp, t.reward, t.advantage, t.td_target] for t in items])
            for h in range(4):
                arrays[pre + f"mask{h}"] = np.stack([t.masks[h] for t in items])

        model = self.model
        meta["model"] = {"base": model.base, "fitted": model.fitted,
                         "n_trees": len(model.trees),
                         "n_examples": model.n_observed,
                         "sg_ids": list(model._sg),
                         "best_thr": dict(sorted(model._best_thr.items()))}
        if model.n_observed:
            arrays["model/data_X"] = np.stack(model._feat)
            arrays["model/data_thr"] = np.asarray(model._thr)
        for i, tree in enumerate(model.trees):
            pre = f"model/tree{i:03d}/"
            arrays[pre + "feature"] = tree.feature
            arrays[pre + "threshold"] = tree.threshold
            arrays[pre + "left"] = tree.left
            arrays[pre + "right"] = tree.right
            arrays[pre + "value"] = tree.value
        return meta, arrays

    def _restore_state(self, meta: dict, arrays: dict) -> None:
        from .costmodel import _Tree

        self.trials_used = int(meta["trials_used"])
        self.round_idx = int(meta["round_idx"])
        self.order_counter = int(meta["order_counter"])
        self.consecutive_empty = int(meta.get("consecutive_empty", 0))
        self.measured = set(meta["measured"])
        self.curve = [list(c) for c in meta["curve"]]
        self.best_state = dict(meta["best_state"])
        self.rng.bit_generator.state = meta["rng_state"]
        if meta["backend"]["kind"] == "sim" \
                and isinstance(self.backend, SimulatedBackend):
            self.backend._rng.bit_generator.state = meta["backend"]["rng_state"]

        for sg_id, raw in meta["sub_stats"].items():
            st = self.sub_stats[sg_id]
            st.trials = int(raw["trials"])
            st.best_time = _dec_inf(raw["best_time"])
            st.best_throughput = float(raw["best_throughput"])
            st.history = [(int(t), float(g)) for t, g in raw["history"]]

        def load_window(w: SlidingWindowStats, raw):
            w.t_latest = 0
            w.entries.clear()
            w.counts.clear()
            w.sums.clear()
            for t, a, v in raw["entries"]:
                w.record(int(a), float(v), t=int(t))
            w.t_latest = int(raw["t_latest"])

        load_window(self.sub_window, meta["sub_window"])
        for k, raw in meta["sketch_windows"].items():
            load_window(self.sketch_windows[k], raw)

        for sg_id, agent in self.agents.items():
            ad = meta["adam"][sg_id]
            agent.opt_pi.t = int(ad["pi_t"])
            agent.opt_v.t = int(ad["v_t"])
            for i, prm in enumerate(agent.policy.params()):
                prm[...] = arrays[f"agent/{sg_id}/pi/{i}"]
                agent.opt_pi.m[i][...] = arrays[f"agent/{sg_id}/pi_m/{i}"]
                agent.opt_pi.v[i][...] = arrays[f"agent/{sg_id}/pi_v/{i}"]
            for i, prm in enumerate(agent.value.params()):
                prm[...] = arrays[f"agent/{sg_id}/vf/{i}"]
                agent.opt_v.m[i][...] = arrays[f"agent/{sg_id}/vf_m/{i}"]
                agent.opt_v.v[i][...] = arrays[f"agent/{sg_id}/vf_v/{i}"]

        for sg_id, buf in self.buffers.items():
            buf.buf.clear()
            n = int(meta["buffers"][sg_id])
            if n == 0:
                continue
            pre = f"buffer/{sg_id}/"
            X = arrays[pre + "features"]
            Xn = arrays[pre + "next_features"]
            A = arrays[pre + "actions"]
            S = arrays[pre + "scalars"]
            ms = [arrays[pre + f"mask{h}"] for h in range(4)]
            for i in range(n):
                buf.push(Transition(
                    features=X[i], next_features=Xn[i], actions=A[i],
                    logp=float(S[i, 0]), reward=float(S[i, 1]),
                    advantage=float(S[i, 2]), td_target=float(S[i, 3]),
                    masks=tuple(ms[h][i] for h in range(4))))

        mmeta = meta["model"]
        self.model.base = float(mmeta["base"])
        self.model.fitted = bool(mmeta["fitted"])
        self.model._feat = []
        self.model._thr = []
        self.model._sg = list(mmeta["sg_ids"])
        self.model._best_thr = {k: float(v)
                                for k, v in mmeta["best_thr"].items()}
        if mmeta["n_examples"]:
            X = arrays["model/data_X"]
            thr = arrays["model/data_thr"]
            self.model._feat = [X[i] for i in range(len(thr))]
            self.model._thr = [float(v) for v in thr]
        self.model.trees = []
        for i in range(int(mmeta["n_trees"])):
            pre = f"model/tree{i:03d}/"
            self.model.trees.append(_Tree(
                feature=arrays[pre + "feature"],
                threshold=arrays[pre + "threshold"],
                left=arrays[pre + "left"],
                right=arrays[pre + "right"],
                value=arrays[pre + "value"]))

    def best_schedule_state(self, sg_id: str):
        """Parse the best measured schedule of a subgraph back into a state."""
        canon = self.best_state.get(sg_id)
        if canon is None:
            return None
        sk_id = canon.split("|", 1)[0]
        for sk in self.sketches[sg_id]:
            if sk.id == sk_id:
                return parse_state(canon, sk)
        raise ValueError(f"unknown sketch in stored schedule: {sk_id}")


def _sim_params_dict(p: SimHwParams) -> dict:
    d = asdict(p)
    d["unroll_factors"] = [[int(k), float(v)] for k, v in p.unroll_factors]
    return d


def sim_params_from_dict(d: dict) -> SimHwParams:
    d = dict(d)
    d["unroll_factors"] = tuple((int(k), float(v))
                                for k, v in d.get("unroll_factors", []))
    return SimHwParams(**d)


def resume_session(path: str, out_dir: str | None = None,
                   backend=None, workload_path: str | None = None,
                   total_trials: int | None = None) -> TuningSession:
    """Rebuild a session from a checkpoint and continue it bit-exactly."""
    meta, arrays = read_checkpoint(path)
    wpath = workload_path or meta.get("workload_path")
    if wpath is None:
        raise ValueError("checkpoint has no workload path; pass one")
    net = load_network(wpath)
    tgt = meta["target"]
    target = TargetConfig(name=tgt["name"],
                          tiling_levels=int(tgt["tiling_levels"]),
                          unroll_depths=tuple(tgt["unroll_depths"]),
                          parallel_fuse_cap=int(tgt["parallel_fuse_cap"]),
                          max_feature_dims=int(tgt["max_feature_dims"]))
    cfg_d = dict(meta["cfg"])
    if total_trials is not None:
        cfg_d["total_trials"] = total_trials
    cfg = TunerConfig.from_dict(cfg_d)
    if backend is None:
        binfo = meta["backend"]
        if binfo["kind"] == "sim":
            backend = SimulatedBackend(sim_params_from_dict(binfo["params"]))
        elif binfo["kind"] == "external":
            backend = ExternalBackend(binfo["command"],
                                      min_repeat_seconds=binfo["min_repeat_seconds"],
                                      timeout=binfo["timeout"])
        else:
            raise ValueError("cannot rebuild a custom backend; pass one")
    session = TuningSession(net, target, cfg, backend,
                            SearcherKind(meta["searcher"]),
                            out_dir=out_dir, workload_path=wpath)
    session._restore_state(meta, arrays)
    return session
