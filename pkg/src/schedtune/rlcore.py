"""Actor-critic core over masked categorical action heads.

Pure numpy float64 networks with hand-written backprop keep runs bitwise
reproducible and make analytic gradients directly checkable against finite
differences. The policy shares a tanh trunk across four output heads, one
per modification subspace; invalid choices are masked to probability zero
before sampling. Updates use the clipped surrogate objective on one-step
advantages from the learned cost model.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class RlDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class RlConfig:
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    discount: float = 0.9
    clip_ratio: float = 0.2
    value_loss_weight: float = 0.5
    entropy_weight: float = 0.01
    hidden: tuple[int, ...] = (128, 128)
    minibatch: int = 256
    buffer_capacity: int = 4096
    train_interval: int = 2

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must be in [0, 1]")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0, 1)")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")
        if self.train_interval < 1 or self.minibatch < 1:
            raise ValueError("train_interval and minibatch must be >= 1")


class Adam:
    """Standard Adam on a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class Mlp:
    """Dense tanh network; the final layer stays linear."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 out_scale: float = 1.0):
        self.Ws: list[np.ndarray] = []
        self.bs: list[np.ndarray] = []
        for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = math.sqrt(2.0 / (fin + fout))
            if i == len(sizes) - 2:
                scale *= out_scale
            self.Ws.append(rng.normal(0.0, scale, size=(fin, fout)))
            self.bs.append(np.zeros(fout))

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.Ws, self.bs):
            out.append(W)
            out.append(b)
        return out

    def forward(self, x: np.ndarray):
        acts = [x]
        n = len(self.Ws)
        a = x
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            z = a @ W + b
            a = z if i == n - 1 else np.tanh(z)
            acts.append(a)
        return a, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray):
        """Returns (grads aligned with params(), gradient wrt the input)."""
        n = len(self.Ws)
        grads: list[np.ndarray] = [None] * (2 * n)
        d = dout
        for i in range(n - 1, -1, -1):
            if i != n - 1:
                d = d * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.Ws[i].T
        return grads, d


class PolicyNet:
    """Shared trunk with one categorical head per modification subspace."""

    def __init__(self, feature_len: int, head_sizes: tuple[int, ...],
                 cfg: RlConfig, rng: np.random.Generator):
        self.head_sizes = tuple(head_sizes)
        self.trunk = Mlp([feature_len, *cfg.hidden], rng)
        # Near-zero head weights start the policy close to masked-uniform.
        self.heads = [Mlp([cfg.hidden[-1], k], rng, out_scale=0.01)
                      for k in head_sizes]

    def params(self) -> list[np.ndarray]:
        out = self.trunk.params()
        for h in self.heads:
            out.extend(h.params())
        return out

    def forward(self, x: np.ndarray):
        hid, trunk_acts = self.trunk.forward(x)
        # The trunk's last layer feeds the heads through a tanh.
        hid = np.tanh(hid)
        logits = []
        head_acts = []
        for h in self.heads:
            out, acts = h.forward(hid)
            logits.append(out)
            head_acts.append(acts)
        return logits, (trunk_acts, hid, head_acts)

    def backward(self, cache, dlogits: list[np.ndarray]):
        trunk_acts, hid, head_acts = cache
        dhid = np.zeros_like(hid)
        head_grads = []
        for h, acts, dl in zip(self.heads, head_acts, dlogits):
            g, dx = h.backward(acts, dl)
            head_grads.extend(g)
            dhid += dx
        dz = dhid * (1.0 - hid ** 2)
        trunk_grads, _ = self.trunk.backward(trunk_acts, dz)
        return trunk_grads + head_grads


class ValueNet:
    def __init__(self, feature_len: int, cfg: RlConfig,
                 rng: np.random.Generator):
        self.net = Mlp([feature_len, *cfg.hidden, 1], rng)

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def forward(self, x: np.ndarray):
        out, acts = self.net.forward(x)
        return out[:, 0], acts

    def estimate(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts, dout: np.ndarray):
        grads, _ = self.net.backward(acts, dout[:, None])
        return grads


# ---------------------------------------------------------------------------
# Masked categorical machinery


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray):
    """Log-probabilities and probabilities with invalid entries at zero.

    Every row must keep at least one valid entry; probabilities over valid
    entries sum to one and invalid entries come back as exactly zero.
    """
    if not mask.any(axis=1).all():
        raise RlDivergedError("action mask with no valid entry")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    logp = z - zmax - np.log(s)
    return logp, p


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    c = np.cumsum(p, axis=1)
    u = rng.random((len(p), 1))
    idx = (c < u).sum(axis=1)
    idx = np.minimum(idx, p.shape[1] - 1)
    # Float-edge landings on a zero-probability cell walk back to a valid one.
    for r in np.nonzero(p[np.arange(len(p)), idx] <= 0.0)[0]:
        j = int(idx[r])
        while j > 0 and p[r, j] <= 0.0:
            j -= 1
        idx[r] = j
    return idx.astype(np.int64)


def select_actions(policy: PolicyNet, feats: np.ndarray,
                   masks: list[np.ndarray], rng: np.random.Generator):
    """Sample one index per head; returns (B, heads) actions and joint logp."""
    logits, _ = policy.forward(feats)
    B = len(feats)
    actions = np.zeros((B, len(logits)), dtype=np.int64)
    logp = np.zeros(B)
    for h, (lg, mk) in enumerate(zip(logits, masks)):
        lp, p = masked_log_softmax(lg, mk)
        a = sample_categorical(p, rng)
        actions[:, h] = a
        logp += lp[np.arange(B), a]
    return actions, logp


def advantage(reward: np.ndarray, v_next: np.ndarray, v_cur: np.ndarray,
              discount: float) -> np.ndarray:
    """One-step advantage: r + discount * V(s') - V(s)."""
    return reward + discount * v_next - v_cur


# ---------------------------------------------------------------------------
# Replay buffer


@dataclass(frozen=True)
class Transition:
    features: np.ndarray
    next_features: np.ndarray
    actions: np.ndarray
    logp: float
    reward: float
    advantage: float
    td_target: float
    masks: tuple


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.buf: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.buf)

    def push(self, tr: Transition) -> None:
        self.buf.append(tr)

    def extend(self, trs) -> None:
        for tr in trs:
            self.buf.append(tr)

    def sample(self, rng: np.random.Generator, size: int) -> list[Transition]:
        n = len(self.buf)
        if n == 0:
            return []
        take = min(size, n)
        idx = rng.choice(n, size=take, replace=False)
        items = list(self.buf)
        return [items[int(i)] for i in idx]


def batch_arrays(batch: list[Transition]):
    """Stack a transition list into training arrays."""
    X = np.stack([t.features for t in batch])
    actions = np.stack([t.actions for t in batch])
    logp_old = np.asarray([t.logp for t in batch])
    adv = np.asarray([t.advantage for t in batch])
    td = np.asarray([t.td_target for t in batch])
    heads = len(batch[0].masks)
    masks = [np.stack([t.masks[h] for t in batch]) for h in range(heads)]
    return X, actions, logp_old, adv, td, masks


# ---------------------------------------------------------------------------
# Losses and gradients


def _policy_forward(policy: PolicyNet, X, masks, actions, logp_old, adv, cfg):
    logits, cache = policy.forward(X)
    B = len(X)
    rows = np.arange(B)
    logp_new = np.zeros(B)
    per_head = []
    ent_total = np.zeros(B)
    for h, (lg, mk) in enumerate(zip(logits, masks)):
        lp, p = masked_log_softmax(lg, mk)
        lp_safe = np.where(mk, lp, 0.0)
        ent = -(p * lp_safe).sum(axis=1)
        ent_total += ent
        logp_new += lp[rows, actions[:, h]]
        per_head.append((lp_safe, p, ent))
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    s_un = ratio * adv
    s_cl = clipped * adv
    policy_loss = -np.minimum(s_un, s_cl).mean()
    entropy = ent_total.mean()
    loss = policy_loss - cfg.entropy_weight * entropy
    aux = (cache, per_head, ratio, s_un, s_cl, policy_loss, entropy)
    return loss, aux


def actor_loss(policy: PolicyNet, X, masks, actions, logp_old, adv,
               cfg: RlConfig) -> float:
    """Clipped surrogate plus entropy bonus, forward only."""
    loss, _ = _policy_forward(policy, X, masks, actions, logp_old, adv, cfg)
    return float(loss)


def actor_grads(policy: PolicyNet, X, masks, actions, logp_old, adv,
                cfg: RlConfig):
    loss, aux = _policy_forward(policy, X, masks, actions, logp_old, adv, cfg)
    cache, per_head, ratio, s_un, s_cl, policy_loss, entropy = aux
    B = len(X)
    rows = np.arange(B)
    # d(policy_loss)/d logp_new: the clipped branch blocks the gradient.
    coef = np.where(s_un <= s_cl, ratio * adv, 0.0)
    dlogp = -coef / B
    dlogits = []
    for h, (lp_safe, p, ent) in enumerate(per_head):
        onehot = np.zeros_like(p)
        onehot[rows, actions[:, h]] = 1.0
        dz = dlogp[:, None] * (onehot - p)
        # d(-w_ent * mean(H)) / dz = (w_ent / B) * p * (log p + H)
        dz += (cfg.entropy_weight / B) * p * (lp_safe + ent[:, None])
        dlogits.append(dz)
    grads = policy.backward(cache, dlogits)
    stats = {"policy_loss": float(policy_loss), "entropy": float(entropy),
             "mean_ratio": float(ratio.mean())}
    return float(loss), grads, stats


def critic_loss(value: ValueNet, X, td, cfg: RlConfig) -> float:
    v, _ = value.forward(X)
    return float(cfg.value_loss_weight * np.mean((v - td) ** 2))


def critic_grads(value: ValueNet, X, td, cfg: RlConfig):
    v, acts = value.forward(X)
    loss = cfg.value_loss_weight * np.mean((v - td) ** 2)
    dv = cfg.value_loss_weight * 2.0 * (v - td) / len(X)
    grads = value.backward(acts, dv)
    return float(loss), grads


def ppo_update(policy: PolicyNet, value: ValueNet, opt_pi: Adam, opt_v: Adam,
               batch: list[Transition], cfg: RlConfig) -> dict:
    """One clipped-surrogate gradient step on each network."""
    X, actions, logp_old, adv, td, masks = batch_arrays(batch)
    a_loss, a_grads, stats = actor_grads(policy, X, masks, actions,
                                         logp_old, adv, cfg)
    v_loss, v_grads = critic_grads(value, X, td, cfg)
    for name, val in (("actor loss", a_loss), ("critic loss", v_loss)):
        if not math.isfinite(val):
            raise RlDivergedError(f"{name} is not finite: {val}")
    for g in a_grads + v_grads:
        if not np.isfinite(g).all():
            raise RlDivergedError("non-finite gradient in update")
    opt_pi.step(a_grads)
    opt_v.step(v_grads)
    return {"actor_loss": a_loss, "value_loss": v_loss,
            "policy_loss": stats["policy_loss"], "entropy": stats["entropy"],
            "mean_ratio": stats["mean_ratio"], "batch": len(batch)}
