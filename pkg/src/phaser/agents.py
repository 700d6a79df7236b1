"""Policy/value update rules with hand-derived gradients.

Every loss here is a pure function of (network params, batch), so each
analytic gradient can be checked against central finite differences.
The *_update wrappers apply one optimizer step; training loops live in
drivers.py.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PhaserError, ShapeMismatch
from .mlp import log_softmax, softmax

DELTA_CHOICES = 3  # one head per sequence slot, choices {-1, 0, +1}


@dataclass
class Trajectory:
    """One collected episode: parallel per-step arrays plus bookkeeping."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: list
    log_probs: np.ndarray | None = None
    values: np.ndarray | None = None
    program: str = ""

    def __post_init__(self):
        self.observations = np.atleast_2d(
            np.asarray(self.observations, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.int64)
        t = self.observations.shape[0]
        if len(self.actions) != t or len(self.rewards) != t:
            raise ShapeMismatch("trajectory arrays have unequal lengths")
        for arr in (self.log_probs, self.values):
            if arr is not None and len(arr) != t:
                raise ShapeMismatch("trajectory arrays have unequal lengths")

    def __len__(self):
        return self.observations.shape[0]

    @property
    def episode_return(self):
        return float(sum(float(r) for r in self.rewards))


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    gamma: float = 1.0
    lr: float = 3e-4
    value_coef: float = 1.0
    entropy_coef: float = 0.01

    def __post_init__(self):
        if self.clip <= 0:
            raise PhaserError("clip must be positive")
        if not 0 < self.gamma <= 1:
            raise PhaserError("gamma must be in (0, 1]")
        if self.epochs < 1 or self.minibatch < 1:
            raise PhaserError("epochs and minibatch must be >= 1")


# -- action selection --------------------------------------------------

def act_epsilon_greedy(q_values, epsilon, rng):
    """Greedy on q_values with probability 1-epsilon. Ties resolve to the
    lowest action index (argmax returns the first maximum)."""
    q_values = np.asarray(q_values, dtype=np.float64)
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q_values.shape[-1]))
    return int(np.argmax(q_values))


def categorical_sample(logits, rng):
    p = softmax(np.asarray(logits, dtype=np.float64))
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(p) - 1)


def sample_deltas(logits, n, rng):
    """Sample one of {-1, 0, +1} per slot from n independent 3-way heads.
    logits has length 3n, grouped per slot."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != DELTA_CHOICES * n:
        raise ShapeMismatch(
            f"expected {DELTA_CHOICES * n} logits, got {logits.shape[-1]}")
    blocks = logits.reshape(n, DELTA_CHOICES)
    return np.array([categorical_sample(b, rng) - 1 for b in blocks],
                    dtype=np.int64)


def act(net, observation, rng, *, epsilon=None):
    """Pick an action from the net's output: epsilon-greedy over values
    when epsilon is given, otherwise a categorical softmax sample."""
    out = net.forward(np.asarray(observation, dtype=np.float64))
    if epsilon is not None:
        return act_epsilon_greedy(out, epsilon, rng)
    return categorical_sample(out, rng)


def multi_action_policy(net, positions, rng):
    """Deltas in {-1, 0, +1} for every slot, one 3-way head per slot."""
    logits = net.forward(np.asarray(positions, dtype=np.float64))
    return sample_deltas(logits, len(positions), rng)


def epsilon_at(step, total_steps, start=1.0, end=0.05):
    """Linear decay over the first half of training, flat afterwards."""
    half = max(1, total_steps // 2)
    frac = min(1.0, step / half)
    return start + (end - start) * frac


def returns_to_go(rewards, gamma=1.0):
    out = np.empty(len(rewards), dtype=np.float64)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[i]) + gamma * acc
        out[i] = acc
    return out


# -- replay ------------------------------------------------------------

class ReplayBuffer:
    """Ring buffer of (obs, action, reward, next_obs, done) transitions."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._n = 0
        self._pos = 0
        self._obs = None

    def _alloc(self, obs_dim):
        cap = self.capacity
        self._obs = np.zeros((cap, obs_dim))
        self._next = np.zeros((cap, obs_dim))
        self._act = np.zeros(cap, dtype=np.int64)
        self._rew = np.zeros(cap)
        self._done = np.zeros(cap)

    def push(self, obs, action, reward, next_obs, done):
        obs = np.asarray(obs, dtype=np.float64)
        if self._obs is None:
            self._alloc(obs.shape[0])
        i = self._pos
        self._obs[i] = obs
        self._next[i] = np.asarray(next_obs, dtype=np.float64)
        self._act[i] = action
        self._rew[i] = float(reward)
        self._done[i] = 1.0 if done else 0.0
        self._pos = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def __len__(self):
        return self._n

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self._n, size=batch_size)
        return (self._obs[idx], self._act[idx], self._rew[idx],
                self._next[idx], self._done[idx])


# -- shared categorical pieces -----------------------------------------

def _policy_forward(net, obs, actions, heads=None):
    """Log-probs of taken actions plus the cache needed for backprop.

    heads=None: one categorical over net.out_width, actions shape (T,).
    heads=n: n independent 3-way categoricals, actions shape (T, n)
    holding choice indices 0..2."""
    logits, cache = net.forward_cache(obs)
    if logits.ndim == 1:
        logits = logits[None, :]
    t = logits.shape[0]
    if heads is None:
        logp_all = log_softmax(logits)
        logp = logp_all[np.arange(t), actions]
        probs = np.exp(logp_all)
        return logp, probs, logits, cache
    blocks = logits.reshape(t, heads, DELTA_CHOICES)
    logp_all = log_softmax(blocks)
    rows = np.arange(t)[:, None]
    cols = np.arange(heads)[None, :]
    logp = logp_all[rows, cols, actions].sum(axis=1)
    probs = np.exp(logp_all)
    return logp, probs, logits, cache


def _dlogits_from_dlogp(probs, actions, coeff, heads=None):
    """Gradient of -sum_t coeff_t * logp_t in the logits, i.e.
    coeff * (p - onehot) rowwise - the descent direction when a
    weighted log-prob sum is being maximized."""
    if heads is None:
        t, k = probs.shape
        d = probs * coeff[:, None]
        d[np.arange(t), actions] -= coeff
        return d
    t = probs.shape[0]
    d = probs * coeff[:, None, None]
    rows = np.arange(t)[:, None]
    cols = np.arange(heads)[None, :]
    d[rows, cols, actions] -= coeff[:, None]
    return d.reshape(t, heads * DELTA_CHOICES)


# -- REINFORCE ---------------------------------------------------------

def reinforce_loss(net, trajectories, heads=None, baseline=True):
    """Mean-baseline policy-gradient loss over a batch of Trajectories.

    Loss = -(1/E) * sum_e (R_e - b) * sum_t log pi(a_t | s_t) with b the
    mean of the batch returns (0 when baseline is off); minimizing it
    ascends the usual estimator. Returns (loss, grads)."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    rets = np.array([tr.episode_return for tr in trajectories])
    b = rets.mean() if baseline else 0.0
    n_ep = len(trajectories)
    obs = np.concatenate([tr.observations for tr in trajectories])
    if heads is None:
        actions = np.concatenate([tr.actions for tr in trajectories])
    else:
        actions = np.concatenate(
            [tr.actions.reshape(-1, heads) for tr in trajectories])
    adv = np.concatenate(
        [np.full(len(tr), rets[i] - b) for i, tr in enumerate(trajectories)])

    logp, probs, _, cache = _policy_forward(net, obs, actions, heads)
    loss = -float((adv * logp).sum()) / n_ep
    dlogits = _dlogits_from_dlogp(probs, actions, adv / n_ep, heads)
    return loss, net.backward(cache, dlogits)


def reinforce_update(net, trajectories, optimizer, lr, heads=None,
                     baseline=True):
    loss, grads = reinforce_loss(net, trajectories, heads, baseline)
    optimizer.step(net, grads, lr)
    return loss


# -- PPO ---------------------------------------------------------------

def clip_objective(ratio, advantage, clip):
    """Elementwise clipped surrogate min(r*A, clip(r, 1-c, 1+c)*A) and its
    derivative in r. Once the clip binds the derivative is exactly 0."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    surr1 = ratio * advantage
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage
    obj = np.minimum(surr1, surr2)
    inside = (ratio > 1.0 - clip) & (ratio < 1.0 + clip)
    dr = np.where(surr1 <= surr2, advantage,
                  np.where(inside, advantage, 0.0))
    return obj, dr


def ppo_policy_loss(net, obs, actions, old_logp, advantages, clip=0.2,
                    entropy_coef=0.01, heads=None):
    """Clipped-surrogate loss with an entropy bonus; returns
    (loss, grads, stats). Gradients follow the active min() branch, so
    clipped samples contribute nothing. With heads=n the net emits n
    independent 3-way heads; the ratio uses the joint log-prob and the
    entropy sums over heads."""
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    old_logp = np.asarray(old_logp, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    t = obs.shape[0]

    logp, probs, logits, cache = _policy_forward(net, obs, actions, heads)
    ratio = np.exp(logp - old_logp)
    obj, dr = clip_objective(ratio, advantages, clip)

    logp_all = np.log(np.clip(probs, 1e-300, None))
    if heads is None:
        ent = -(probs * logp_all).sum(axis=1)
    else:
        ent_h = -(probs * logp_all).sum(axis=2)
        ent = ent_h.sum(axis=1)
    loss = -float(obj.mean()) - entropy_coef * float(ent.mean())

    # d obj/d logits = dr * r * (onehot - p); the loss carries -obj, so
    # the descent direction is (dr * r / t) * (p - onehot).
    coeff = (dr * ratio) / t
    dlogits = _dlogits_from_dlogp(probs, actions, coeff, heads)
    # dH/dz_j = -p_j (log p_j + H) within each head's block; the bonus
    # enters the loss negated.
    if heads is None:
        dent = -probs * (logp_all + ent[:, None])
    else:
        dent = (-probs * (logp_all + ent_h[..., None])).reshape(
            t, heads * DELTA_CHOICES)
    dlogits -= entropy_coef * dent / t

    stats = {
        "ratio_low": float(ratio.min()),
        "ratio_high": float(ratio.max()),
        "contained": float(np.mean(
            (ratio >= 1.0 - 2 * clip) & (ratio <= 1.0 + 2 * clip))),
        "clip_frac": float(np.mean(obj < ratio * advantages)),
        "entropy": float(ent.mean()),
    }
    return loss, net.backward(cache, dlogits), stats


def critic_loss(net, obs, returns):
    """Mean squared error of the scalar value head. Returns (loss, grads)."""
    obs = np.asarray(obs, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    values, cache = net.forward_cache(obs)
    if values.ndim == 1:
        values = values[None, :]
    diff = values[:, 0] - returns
    loss = float((diff ** 2).mean())
    dvals = np.zeros_like(values)
    dvals[:, 0] = 2.0 * diff / len(diff)
    return loss, net.backward(cache, dvals)


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(policy, critic, batch, policy_opt, critic_opt, rng,
               cfg=PpoConfig(), heads=None):
    """cfg.epochs of shuffled minibatch updates over one collected batch.

    batch: dict with obs (T, in), actions (T,) - or (T, heads) choice
    indices - old_logp (T,) and returns (T,) holding raw returns-to-go.
    Advantages are computed against the current critic once, then
    normalized over the whole batch. The critic descends squared error
    to the returns, scaled by cfg.value_coef."""
    obs = np.asarray(batch["obs"], dtype=np.float64)
    actions = np.asarray(batch["actions"], dtype=np.int64)
    old_logp = np.asarray(batch["old_logp"], dtype=np.float64)
    rets = np.asarray(batch["returns"], dtype=np.float64)
    t = obs.shape[0]

    values = critic.forward(obs)
    values = values[:, 0] if values.ndim == 2 else values[None][:, 0]
    adv = normalize_advantages(rets - values)

    stats = {"policy_loss": 0.0, "critic_loss": 0.0, "contained": 1.0,
             "entropy": 0.0, "updates": 0}
    for _ in range(cfg.epochs):
        order = rng.permutation(t)
        for lo in range(0, t, cfg.minibatch):
            part = order[lo:lo + cfg.minibatch]
            ploss, pgrads, pstats = ppo_policy_loss(
                policy, obs[part], actions[part], old_logp[part], adv[part],
                clip=cfg.clip, entropy_coef=cfg.entropy_coef, heads=heads)
            policy_opt.step(policy, pgrads, cfg.lr)
            closs, cgrads = critic_loss(critic, obs[part], rets[part])
            critic_opt.step(critic, cgrads, cfg.lr * cfg.value_coef)
            stats["policy_loss"] = ploss
            stats["critic_loss"] = closs
            stats["entropy"] = pstats["entropy"]
            stats["updates"] += 1
    # Containment is judged on the post-update ratios of the whole batch.
    logp, _, _, _ = _policy_forward(policy, obs, actions, heads)
    ratio = np.exp(logp - old_logp)
    stats["contained"] = float(np.mean(
        (ratio >= 1.0 - 2 * cfg.clip) & (ratio <= 1.0 + 2 * cfg.clip)))
    return stats


# -- DQN ---------------------------------------------------------------

def dqn_loss(net, target_net, batch, gamma=1.0):
    """One-step TD loss y = r + gamma * max_a' Q_target(s', a') * (1-done)
    against Q(s, a), mean squared over the batch. The target is treated
    as a constant. Returns (loss, grads)."""
    obs, actions, rewards, next_obs, done = batch
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    next_obs = np.atleast_2d(np.asarray(next_obs, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)

    q, cache = net.forward_cache(obs)
    if q.ndim == 1:
        q = q[None, :]
    b = q.shape[0]
    q_next = target_net.forward(next_obs)
    if q_next.ndim == 1:
        q_next = q_next[None, :]
    target = rewards + gamma * q_next.max(axis=1) * (1.0 - done)

    taken = q[np.arange(b), actions]
    diff = taken - target
    loss = float((diff ** 2).mean())
    dq = np.zeros_like(q)
    dq[np.arange(b), actions] = 2.0 * diff / b
    return loss, net.backward(cache, dq)


def dqn_train_step(net, target_net, buffer, optimizer, rng, *,
                   batch_size=32, gamma=1.0, lr=1e-3):
    batch = buffer.sample(batch_size, rng)
    loss, grads = dqn_loss(net, target_net, batch, gamma)
    optimizer.step(net, grads, lr)
    return loss


def sync_target(net, target_net):
    for tw, w in zip(target_net.weights, net.weights):
        tw[...] = w
    for tb, b in zip(target_net.biases, net.biases):
        tb[...] = b
