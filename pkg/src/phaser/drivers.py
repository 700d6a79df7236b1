"""Training loops that tie the learners to the episode environment.

Collection is sequential and fully seeded, so a (seed, config) pair
reproduces its episode log byte for byte. Sample accounting leans on
the backend's counter: per-episode entries record the cumulative
number of compile evaluations since training started, which is what
the budget comparisons in the docs are measured in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agents import (DELTA_CHOICES, PpoConfig, ReplayBuffer, Trajectory, act,
                     categorical_sample, dqn_train_step, epsilon_at,
                     multi_action_policy, reinforce_update, returns_to_go,
                     sample_deltas, sync_target, ppo_update)
from .errors import ModeUnsupported, PhaserError, TrainingDiverged
from .mlp import Adam, Mlp, Sgd, log_softmax
from .util import child_seed, geomean, make_rng

DQN_HIDDEN = (512, 256)
POLICY_HIDDEN = (256, 256)


@dataclass
class TrainResult:
    kind: str
    returns: list = field(default_factory=list)
    final_cycles: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    best_cycles: float = float("inf")
    best_sequence: list = field(default_factory=list)
    best_sample: int | None = None
    records: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    policy: Mlp | None = None
    critic: Mlp | None = None
    qnet: Mlp | None = None

    def samples_to_reach(self, target_cycles):
        """Cumulative samples when an episode first ended at or below the
        target, or None if that never happened."""
        for s, c in zip(self.samples, self.final_cycles):
            if c <= target_cycles:
                return s
        return None


def _scalar_cost(cycles):
    return float(cycles[0]) if len(cycles) == 1 else geomean(cycles)


def _make_optimizer(name):
    if name == "adam":
        return Adam()
    if name == "sgd":
        return Sgd()
    raise PhaserError(f"unknown optimizer '{name}'")


def _check_loss(loss):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")


def rollout_free(env, net, rng):
    """Generate a full episode of actions without any backend call.
    Rewards stay unfilled until the caller settle()s. Returns the pass
    id sequence."""
    if not env.supports_rollout_free:
        raise ModeUnsupported(
            f"mode '{env.mode}' cannot roll out without compiling")
    obs = env.reset()
    while not env.done:
        obs = env.step_lazy(categorical_sample(net.forward(obs), rng))
    return env.actions_taken()


def _collect_policy_episode(env, net, rng, *, want_logp=False,
                            programs=None):
    """Sample one episode from the softmax policy. Uses lazy steps (one
    compile per stride) when stride > 1, plain steps otherwise.
    Returns (Trajectory, final scalar cost)."""
    obs = env.reset(programs=programs)
    obs_rows, actions, rewards, logps = [], [], [], []
    pending = 0
    while not env.done:
        logits = net.forward(obs)
        a = categorical_sample(logits, rng)
        obs_rows.append(obs)
        actions.append(a)
        if want_logp:
            logps.append(float(log_softmax(logits)[a]))
        if env.stride == 1:
            obs, r, _ = env.step(a)
            rewards.append(float(r))
        else:
            obs = env.step_lazy(a)
            pending += 1
            if pending == env.stride or env.done:
                rewards.extend(float(s) for s in env.settle())
                pending = 0
    traj = Trajectory(
        observations=np.array(obs_rows, dtype=np.float64),
        actions=np.array(actions, dtype=np.int64),
        rewards=rewards,
        log_probs=np.array(logps) if want_logp else None,
        program=env.programs[0].name if len(env.programs) == 1 else "*")
    return traj, _scalar_cost(env.current_cycles())


class _Tracker:
    """Per-episode bookkeeping shared by the three training loops."""

    def __init__(self, env, result, seed, record_episodes):
        self.env = env
        self.result = result
        self.seed = seed
        self.record = record_episodes
        self.start_samples = env.backend.samples

    def close_episode(self, ep_return, final_cost):
        res = self.result
        res.returns.append(ep_return)
        res.final_cycles.append(final_cost)
        res.samples.append(self.env.backend.samples - self.start_samples)
        if final_cost < res.best_cycles:
            res.best_cycles = final_cost
            res.best_sequence = self.env.actions_taken()
            res.best_sample = res.samples[-1]
        if self.record:
            res.records.append(self.env.finish(seed=self.seed))


def _rotation(rotate_programs, env):
    if rotate_programs is None:
        return None
    progs = list(rotate_programs)
    if not progs:
        raise PhaserError("rotate_programs must be nonempty")
    return progs


def train_pg(env, *, episodes, seed=0, hidden=POLICY_HIDDEN, lr=0.01,
             batch_episodes=10, optimizer="sgd", baseline=True,
             record_episodes=False, rotate_programs=None):
    """REINFORCE with a mean-return baseline over episode batches."""
    rng = make_rng(child_seed(seed, "pg"))
    net = Mlp((env.observation_size, *hidden, env.k),
              seed=child_seed(seed, "pg-net"))
    opt = _make_optimizer(optimizer)
    result = TrainResult(kind="pg", policy=net)
    tracker = _Tracker(env, result, seed, record_episodes)
    rotation = _rotation(rotate_programs, env)

    done_eps = 0
    while done_eps < episodes:
        batch = []
        take = min(batch_episodes, episodes - done_eps)
        for _ in range(take):
            progs = (None if rotation is None
                     else [rotation[done_eps % len(rotation)]])
            traj, final_cost = _collect_policy_episode(
                env, net, rng, programs=progs)
            batch.append(traj)
            tracker.close_episode(traj.episode_return, final_cost)
            done_eps += 1
        loss = reinforce_update(net, batch, opt, lr, baseline=baseline)
        _check_loss(loss)
    result.stats["last_loss"] = loss
    return result


def train_ppo(env, *, episodes, seed=0, hidden=POLICY_HIDDEN,
              cfg=PpoConfig(), batch_episodes=8, record_episodes=False,
              rotate_programs=None, eval_hook=None, eval_every=1):
    """Clipped-surrogate actor-critic over batches of whole episodes.

    eval_hook(policy, episodes_done) is called after every eval_every-th
    update; its float result lands in stats["evals"] as a
    (episodes_done, env_steps_done, value) row. The hook should bring
    its own environment if backend sample counts matter."""
    rng = make_rng(child_seed(seed, "ppo"))
    policy = Mlp((env.observation_size, *hidden, env.k),
                 seed=child_seed(seed, "ppo-policy"))
    critic = Mlp((env.observation_size, *hidden, 1),
                 seed=child_seed(seed, "ppo-critic"))
    popt, copt = Adam(), Adam()
    result = TrainResult(kind="ppo", policy=policy, critic=critic)
    tracker = _Tracker(env, result, seed, record_episodes)
    rotation = _rotation(rotate_programs, env)
    min_contained = 1.0

    done_eps = 0
    updates = 0
    while done_eps < episodes:
        batch = []
        take = min(batch_episodes, episodes - done_eps)
        for _ in range(take):
            progs = (None if rotation is None
                     else [rotation[done_eps % len(rotation)]])
            traj, final_cost = _collect_policy_episode(
                env, policy, rng, want_logp=True, programs=progs)
            batch.append(traj)
            tracker.close_episode(traj.episode_return, final_cost)
            done_eps += 1
        data = {
            "obs": np.concatenate([t.observations for t in batch]),
            "actions": np.concatenate([t.actions for t in batch]),
            "old_logp": np.concatenate([t.log_probs for t in batch]),
            "returns": np.concatenate(
                [returns_to_go(t.rewards, cfg.gamma) for t in batch]),
        }
        stats = ppo_update(policy, critic, data, popt, copt, rng, cfg)
        _check_loss(stats["policy_loss"])
        min_contained = min(min_contained, stats["contained"])
        updates += 1
        if eval_hook is not None and updates % eval_every == 0:
            result.stats.setdefault("evals", []).append(
                (done_eps, done_eps * env.n,
                 float(eval_hook(policy, done_eps))))
    result.stats["min_contained"] = min_contained
    result.stats["last_update"] = stats
    return result


def train_dqn(env, *, episodes, seed=0, hidden=DQN_HIDDEN, lr=1e-3,
              gamma=1.0, buffer_capacity=10000, batch_size=32,
              target_sync=100, warmup=100, epsilon_start=1.0,
              epsilon_end=0.05, record_episodes=False,
              rotate_programs=None):
    """DQN with a target network and epsilon-greedy exploration decaying
    linearly over the first half of the env-step budget."""
    rng = make_rng(child_seed(seed, "dqn"))
    net = Mlp((env.observation_size, *hidden, env.k),
              seed=child_seed(seed, "dqn-net"))
    target = net.clone()
    opt = Adam()
    buf = ReplayBuffer(buffer_capacity)
    result = TrainResult(kind="dqn", qnet=net)
    tracker = _Tracker(env, result, seed, record_episodes)
    rotation = _rotation(rotate_programs, env)

    total_env_steps = episodes * env.n
    env_step = 0
    grad_steps = 0
    for ep in range(episodes):
        progs = (None if rotation is None
                 else [rotation[ep % len(rotation)]])
        obs = env.reset(programs=progs)
        ep_return = 0.0
        lazy = []  # (obs_before, action, obs_after)
        while not env.done:
            eps = epsilon_at(env_step, total_env_steps,
                             epsilon_start, epsilon_end)
            a = act(net, obs, rng, epsilon=eps)
            if env.stride == 1:
                nxt, r, done = env.step(a)
                buf.push(obs, a, float(r), nxt, done)
                ep_return += float(r)
            else:
                nxt = env.step_lazy(a)
                lazy.append((obs, a, nxt))
                if len(lazy) == env.stride or env.done:
                    shares = env.settle()
                    for i, ((o, ai, o2), r) in enumerate(zip(lazy, shares)):
                        last = env.done and i == len(lazy) - 1
                        buf.push(o, ai, float(r), o2, last)
                        ep_return += float(r)
                    lazy = []
            obs = nxt
            env_step += 1
            if len(buf) >= max(batch_size, warmup):
                loss = dqn_train_step(net, target, buf, opt, rng,
                                      batch_size=batch_size, gamma=gamma,
                                      lr=lr)
                _check_loss(loss)
                grad_steps += 1
                if grad_steps % target_sync == 0:
                    sync_target(net, target)
        tracker.close_episode(ep_return, _scalar_cost(env.current_cycles()))
    result.stats["grad_steps"] = grad_steps
    return result


def train_vector_pg(env, *, episodes, seed=0, hidden=POLICY_HIDDEN, lr=0.01,
                    batch_episodes=10, optimizer="sgd",
                    record_episodes=False):
    """REINFORCE for the multi-action variant: the net emits one 3-way
    head per sequence slot and every step moves all slots at once."""
    rng = make_rng(child_seed(seed, "vpg"))
    net = Mlp((env.n, *hidden, 3 * env.n),
              seed=child_seed(seed, "vpg-net"))
    opt = _make_optimizer(optimizer)
    result = TrainResult(kind="vector-pg", policy=net)
    start_samples = env.backend.samples

    done_eps = 0
    loss = 0.0
    while done_eps < episodes:
        batch = []
        take = min(batch_episodes, episodes - done_eps)
        for _ in range(take):
            positions = env.reset()
            obs_rows, choices, rewards = [], [], []
            while not env.done:
                deltas = multi_action_policy(net, positions, rng)
                obs_rows.append(positions.astype(np.float64))
                choices.append(deltas + 1)  # head choice index 0..2
                positions, r, _ = env.step(deltas)
                rewards.append(float(r))
            traj = Trajectory(
                observations=np.array(obs_rows),
                actions=np.array(choices, dtype=np.int64),
                rewards=rewards, program=env.program.name)
            batch.append(traj)
            result.returns.append(traj.episode_return)
            result.final_cycles.append(float(env.current_cost()))
            result.samples.append(env.backend.samples - start_samples)
            if result.final_cycles[-1] < result.best_cycles:
                result.best_cycles = result.final_cycles[-1]
                result.best_sequence = env.sequence()
                result.best_sample = result.samples[-1]
            if record_episodes:
                result.records.append(env.finish(seed=seed))
            done_eps += 1
        loss = reinforce_update(net, batch, opt, lr, heads=env.n)
        _check_loss(loss)
    result.stats["last_loss"] = loss
    return result


def train_vector_ppo(env, *, episodes, seed=0, hidden=POLICY_HIDDEN,
                     cfg=PpoConfig(), batch_episodes=8,
                     record_episodes=False):
    """Clipped-surrogate actor-critic for the multi-action variant. The
    ratio is taken on the joint probability of all slot moves."""
    rng = make_rng(child_seed(seed, "vppo"))
    policy = Mlp((env.n, *hidden, DELTA_CHOICES * env.n),
                 seed=child_seed(seed, "vppo-policy"))
    critic = Mlp((env.n, *hidden, 1), seed=child_seed(seed, "vppo-critic"))
    popt, copt = Adam(), Adam()
    result = TrainResult(kind="vector-ppo", policy=policy, critic=critic)
    start_samples = env.backend.samples
    min_contained = 1.0

    done_eps = 0
    while done_eps < episodes:
        batch = []
        take = min(batch_episodes, episodes - done_eps)
        for _ in range(take):
            positions = env.reset()
            obs_rows, choices, rewards, logps = [], [], [], []
            while not env.done:
                obs = positions.astype(np.float64)
                logits = policy.forward(obs)
                deltas = sample_deltas(logits, env.n, rng)
                lp = log_softmax(logits.reshape(env.n, DELTA_CHOICES))
                logps.append(float(lp[np.arange(env.n), deltas + 1].sum()))
                obs_rows.append(obs)
                choices.append(deltas + 1)
                positions, r, _ = env.step(deltas)
                rewards.append(float(r))
            traj = Trajectory(
                observations=np.array(obs_rows),
                actions=np.array(choices, dtype=np.int64),
                rewards=rewards, log_probs=np.array(logps),
                program=env.program.name)
            batch.append(traj)
            result.returns.append(traj.episode_return)
            result.final_cycles.append(float(env.current_cost()))
            result.samples.append(env.backend.samples - start_samples)
            if result.final_cycles[-1] < result.best_cycles:
                result.best_cycles = result.final_cycles[-1]
                result.best_sequence = env.sequence()
                result.best_sample = result.samples[-1]
            if record_episodes:
                result.records.append(env.finish(seed=seed))
            done_eps += 1
        data = {
            "obs": np.concatenate([t.observations for t in batch]),
            "actions": np.concatenate(
                [t.actions.reshape(-1, env.n) for t in batch]),
            "old_logp": np.concatenate([t.log_probs for t in batch]),
            "returns": np.concatenate(
                [returns_to_go(t.rewards, cfg.gamma) for t in batch]),
        }
        stats = ppo_update(policy, critic, data, popt, copt, rng, cfg,
                           heads=env.n)
        _check_loss(stats["policy_loss"])
        min_contained = min(min_contained, stats["contained"])
    result.stats["min_contained"] = min_contained
    result.stats["last_update"] = stats
    return result


# -- evaluation ---------------------------------------------------------

def greedy_rollout(env, net, programs=None):
    """Deterministic argmax rollout; compiles every step. Returns the
    sealed EpisodeRecord."""
    obs = env.reset(programs=programs)
    while not env.done:
        out = net.forward(obs)
        obs, _, _ = env.step(int(np.argmax(out)))
    return env.finish()


def evaluate_policy(env, net, *, episodes=100, seed=0, greedy=False,
                    programs=None):
    """Mean episode return under the policy (softmax samples unless
    greedy)."""
    rng = make_rng(child_seed(seed, "eval"))
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(programs=programs)
        ep_return = 0.0
        while not env.done:
            out = net.forward(obs)
            a = int(np.argmax(out)) if greedy else categorical_sample(out, rng)
            obs, r, _ = env.step(a)
            ep_return += float(r)
        total += ep_return
    return total / episodes
