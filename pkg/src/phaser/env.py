"""Episodic pass-sequencing environment.

An episode of length N starts from a program (optionally pushed
through a fixed prepass sequence) and applies one pass per step.
The reward is the drop in backend cycle count, so rewards telescope:
their sum is exactly initial_cycles - final_cycles in delta mode.

Observation modes:

    features    56 static program features, refreshed after each
                compile (single program only)
    histogram   count of times each enabled pass was applied so far
    combined    features followed by the histogram
    onehot      the action sequence one-hot encoded, K entries per
                step slot (K * N total)

Compile stride: step() compiles every call. step_lazy() defers the
backend; settle() compiles once for the pending actions and splits
the measured improvement equally among them (exact rationals in
delta mode). Histogram and onehot observations update on lazy steps
without any backend call, which is what makes compile-free rollouts
possible in those modes.

Multi-program episodes apply one shared action across all programs
and reward the drop in geometric-mean cycles. Vector episodes hold
one position per sequence slot, start at pass K//2, and move every
position by -1/0/+1 per step with a single compile.

Normalization (applied to the feature segment only): "log" maps x to
ln(1+x) elementwise; "per-instruction" divides by the total
instruction count feature and raises NormalizationError when that
count is zero.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .episode import EpisodeRecord, StepRecord
from .errors import (EpisodeFinished, ModeUnsupported, NormalizationError,
                     PhaserError)
from .irfeatures import N_FEATURES, TOTAL_INSTRUCTIONS
from .passes import FULL_REGISTRY
from .util import geomean

OBS_MODES = ("features", "histogram", "combined", "onehot")
REWARD_MODES = ("delta", "log", "geomean")
NORMALIZATIONS = ("none", "log", "per-instruction")


def log_scaled(delta):
    """Signed log reward: sign(d) * ln(1 + |d|)."""
    d = float(delta)
    return math.copysign(math.log1p(abs(d)), d) if d else 0.0


def normalize_features(vec, technique):
    """Apply a normalization technique to a feature vector."""
    v = np.asarray(vec, dtype=np.float64)
    if technique == "none":
        return v
    if technique == "log":
        return np.log1p(v)
    if technique == "per-instruction":
        total = v[TOTAL_INSTRUCTIONS]
        if total == 0:
            raise NormalizationError(
                "total instruction count is zero; cannot normalize")
        return v / total
    raise PhaserError(f"unknown normalization '{technique}'")


def _exact_fraction(total, parts):
    frac = Fraction(total, parts)
    return int(frac) if frac.denominator == 1 else frac


class PhaseEnv:
    """Single- or multi-program episodic environment."""

    def __init__(self, backend, programs, *, registry=FULL_REGISTRY, n=10,
                 mode="histogram", reward="delta", stride=1, prepasses=(),
                 normalization="none", record_observations=True,
                 feature_mask=None):
        if mode not in OBS_MODES:
            raise PhaserError(f"unknown observation mode '{mode}'")
        if reward not in REWARD_MODES:
            raise PhaserError(f"unknown reward mode '{reward}'")
        if normalization not in NORMALIZATIONS:
            raise PhaserError(f"unknown normalization '{normalization}'")
        if n < 1:
            raise PhaserError("episode length must be >= 1")
        if stride < 1 or stride > n:
            raise PhaserError(f"stride must be in [1, {n}]")
        self.backend = backend
        self.programs = list(programs)
        if not self.programs:
            raise PhaserError("need at least one program")
        if len(self.programs) > 1:
            if mode in ("features", "combined"):
                raise ModeUnsupported(
                    f"mode '{mode}' supports a single program only")
            if reward != "geomean":
                raise PhaserError(
                    "multi-program episodes require geomean reward")
        self.registry = registry
        self.n = n
        self.mode = mode
        self.reward_mode = reward
        self.stride = stride
        self.prepasses = tuple(prepasses)
        self.normalization = normalization
        self.record_observations = record_observations
        if feature_mask is not None:
            if mode not in ("features", "combined"):
                raise PhaserError("feature_mask needs a features observation")
            mask = sorted(set(int(i) for i in feature_mask))
            if not mask or mask[0] < 0 or mask[-1] >= N_FEATURES:
                raise PhaserError(
                    f"feature_mask indices must be in [0, {N_FEATURES})")
            feature_mask = np.array(mask, dtype=np.int64)
        self.feature_mask = feature_mask
        self._episode = None

    @property
    def k(self):
        return len(self.registry)

    @property
    def observation_size(self):
        width = (N_FEATURES if self.feature_mask is None
                 else len(self.feature_mask))
        if self.mode == "features":
            return width
        if self.mode == "histogram":
            return self.k
        if self.mode == "combined":
            return width + self.k
        return self.k * self.n

    @property
    def supports_rollout_free(self):
        return self.mode in ("histogram", "onehot")

    @property
    def done(self):
        return self._episode is not None and self._episode["done"]

    # -- episode lifecycle -------------------------------------------------

    def reset(self, programs=None, *, prepasses=None):
        if programs is not None:
            self.programs = list(programs)
        if prepasses is not None:
            self.prepasses = tuple(prepasses)
        samples_before = self.backend.samples
        c0 = [self.backend.initial_cost(p, self.prepasses)
              for p in self.programs]
        ep = {
            "actions": [],
            "pending": [],          # (action_index, obs_before)
            "hist": np.zeros(self.k, dtype=np.int64),
            "onehot": np.zeros(self.k * self.n, dtype=np.int64),
            "c0": list(c0),
            "c_last": list(c0),
            "steps": [],
            "done": False,
            "samples_before": samples_before,
            "features": None,
        }
        self._episode = ep
        if self.mode in ("features", "combined"):
            ep["features"] = self._fetch_features(())
        ep["obs"] = self._build_obs()
        return ep["obs"].copy()

    def multi_reset(self, programs):
        return self.reset(programs=programs)

    def _fetch_features(self, actions):
        seq = self.prepasses + tuple(actions)
        f = self.backend.features(self.programs[0], seq)
        if f is None:
            raise ModeUnsupported(
                "backend provides no features; use histogram or onehot")
        return np.asarray(f, dtype=np.int64)

    def _build_obs(self):
        ep = self._episode
        if self.mode == "histogram":
            return ep["hist"].copy()
        if self.mode == "onehot":
            return ep["onehot"].copy()
        feats = normalize_features(ep["features"], self.normalization)
        if self.feature_mask is not None:
            feats = feats[self.feature_mask]
        if self.mode == "features":
            return feats
        return np.concatenate([feats, ep["hist"].astype(np.float64)])

    def _require_live(self):
        if self._episode is None:
            raise PhaserError("reset() before stepping")
        if self._episode["done"]:
            raise EpisodeFinished(f"episode length {self.n} reached")

    def _apply_action(self, action):
        ep = self._episode
        if not 0 <= action < self.k:
            raise PhaserError(f"action {action} out of range [0, {self.k})")
        t = len(ep["actions"]) + len(ep["pending"])
        ep["hist"][action] += 1
        ep["onehot"][t * self.k + action] = 1

    def _evaluate_all(self):
        ep = self._episode
        seq = self.prepasses + tuple(
            self.registry.ids[a] for a in
            ep["actions"] + [a for a, _ in ep["pending"]])
        return [self.backend.evaluate(p, seq) for p in self.programs]

    def _scalar(self, costs):
        if self.reward_mode == "geomean":
            return geomean(costs)
        return costs[0]

    def _reward(self, prev, cur):
        if self.reward_mode == "delta":
            return prev[0] - cur[0]
        if self.reward_mode == "log":
            return log_scaled(prev[0] - cur[0])
        return geomean(prev) - geomean(cur)

    def _cycles_entry(self, costs):
        return costs[0] if len(costs) == 1 else list(costs)

    def step(self, action):
        """Apply one pass, compile, return (obs, reward, done)."""
        self._require_live()
        ep = self._episode
        if ep["pending"]:
            raise PhaserError("settle() pending lazy steps before step()")
        obs_before = ep["obs"]
        self._apply_action(action)
        ep["actions"].append(action)
        costs = self._evaluate_all()
        reward = self._reward(ep["c_last"], costs)
        ep["c_last"] = costs
        if self.mode in ("features", "combined"):
            ep["features"] = self._fetch_features(
                tuple(self.registry.ids[a] for a in ep["actions"]))
        ep["steps"].append(StepRecord(
            action=self.registry.ids[action],
            reward=reward,
            cycles=self._cycles_entry(costs),
            observation=(obs_before.tolist()
                         if self.record_observations else None)))
        ep["done"] = len(ep["actions"]) == self.n
        ep["obs"] = self._build_obs()
        return ep["obs"].copy(), reward, ep["done"]

    def step_lazy(self, action):
        """Apply one pass without compiling. Histogram and onehot
        observations still update; settle() later distributes reward."""
        self._require_live()
        ep = self._episode
        obs_before = ep["obs"]
        self._apply_action(action)
        ep["pending"].append((action, obs_before))
        if len(ep["actions"]) + len(ep["pending"]) == self.n:
            ep["done"] = True
        ep["obs"] = self._build_obs()
        return ep["obs"].copy()

    def settle(self, stride_end=True):
        """Compile once for all pending lazy actions and split the
        improvement equally among them. Returns the per-action rewards."""
        ep = self._episode
        if ep is None:
            raise PhaserError("reset() before settle()")
        if not ep["pending"]:
            return []
        costs = self._evaluate_all()
        m = len(ep["pending"])
        if self.reward_mode == "delta":
            share = _exact_fraction(ep["c_last"][0] - costs[0], m)
        elif self.reward_mode == "log":
            share = log_scaled(ep["c_last"][0] - costs[0]) / m
        else:
            share = (geomean(ep["c_last"]) - geomean(costs)) / m
        for action, obs_before in ep["pending"]:
            ep["actions"].append(action)
            ep["steps"].append(StepRecord(
                action=self.registry.ids[action],
                reward=share,
                cycles=self._cycles_entry(costs),
                observation=(obs_before.tolist()
                             if self.record_observations else None)))
        ep["pending"] = []
        ep["c_last"] = costs
        if self.mode in ("features", "combined"):
            ep["features"] = self._fetch_features(
                tuple(self.registry.ids[a] for a in ep["actions"]))
            ep["obs"] = self._build_obs()
        return [share] * m

    def multi_step(self, action):
        return self.step(action)

    def current_cycles(self):
        return list(self._episode["c_last"])

    def initial_cycles(self):
        return list(self._episode["c0"])

    def actions_taken(self):
        ep = self._episode
        return [self.registry.ids[a]
                for a in ep["actions"] + [a for a, _ in ep["pending"]]]

    def finish(self, seed=None):
        """Seal the episode into an EpisodeRecord."""
        ep = self._episode
        if ep is None:
            raise PhaserError("no episode to finish")
        if ep["pending"]:
            raise PhaserError("settle() pending lazy steps before finish()")
        return EpisodeRecord(
            programs=[p.name for p in self.programs],
            mode=self.mode,
            reward_mode=self.reward_mode,
            stride=self.stride,
            initial_cycles=list(ep["c0"]),
            final_cycles=list(ep["c_last"]),
            steps=list(ep["steps"]),
            samples=self.backend.samples - ep["samples_before"],
            seed=seed,
            action_space=list(self.registry.ids),
        )


class VectorEnv:
    """Multi-action variant: one position per sequence slot, each
    step moves every position by -1, 0 or +1 and compiles once."""

    def __init__(self, backend, program, *, registry=FULL_REGISTRY,
                 n=10, steps=10, reward="delta"):
        if reward not in ("delta", "log"):
            raise PhaserError("vector episodes use delta or log reward")
        self.backend = backend
        self.program = program
        self.registry = registry
        self.n = n
        self.steps = steps
        self.reward_mode = reward
        self._state = None

    @property
    def k(self):
        return len(self.registry)

    def _sequence(self, positions):
        return tuple(self.registry.ids[p] for p in positions)

    def reset(self):
        positions = np.full(self.n, self.k // 2, dtype=np.int64)
        c0 = self.backend.initial_cost(self.program)
        cost = self.backend.evaluate(self.program, self._sequence(positions))
        self._state = {
            "positions": positions,
            "c_last": cost,
            "c0": c0,
            "t": 0,
            "steps": [],
            "samples_before": self.backend.samples - 1,
        }
        return positions.copy()

    @property
    def done(self):
        return self._state is not None and self._state["t"] >= self.steps

    def step(self, deltas):
        st = self._state
        if st is None:
            raise PhaserError("reset() before stepping")
        if st["t"] >= self.steps:
            raise EpisodeFinished(f"episode length {self.steps} reached")
        deltas = np.asarray(deltas, dtype=np.int64)
        if deltas.shape != (self.n,):
            raise PhaserError(f"need {self.n} deltas")
        if not np.isin(deltas, (-1, 0, 1)).all():
            raise PhaserError("deltas must be -1, 0 or +1")
        obs_before = st["positions"].copy()
        st["positions"] = np.clip(st["positions"] + deltas, 0, self.k - 1)
        cost = self.backend.evaluate(self.program,
                                     self._sequence(st["positions"]))
        if self.reward_mode == "delta":
            reward = st["c_last"] - cost
        else:
            reward = log_scaled(st["c_last"] - cost)
        st["c_last"] = cost
        st["t"] += 1
        st["steps"].append(StepRecord(
            action=-1, reward=reward, cycles=cost,
            observation=obs_before.tolist(), deltas=deltas.tolist()))
        return st["positions"].copy(), reward, st["t"] >= self.steps

    def current_cost(self):
        return self._state["c_last"]

    def positions(self):
        return self._state["positions"].copy()

    def sequence(self):
        return list(self._sequence(self._state["positions"]))

    def finish(self, seed=None):
        st = self._state
        return EpisodeRecord(
            programs=[self.program.name],
            mode="vector",
            reward_mode=self.reward_mode,
            stride=1,
            initial_cycles=[st["c0"]],
            final_cycles=[st["c_last"]],
            steps=list(st["steps"]),
            samples=self.backend.samples - st["samples_before"],
            seed=seed,
            action_space=list(self.registry.ids),
        )
