"""End-to-end acceptance checks for the whole stack.

Every test here pins an externally meaningful guarantee: engines find
known optima within sample budgets, reward accounting is exact, update
rules match finite differences, forests attribute planted signals,
reruns are byte-identical, and a policy trained across programs
generalizes where a single-program optimum does not. Budgets and
tolerances are fixed; loosening them is a behavior change, not a test
fix.
"""

import importlib.util
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from phaser import analysis, drivers, search
from phaser.agents import (PpoConfig, Trajectory, clip_objective,
                           critic_loss, dqn_loss, ppo_policy_loss,
                           reinforce_loss)
from phaser.backends import SyntheticBackend
from phaser.cli import main
from phaser.env import PhaseEnv
from phaser.forest import fit_forest
from phaser.mlp import Mlp, softmax
from phaser.scenario import make_feature_corpus, shipped_scenario
from phaser.util import make_rng

OPTIMUM = 4087  # unique best cycles on three_pass_opt at depth 3


def _three_pass():
    scn = shipped_scenario("three_pass_opt")
    return scn.registry(), scn.programs[0]


# -- RL engines solve the reference problem inside a sample budget ------

def test_rl_engines_find_unique_optimum_within_budget():
    reg, prog = _three_pass()
    t0 = time.time()

    pg_hits = []
    for seed in range(10):
        env = PhaseEnv(SyntheticBackend(), [prog], registry=reg, n=3,
                       mode="onehot", stride=3)
        res = drivers.train_pg(env, episodes=2000, seed=seed, hidden=(64,),
                               lr=0.01, batch_episodes=25, optimizer="adam")
        pg_hits.append(res.samples_to_reach(OPTIMUM))
    assert all(h is not None and h <= 2000 for h in pg_hits), pg_hits

    dqn_hits = []
    for seed in range(10):
        env = PhaseEnv(SyntheticBackend(), [prog], registry=reg, n=3,
                       mode="onehot", stride=3)
        res = drivers.train_dqn(env, episodes=2000, seed=seed,
                                hidden=(64, 64), lr=2e-3,
                                buffer_capacity=2000, batch_size=32,
                                target_sync=100, epsilon_end=0.15)
        dqn_hits.append(res.samples_to_reach(OPTIMUM))
    assert all(h is not None and h <= 2000 for h in dqn_hits), dqn_hits

    assert time.time() - t0 < 300


# -- at depth 12, RL needs no more samples than the genetic engine ------

def test_rl_matches_genetic_sample_efficiency_at_depth_12():
    reg, prog = _three_pass()
    censor = 10 ** 9

    def first_reach(trace):
        for samples, cycles in trace:
            if cycles <= OPTIMUM:
                return samples
        return censor

    gen = []
    for seed in range(10):
        res = search.genetic(SyntheticBackend(), prog, reg, 12,
                             search.GaConfig(population_size=50,
                                             generations=40), seed=seed)
        gen.append(first_reach(res.trace))

    ppo = []
    for seed in range(10):
        env = PhaseEnv(SyntheticBackend(), [prog], registry=reg, n=12,
                       mode="onehot", stride=12)
        res = drivers.train_ppo(env, episodes=400, seed=seed,
                                hidden=(64, 64), cfg=PpoConfig(lr=3e-3),
                                batch_episodes=10)
        hit = res.samples_to_reach(OPTIMUM)
        ppo.append(censor if hit is None else hit)

    dqn = []
    for seed in range(10):
        env = PhaseEnv(SyntheticBackend(), [prog], registry=reg, n=12,
                       mode="histogram", stride=12)
        res = drivers.train_dqn(env, episodes=400, seed=seed,
                                hidden=(64, 64), lr=5e-3,
                                buffer_capacity=5000, batch_size=32,
                                target_sync=100, epsilon_start=0.5,
                                epsilon_end=0.15)
        hit = res.samples_to_reach(OPTIMUM)
        dqn.append(censor if hit is None else hit)

    gen_med = float(np.median(gen))
    assert gen_med <= 780, gen
    assert float(np.median(ppo)) <= gen_med, (ppo, gen)
    assert float(np.median(dqn)) <= gen_med, (dqn, gen)


# -- the trap scenario defeats greedy but not global engines ------------

def test_greedy_trap_blocks_greedy_but_not_genetic_or_ppo():
    scn = shipped_scenario("greedy_trap")
    reg, prog = scn.registry(), scn.programs[0]

    ex = search.exhaustive(SyntheticBackend(), prog, reg, 4)
    assert ex.best_cycles == 4650
    assert ex.best_sequence == [5, 30, 36, 25]

    gr = search.greedy_insert(SyntheticBackend(), prog, reg, 4)
    assert gr.best_cycles > ex.best_cycles

    ga_wins = sum(
        search.genetic(SyntheticBackend(), prog, reg, 4,
                       search.GaConfig(), seed=seed).best_cycles
        == ex.best_cycles
        for seed in range(10))
    assert ga_wins >= 8, ga_wins

    ppo_wins = 0
    for seed in range(10):
        env = PhaseEnv(SyntheticBackend(), [prog], registry=reg, n=4,
                       mode="onehot", stride=4)
        res = drivers.train_ppo(env, episodes=400, seed=seed,
                                hidden=(64, 64), cfg=PpoConfig(lr=3e-3),
                                batch_episodes=10)
        ppo_wins += res.best_cycles == ex.best_cycles
    assert ppo_wins >= 8, ppo_wins


# -- reward telescoping is exact at every stride ------------------------

def test_thousand_random_episodes_telescope_exactly():
    reg, prog = _three_pass()
    n = 8
    rng = make_rng(17)
    for stride, n_episodes in ((1, 334), (4, 333), (n, 333)):
        env = PhaseEnv(SyntheticBackend(), [prog], registry=reg, n=n,
                       stride=stride)
        for _ in range(n_episodes):
            env.reset()
            total = Fraction(0)
            while not env.done:
                a = int(rng.integers(env.k))
                if stride == 1:
                    _, r, _ = env.step(a)
                    total += r
                else:
                    env.step_lazy(a)
                    if len(env._episode["pending"]) == stride or env.done:
                        shares = env.settle()
                        assert all(isinstance(s, (int, Fraction))
                                   for s in shares)
                        total += sum(shares)
            diff = env.initial_cycles()[0] - env.current_cycles()[0]
            assert total == diff  # exact, zero tolerance
            assert env.finish().samples == math.ceil(n / stride)


# -- every training gradient matches central finite differences ---------

def _fd_matches(net, loss_fn, analytic_grads, rel_tol=1e-4, eps=1e-6):
    theta = net.params_flat()
    analytic = net.grads_flat(analytic_grads)
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        bump = theta.copy()
        bump[i] += eps
        net.set_params_flat(bump)
        hi = loss_fn()
        bump[i] -= 2 * eps
        net.set_params_flat(bump)
        lo = loss_fn()
        fd[i] = (hi - lo) / (2 * eps)
    net.set_params_flat(theta)
    denom = max(1.0, float(np.abs(fd).max()))
    assert np.abs(analytic - fd).max() / denom < rel_tol


def test_supervised_gradients_match_fd_on_20_nets():
    rng = make_rng(100)
    for trial in range(20):
        widths = tuple(int(w) for w in rng.integers(2, 7, size=3))
        net = Mlp(widths, seed=trial)
        x = rng.normal(size=(4, widths[0]))
        tgt = rng.normal(size=(4, widths[-1]))

        def loss_fn():
            return float(np.sum((net.forward(x) - tgt) ** 2))

        out, cache = net.forward_cache(x)
        grads = net.backward(cache, 2.0 * (out - tgt))
        _fd_matches(net, loss_fn, grads)


def test_reinforce_gradients_match_fd_on_20_nets():
    rng = make_rng(101)
    for trial in range(20):
        widths = tuple(int(w) for w in rng.integers(2, 7, size=3))
        net = Mlp(widths, seed=200 + trial)
        trajs = [Trajectory(observations=rng.normal(size=(3, widths[0])),
                            actions=rng.integers(0, widths[-1], size=3),
                            rewards=list(rng.normal(size=3)))
                 for _ in range(2)]

        def loss_fn():
            return reinforce_loss(net, trajs)[0]

        _, grads = reinforce_loss(net, trajs)
        _fd_matches(net, loss_fn, grads)


def test_ppo_gradients_match_fd_on_20_nets():
    rng = make_rng(102)
    for trial in range(20):
        widths = tuple(int(w) for w in rng.integers(2, 7, size=3))
        net = Mlp(widths, seed=300 + trial)
        k = widths[-1]
        obs = rng.normal(size=(5, widths[0]))
        actions = rng.integers(0, k, size=5)
        old_logp = (np.log(softmax(net.forward(obs)))[np.arange(5), actions]
                    + rng.normal(size=5) * 0.3)
        adv = rng.normal(size=5)

        def loss_fn():
            return ppo_policy_loss(net, obs, actions, old_logp, adv,
                                   clip=0.2, entropy_coef=0.05)[0]

        _, grads, _ = ppo_policy_loss(net, obs, actions, old_logp, adv,
                                      clip=0.2, entropy_coef=0.05)
        _fd_matches(net, loss_fn, grads)


def test_td_gradients_match_fd_on_20_nets():
    rng = make_rng(103)
    for trial in range(20):
        widths = tuple(int(w) for w in rng.integers(2, 7, size=3))
        net = Mlp(widths, seed=400 + trial)
        target = Mlp(widths, seed=500 + trial)
        k = widths[-1]
        batch = (rng.normal(size=(5, widths[0])),
                 rng.integers(0, k, size=5),
                 rng.normal(size=5),
                 rng.normal(size=(5, widths[0])),
                 (rng.random(5) < 0.5).astype(float))

        def loss_fn():
            return dqn_loss(net, target, batch, gamma=0.9)[0]

        _, grads = dqn_loss(net, target, batch, gamma=0.9)
        _fd_matches(net, loss_fn, grads)


def test_critic_gradients_match_fd_on_20_nets():
    rng = make_rng(104)
    for trial in range(20):
        w_in, w_h = (int(v) for v in rng.integers(2, 7, size=2))
        net = Mlp((w_in, w_h, 1), seed=600 + trial)
        obs = rng.normal(size=(6, w_in))
        rets = rng.normal(size=6)

        def loss_fn():
            return critic_loss(net, obs, rets)[0]

        _, grads = critic_loss(net, obs, rets)
        _fd_matches(net, loss_fn, grads)


# -- clipped surrogate arithmetic, by hand -------------------------------

def test_clip_objective_hand_checked_values():
    obj, dr = clip_objective(1.5, 1.0, 0.2)
    assert obj == 1.2
    assert dr == 0.0
    obj, dr = clip_objective(0.5, -1.0, 0.2)
    assert obj == -0.8
    assert dr == 0.0
    # inside the trust region, the derivative in the ratio is the
    # advantage itself
    obj, dr = clip_objective(1.0, 1.0, 0.2)
    assert obj == 1.0
    assert dr == 1.0
    obj, dr = clip_objective(1.1, -2.0, 0.2)
    assert obj == pytest.approx(-2.2)
    assert dr == -2.0


# -- the forest pins a planted feature -----------------------------------

def test_forest_attributes_planted_threshold_feature():
    rng = np.random.default_rng(3)
    x = rng.integers(0, 8, size=(10000, 56)).astype(np.float64)
    y = x[:, 17] > 3
    t0 = time.time()
    forest = fit_forest(x, y, seed=5)
    assert time.time() - t0 <= 30
    imp = forest.importances
    assert imp[17] >= 0.9
    assert float(imp.sum()) == pytest.approx(1.0, abs=1e-9)


# -- the feature extractor matches hand counts ---------------------------

def test_feature_extractor_matches_hand_counted_fixtures():
    here = Path(__file__).parent
    spec = importlib.util.spec_from_file_location(
        "irfixture_tables", here / "test_irfeatures.py")
    tables = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(tables)
    from phaser.irfeatures import extract_features_from_text

    assert len(tables.EXPECTED) == 7
    for name, sparse in tables.EXPECTED.items():
        got = extract_features_from_text((here / "fixtures" / name)
                                         .read_text())
        assert np.array_equal(got, tables.vector(sparse)), name


# -- importance filtering at least halves steps-to-target ----------------

def test_feature_filtering_halves_env_steps_to_target():
    corpus = make_feature_corpus()
    reg = corpus.registry()
    progs = corpus.programs
    n = corpus.n

    env = PhaseEnv(SyntheticBackend(), [progs[0]], registry=reg, n=n,
                   mode="features")
    rng = make_rng(7)
    records = []
    for _ in range(40):
        for p in progs:
            env.reset(programs=[p])
            while not env.done:
                env.step(int(rng.integers(env.k)))
            records.append(env.finish(seed=7))
    forests = {pid: analysis.train_forest(analysis.build_dataset(records,
                                                                 pid),
                                          n_trees=50, seed=11)
               for pid in reg.ids}
    mat = analysis.importance_matrix(forests)
    cols, _ = analysis.filter_by_importance(mat, 0.2)
    # only the advertised columns carry program-independent signal
    assert tuple(cols) == tuple(range(8))

    def make_hook(mask):
        ev = PhaseEnv(SyntheticBackend(), [progs[0]], registry=reg, n=n,
                      mode="features", feature_mask=mask,
                      normalization="log")

        def hook(net, done_eps):
            total = 0.0
            for p in progs:
                rec = drivers.greedy_rollout(ev, net, programs=[p])
                total += sum(float(s.reward) for s in rec.steps)
            return total / len(progs)

        return hook

    target = 0.95 * 500  # 95% of the per-program optimal return
    budget = 3000 * n

    def steps_to_target(res):
        for _, env_steps, value in res.stats.get("evals", []):
            if value >= target:
                return env_steps
        return budget  # censored: never reached inside the run

    medians = {}
    for label, mask in (("filtered", tuple(cols)), ("unfiltered", None)):
        steps = []
        for seed in range(5):
            env = PhaseEnv(SyntheticBackend(), [progs[0]], registry=reg,
                           n=n, mode="features", feature_mask=mask,
                           normalization="log")
            res = drivers.train_ppo(env, episodes=3000, seed=seed,
                                    hidden=(64, 64),
                                    cfg=PpoConfig(lr=3e-3),
                                    batch_episodes=20,
                                    rotate_programs=progs,
                                    eval_hook=make_hook(mask),
                                    eval_every=2)
            steps.append(steps_to_target(res))
        medians[label] = float(np.median(steps))

    assert 2 * medians["filtered"] <= medians["unfiltered"], medians


# -- reruns from one config are byte-identical ----------------------------

def test_tuning_reruns_are_byte_identical(tmp_path):
    def run_twice(cfg_text, name):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(cfg_text)
        outs = []
        for tag in ("first", "second"):
            out = tmp_path / f"{name}-{tag}"
            assert main(["tune", "--config", str(cfg),
                         "--out", str(out)]) == 0
            outs.append(out)
        return outs

    a, b = run_twice("engine = pg\nscenario = three_pass_opt\nn = 3\n"
                     "mode = onehot\nstride = 3\nepisodes = 40\nseed = 9\n"
                     "pg.hidden = 16\npg.batch_episodes = 10\n", "pg")
    assert (a / "episodes.jsonl").read_bytes() \
        == (b / "episodes.jsonl").read_bytes()

    # a thread pool must not leak scheduling order into the artifacts
    a, b = run_twice("engine = genetic\nscenario = three_pass_opt\nn = 3\n"
                     "workers = 4\ngenetic.population = 12\n"
                     "genetic.generations = 6\n", "ga")
    assert (a / "episodes.jsonl").read_bytes() \
        == (b / "episodes.jsonl").read_bytes()

    for x, y in ((a, b),):
        ma = json.loads((x / "manifest.json").read_text())
        mb = json.loads((y / "manifest.json").read_text())
        assert ma["fingerprint"] == mb["fingerprint"]


# -- a single-program optimum overfits; a jointly trained policy doesn't --

def test_joint_policy_generalizes_where_single_program_optimum_fails():
    alpha = shipped_scenario("overfit_a").programs[0]
    beta = shipped_scenario("overfit_b").programs[0]
    reg = shipped_scenario("overfit_a").registry()

    backend = SyntheticBackend()
    ex = search.exhaustive(backend, alpha, reg, 3)
    assert ex.best_sequence == [7, 36, 25]
    assert ex.best_cycles == 4500
    cost_on_beta = backend.evaluate(beta, ex.best_sequence)
    assert beta.base_cycles / cost_on_beta - 1 < 0

    for seed in range(5):
        env = PhaseEnv(SyntheticBackend(), [alpha, beta], registry=reg,
                       n=3, mode="onehot", reward="geomean")
        res = drivers.train_pg(env, episodes=400, seed=seed, hidden=(32,),
                               lr=0.01, batch_episodes=10,
                               optimizer="adam")
        rec = drivers.greedy_rollout(env, res.policy)
        seq = [s.action for s in rec.steps]
        eval_backend = SyntheticBackend()
        for prog in (alpha, beta):
            cycles = eval_backend.evaluate(prog, seq)
            assert prog.base_cycles / cycles - 1 >= 0, (seed, seq, cycles)
