"""Search engines: optima, budgets, tie-breaking, accounting."""

import json

import pytest

from phaser.backends import SyntheticBackend
from phaser.errors import PhaserError, SpaceTooLarge
from phaser.passes import PassRegistry
from phaser.scenario import SyntheticProgram, shipped_scenario
from phaser.search import (GaConfig, SearchResult, evaluate_batch, exhaustive,
                           genetic, greedy_insert, random_search,
                           write_trace_csv)


def _three_pass():
    scn = shipped_scenario("three_pass_opt")
    return SyntheticBackend(), scn.programs[0], scn.registry()


def _trap():
    scn = shipped_scenario("greedy_trap")
    return SyntheticBackend(), scn.programs[0], scn.registry()


def test_exhaustive_finds_global_optimum():
    backend, prog, reg = _three_pass()
    res = exhaustive(backend, prog, reg, 3)
    assert res.best_sequence == [31, 23, 33]
    assert res.best_cycles == 4087
    assert res.samples_used == len(reg) ** 3 == 1000
    assert backend.samples == 1000
    assert res.engine == "exhaustive"
    # trace is the running best over all 1000 samples
    assert len(res.trace) == 1000
    assert res.trace[0][0] == 1
    assert res.trace[-1] == (1000, 4087)
    bests = [c for _, c in res.trace]
    assert all(a >= b for a, b in zip(bests, bests[1:]))


def test_exhaustive_tie_breaks_lexicographically():
    # No rules: every sequence costs the same, so the first enumerated
    # (lex smallest over sorted ids) must win.
    prog = SyntheticProgram(name="flat", base_cycles=5000, rules=())
    backend = SyntheticBackend()
    reg = PassRegistry(ids=(7, 5, 9))
    res = exhaustive(backend, prog, reg, 2)
    assert res.best_sequence == [5, 5]
    assert res.best_cycles == 5000
    assert res.samples_used == 9


def test_exhaustive_cap():
    backend, prog, reg = _three_pass()
    with pytest.raises(SpaceTooLarge):
        exhaustive(backend, prog, reg, 3, cap=999)
    # boundary: space == cap is allowed
    res = exhaustive(backend, prog, reg, 3, cap=1000)
    assert res.best_cycles == 4087


def test_exhaustive_worker_invariance():
    backend1, prog, reg = _three_pass()
    res1 = exhaustive(backend1, prog, reg, 3, workers=1)
    backend4 = SyntheticBackend()
    res4 = exhaustive(backend4, prog, reg, 3, workers=4)
    assert res1.best_sequence == res4.best_sequence
    assert res1.trace == res4.trace
    assert res1.evals == res4.evals
    assert backend4.samples == 1000


def test_random_search_exact_sample_budget():
    backend, prog, reg = _three_pass()
    res = random_search(backend, prog, reg, 3, seed=42, budget_samples=25)
    assert res.samples_used == 25
    assert backend.samples == 25
    assert len(res.trace) == 25
    assert len(res.evals) == 25
    assert res.engine == "random"
    for seq, cycles in res.evals:
        assert len(seq) == 3
        assert all(p in reg.ids for p in seq)


def test_random_search_seed_determinism():
    b1, prog, reg = _three_pass()
    b2 = SyntheticBackend()
    r1 = random_search(b1, prog, reg, 3, seed=7, budget_samples=40)
    r2 = random_search(b2, prog, reg, 3, seed=7, budget_samples=40)
    assert r1.evals == r2.evals
    r3 = random_search(SyntheticBackend(), prog, reg, 3, seed=8,
                       budget_samples=40)
    assert r3.evals != r1.evals


def test_random_search_wall_budget():
    backend, prog, reg = _three_pass()
    res = random_search(backend, prog, reg, 3, seed=0, budget_ms=50)
    assert res.samples_used >= 1
    assert res.samples_used == len(res.trace)


def test_random_search_requires_budget():
    backend, prog, reg = _three_pass()
    with pytest.raises(PhaserError):
        random_search(backend, prog, reg, 3, seed=0)


def test_greedy_stops_in_trap():
    backend, prog, reg = _trap()
    res = greedy_insert(backend, prog, reg, 4)
    assert res.best_sequence == [30]
    assert res.best_cycles == 9300
    # step 1 tries K*1 = 6 candidates, step 2 tries K*2 = 12, then stops
    assert res.samples_used == 18
    assert res.engine == "greedy"


def test_greedy_trap_is_below_exhaustive():
    backend, prog, reg = _trap()
    exh = exhaustive(backend, prog, reg, 4)
    assert exh.best_cycles == 4650
    assert exh.best_sequence == [5, 30, 36, 25]
    greedy = greedy_insert(SyntheticBackend(), prog, reg, 4)
    assert greedy.best_cycles > exh.best_cycles


def test_greedy_continue_exhausts_budget():
    backend, prog, reg = _trap()
    res = greedy_insert(backend, prog, reg, 4, continue_on_no_improve=True)
    # sum over steps t=1..4 of K*t with K=6
    assert res.samples_used == 6 * (1 + 2 + 3 + 4)
    # committing non-improving candidates never loses the best prefix
    assert res.best_cycles == 9300
    assert res.best_sequence == [30]


def test_greedy_finds_chain_when_improvements_exist():
    backend, prog, reg = _three_pass()
    res = greedy_insert(backend, prog, reg, 3)
    # first insertion picks the single best pass (31: x0.85)
    first = res.evals[:len(reg)]
    assert min(c for _, c in first) == 8500
    assert res.best_cycles <= 8500
    assert len(res.best_sequence) >= 1


def test_greedy_tie_breaks_on_pass_id_then_position():
    prog = SyntheticProgram(name="flat", base_cycles=5000, rules=())
    backend = SyntheticBackend()
    reg = PassRegistry(ids=(9, 5, 7))
    res = greedy_insert(backend, prog, reg, 3, continue_on_no_improve=True)
    # every candidate ties, so the committed sequence is all lowest ids
    assert res.samples_used == 3 * (1 + 2 + 3)
    committed = res.evals[3][0]  # first candidate of step 2
    assert committed[:1] == [5] or committed == [5, 5]
    # the final best recorded is the empty-sequence cost (nothing improves)
    assert res.best_cycles == 5000
    assert res.best_sequence == []


def test_greedy_worker_invariance():
    res1 = greedy_insert(SyntheticBackend(), _trap()[1], _trap()[2], 4,
                         workers=1)
    res4 = greedy_insert(SyntheticBackend(), _trap()[1], _trap()[2], 4,
                         workers=4)
    assert res1.evals == res4.evals
    assert res1.trace == res4.trace
    assert res1.best_sequence == res4.best_sequence


def test_genetic_determinism_and_accounting():
    _, prog, reg = _three_pass()
    cfg = GaConfig(population_size=10, generations=5)
    b1, b2 = SyntheticBackend(), SyntheticBackend()
    r1 = genetic(b1, prog, reg, 3, cfg, seed=3)
    r2 = genetic(b2, prog, reg, 3, cfg, seed=3)
    assert r1.evals == r2.evals
    assert r1.best_sequence == r2.best_sequence
    assert r1.samples_used == 10 * 5
    assert b1.samples == 50
    r3 = genetic(SyntheticBackend(), prog, reg, 3, cfg, seed=4)
    assert r3.evals != r1.evals


def test_genetic_elitism_never_regresses():
    _, prog, reg = _three_pass()
    cfg = GaConfig(population_size=12, generations=8)
    res = genetic(SyntheticBackend(), prog, reg, 3, cfg, seed=5)
    # per-generation best cost is non-increasing because the elite
    # genomes survive unchanged
    gen_best = []
    for g in range(cfg.generations):
        block = res.evals[g * 12:(g + 1) * 12]
        gen_best.append(min(c for _, c in block))
    assert all(a >= b for a, b in zip(gen_best, gen_best[1:]))


def test_genetic_worker_invariance():
    _, prog, reg = _three_pass()
    cfg = GaConfig(population_size=16, generations=6)
    r1 = genetic(SyntheticBackend(), prog, reg, 3, cfg, seed=9, workers=1)
    r4 = genetic(SyntheticBackend(), prog, reg, 3, cfg, seed=9, workers=4)
    assert r1.evals == r4.evals
    assert r1.trace == r4.trace
    assert r1.best_sequence == r4.best_sequence


def test_genetic_solves_three_pass_with_defaults():
    _, prog, reg = _three_pass()
    res = genetic(SyntheticBackend(), prog, reg, 3,
                  GaConfig(population_size=50, generations=40), seed=0)
    assert res.best_cycles == 4087
    assert res.best_sequence == [31, 23, 33]


def test_ga_config_validation():
    with pytest.raises(PhaserError):
        GaConfig(population_size=1)
    with pytest.raises(PhaserError):
        GaConfig(generations=0)
    with pytest.raises(PhaserError):
        GaConfig(tournament_size=0)
    with pytest.raises(PhaserError):
        GaConfig(tournament_size=51)
    with pytest.raises(PhaserError):
        GaConfig(crossover_rate=1.5)
    with pytest.raises(PhaserError):
        GaConfig(mutation_rate=-0.1)
    with pytest.raises(PhaserError):
        GaConfig(elitism_count=0)
    with pytest.raises(PhaserError):
        GaConfig(elitism_count=50)


def test_evaluate_batch_matches_serial_order():
    backend, prog, reg = _three_pass()
    seqs = [[31], [23], [33], [31, 23], [23, 31], [31, 23, 33]]
    serial = [SyntheticBackend().evaluate(prog, s) for s in seqs]
    threaded = evaluate_batch(backend, prog, seqs, workers=4)
    assert threaded == serial
    assert backend.samples == len(seqs)


def test_search_result_json_roundtrip():
    backend, prog, reg = _trap()
    res = greedy_insert(backend, prog, reg, 4)
    text = res.to_json()
    back = SearchResult.from_json(text)
    assert back.best_sequence == res.best_sequence
    assert back.best_cycles == res.best_cycles
    assert back.samples_used == res.samples_used
    assert back.engine == "greedy"
    assert back.trace == res.trace
    d = json.loads(text)
    assert set(d) == {"engine", "best_sequence", "best_cycles",
                      "samples_used", "wall_ms", "trace"}


def test_write_trace_csv(tmp_path):
    backend, prog, reg = _three_pass()
    res = random_search(backend, prog, reg, 3, seed=1, budget_samples=5)
    out = tmp_path / "trace.csv"
    write_trace_csv(out, res.trace)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "sample_index,best_cycles"
    assert len(lines) == 6
    assert lines[1].startswith("1,")
