"""Classical search engines over pass sequences.

All engines share the SearchResult shape and its accounting contract:
samples_used equals the backend counter delta, and the trace holds one
(sample_index, best_so_far_cycles) row per evaluation in the engine's
own deterministic evaluation order. Candidate batches may be evaluated
by a thread pool; results are always reduced in submission order, so
worker count never changes any output.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PhaserError, SpaceTooLarge
from .util import make_rng

EXHAUSTIVE_CAP = 10 ** 6


@dataclass
class SearchResult:
    best_sequence: list
    best_cycles: int
    samples_used: int
    wall_ms: float
    trace: list = field(default_factory=list)  # (sample_index, best_cycles)
    engine: str = ""
    evals: list = field(default_factory=list)  # (sequence, cycles) in order

    def to_dict(self):
        return {
            "engine": self.engine,
            "best_sequence": [int(p) for p in self.best_sequence],
            "best_cycles": int(self.best_cycles),
            "samples_used": int(self.samples_used),
            "wall_ms": round(float(self.wall_ms), 3),
            "trace": [[int(i), int(c)] for i, c in self.trace],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(best_sequence=d["best_sequence"],
                   best_cycles=d["best_cycles"],
                   samples_used=d["samples_used"],
                   wall_ms=d["wall_ms"],
                   trace=[tuple(row) for row in d["trace"]],
                   engine=d.get("engine", ""))


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "best_cycles"])
        for idx, cycles in trace:
            writer.writerow([idx, cycles])


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 50
    generations: int = 100
    tournament_size: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.05
    elitism_count: int = 2

    def __post_init__(self):
        if self.population_size < 2:
            raise PhaserError("population_size must be >= 2")
        if self.generations < 1:
            raise PhaserError("generations must be >= 1")
        if not 1 <= self.tournament_size <= self.population_size:
            raise PhaserError("tournament_size out of range")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise PhaserError("crossover_rate must be in [0, 1]")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise PhaserError("mutation_rate must be in [0, 1]")
        if not 1 <= self.elitism_count < self.population_size:
            raise PhaserError("elitism_count must be in [1, population_size)")


class _Tracker:
    """Accumulates the per-sample best-so-far trace and best sequence."""

    def __init__(self):
        self.trace = []
        self.evals = []
        self.best_seq = None
        self.best_cycles = None

    def record(self, sequence, cycles):
        if self.best_cycles is None or cycles < self.best_cycles:
            self.best_cycles = cycles
            self.best_seq = list(sequence)
        self.evals.append((list(sequence), cycles))
        self.trace.append((len(self.trace) + 1, self.best_cycles))


def evaluate_batch(backend, program, sequences, workers=1):
    """Evaluate candidate sequences, optionally on worker threads.
    Costs come back in submission order regardless of thread timing."""
    if workers <= 1 or len(sequences) <= 1:
        return [backend.evaluate(program, seq) for seq in sequences]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: backend.evaluate(program, s),
                             sequences))


def _result(engine, tracker, backend, start_samples, start_time,
            override_seq=None, override_cycles=None):
    best_seq = tracker.best_seq if override_seq is None else override_seq
    best_cycles = (tracker.best_cycles if override_cycles is None
                   else override_cycles)
    return SearchResult(
        engine=engine,
        best_sequence=list(best_seq),
        best_cycles=best_cycles,
        samples_used=backend.samples - start_samples,
        wall_ms=(time.perf_counter() - start_time) * 1000.0,
        trace=tracker.trace,
        evals=tracker.evals,
    )


def exhaustive(backend, program, registry, n, *, cap=EXHAUSTIVE_CAP,
               workers=1):
    """Enumerate every sequence in the subset; ties go to the
    lexicographically smallest pass-id sequence."""
    ids = sorted(registry.ids)
    space = len(ids) ** n
    if space > cap:
        raise SpaceTooLarge(f"{len(ids)}^{n} = {space} exceeds cap {cap}")
    start_samples, start_time = backend.samples, time.perf_counter()
    tracker = _Tracker()
    batch = []
    for seq in itertools.product(ids, repeat=n):
        batch.append(seq)
        if len(batch) >= 256:
            for s, c in zip(batch, evaluate_batch(backend, program, batch,
                                                  workers)):
                tracker.record(s, c)
            batch = []
    for s, c in zip(batch, evaluate_batch(backend, program, batch, workers)):
        tracker.record(s, c)
    return _result("exhaustive", tracker, backend, start_samples, start_time)


def random_search(backend, program, registry, n, *, seed=0,
                  budget_samples=None, budget_ms=None):
    """Uniform whole-sequence sampling until the budget runs out."""
    if not budget_samples and not budget_ms:
        raise PhaserError("random_search needs budget_samples or budget_ms")
    rng = make_rng(seed)
    ids = list(registry.ids)
    start_samples, start_time = backend.samples, time.perf_counter()
    tracker = _Tracker()
    while True:
        if budget_samples and len(tracker.trace) >= budget_samples:
            break
        if budget_ms and (time.perf_counter() - start_time) * 1000 >= budget_ms:
            break
        seq = [ids[i] for i in rng.integers(0, len(ids), size=n)]
        tracker.record(seq, backend.evaluate(program, seq))
    return _result("random", tracker, backend, start_samples, start_time)


def greedy_insert(backend, program, registry, n, *,
                  continue_on_no_improve=False, workers=1):
    """Grow a sequence by repeatedly inserting the single best
    (pass, position) pair.

    At step t the current sequence has length t-1, giving K*t
    candidates. Ties break on (lower pass id, lower position). By
    default the search stops as soon as no insertion strictly improves
    on the current cycles; with continue_on_no_improve the best
    candidate is committed anyway and the best prefix is returned.
    """
    ids = sorted(registry.ids)
    start_samples, start_time = backend.samples, time.perf_counter()
    tracker = _Tracker()
    current = []
    current_cycles = backend.initial_cost(program)
    final_seq, final_cycles = list(current), current_cycles

    for step in range(1, n + 1):
        candidates = []
        for pass_id in ids:                 # lower pass id first
            for pos in range(len(current) + 1):  # lower position first
                candidates.append(current[:pos] + [pass_id] + current[pos:])
        costs = evaluate_batch(backend, program, candidates, workers)
        best_idx, best_cost = None, None
        for i, (seq, cost) in enumerate(zip(candidates, costs)):
            tracker.record(seq, cost)
            if best_cost is None or cost < best_cost:
                best_idx, best_cost = i, cost
        if best_cost >= current_cycles and not continue_on_no_improve:
            break
        current = candidates[best_idx]
        current_cycles = best_cost
        if current_cycles < final_cycles:
            final_seq, final_cycles = list(current), current_cycles

    # The committed-best prefix; equals the global best-so-far except
    # when every candidate was worse than the starting point.
    return _result("greedy", tracker, backend, start_samples, start_time,
                   override_seq=final_seq, override_cycles=final_cycles)


def genetic(backend, program, registry, n, cfg=GaConfig(), *, seed=0,
            workers=1):
    """Integer-vector GA: tournament selection, one-point crossover,
    per-gene uniform resample mutation, elitism. Fitness = -cycles."""
    rng = make_rng(seed)
    ids = list(registry.ids)
    k = len(ids)
    start_samples, start_time = backend.samples, time.perf_counter()
    tracker = _Tracker()

    pop = rng.integers(0, k, size=(cfg.population_size, n))
    for _gen in range(cfg.generations):
        sequences = [[ids[g] for g in genome] for genome in pop]
        costs = evaluate_batch(backend, program, sequences, workers)
        for seq, cost in zip(sequences, costs):
            tracker.record(seq, cost)
        # Deterministic reduction: sort by (cost, genome lexicographic).
        order = sorted(range(len(pop)),
                       key=lambda i: (costs[i], tuple(pop[i])))
        pop = pop[order]

        children = [pop[i].copy() for i in range(cfg.elitism_count)]
        while len(children) < cfg.population_size:
            # Tournament: lowest sorted index wins (best fitness).
            p1 = pop[rng.integers(0, cfg.population_size,
                                  size=cfg.tournament_size).min()]
            if rng.random() < cfg.crossover_rate and n > 1:
                p2 = pop[rng.integers(0, cfg.population_size,
                                      size=cfg.tournament_size).min()]
                point = int(rng.integers(1, n))
                child = np.concatenate([p1[:point], p2[point:]])
            else:
                child = p1.copy()
            mask = rng.random(n) < cfg.mutation_rate
            if mask.any():
                child = child.copy()
                child[mask] = rng.integers(0, k, size=int(mask.sum()))
            children.append(child)
        pop = np.stack(children)

    return _result("genetic", tracker, backend, start_samples, start_time)
