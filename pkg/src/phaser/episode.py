"""Episode records and the JSON-lines log format.

Each line of an episode log is one JSON object. Two record types
share the file, distinguished by the "type" field:

- "episode": a full environment episode with per-step observations,
  actions (registry pass ids), rewards and cycle counts;
- "eval": a single candidate evaluation from a search engine
  (sample index, sequence, cycles).

Every record carries the schema version under "v". Logs are written
with sorted keys and fixed separators so identical runs produce
byte-identical files; for the same reason records hold no timestamps.
Wall-clock timings live in the in-memory records and in run summaries
only. Rewards are exact integers (or rationals) in memory; rationals
that are not integral serialize as floats, documented as lossy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import PhaserError
from .util import canonical_json, json_number

SCHEMA_VERSION = 1


@dataclass
class StepRecord:
    action: int               # registry pass id (-1 in vector mode)
    reward: object            # int | Fraction | float
    cycles: object            # count after this step settles; list if
                              # the episode spans several programs
    observation: list = None  # observation seen before acting
    deltas: list = None       # vector mode only: per-position moves

    def to_dict(self):
        cyc = ([int(c) for c in self.cycles]
               if isinstance(self.cycles, (list, tuple))
               else int(self.cycles))
        d = {"reward": json_number(self.reward), "cycles": cyc}
        if self.deltas is not None:
            d["deltas"] = [int(x) for x in self.deltas]
        else:
            d["action"] = self.action
        if self.observation is not None:
            d["obs"] = [json_number(x) for x in self.observation]
        return d


@dataclass
class EpisodeRecord:
    programs: list
    mode: str
    reward_mode: str
    stride: int
    initial_cycles: list
    final_cycles: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    samples: int = 0
    seed: object = None
    action_space: list = None  # enabled registry ids for this run
    wall_ms: float = 0.0       # excluded from serialization

    @property
    def actions(self):
        return [s.action for s in self.steps]

    @property
    def total_reward(self):
        return sum(s.reward for s in self.steps)

    def to_dict(self):
        d = {
            "v": SCHEMA_VERSION,
            "type": "episode",
            "programs": list(self.programs),
            "mode": self.mode,
            "reward_mode": self.reward_mode,
            "stride": int(self.stride),
            "initial_cycles": [int(c) for c in self.initial_cycles],
            "final_cycles": [int(c) for c in self.final_cycles],
            "steps": [s.to_dict() for s in self.steps],
            "samples": int(self.samples),
            "seed": self.seed,
        }
        if self.action_space is not None:
            d["action_space"] = [int(p) for p in self.action_space]
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("v") != SCHEMA_VERSION:
            raise PhaserError(
                f"episode record schema v{d.get('v')} != v{SCHEMA_VERSION}")
        rec = cls(
            programs=list(d["programs"]),
            mode=d["mode"],
            reward_mode=d["reward_mode"],
            stride=d["stride"],
            initial_cycles=list(d["initial_cycles"]),
            final_cycles=list(d["final_cycles"]),
            samples=d["samples"],
            seed=d.get("seed"),
            action_space=d.get("action_space"),
        )
        for s in d["steps"]:
            rec.steps.append(StepRecord(
                action=s.get("action", -1), reward=s["reward"],
                cycles=s["cycles"], observation=s.get("obs"),
                deltas=s.get("deltas")))
        return rec


@dataclass
class EvalRecord:
    sample: int
    sequence: list
    cycles: int
    program: str = ""

    def to_dict(self):
        return {"v": SCHEMA_VERSION, "type": "eval", "sample": self.sample,
                "sequence": [int(p) for p in self.sequence],
                "cycles": int(self.cycles), "program": self.program}


def record_to_line(record):
    return canonical_json(record.to_dict())


def write_log(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_to_line(rec))
            fh.write("\n")


def read_log(path):
    """Read a log into (episodes, evals). Validates schema version."""
    import json
    episodes, evals = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if d.get("v") != SCHEMA_VERSION:
                raise PhaserError(
                    f"{path}:{lineno}: log schema v{d.get('v')}, "
                    f"this build reads v{SCHEMA_VERSION}")
            if d.get("type") == "episode":
                episodes.append(EpisodeRecord.from_dict(d))
            elif d.get("type") == "eval":
                evals.append(EvalRecord(sample=d["sample"],
                                        sequence=d["sequence"],
                                        cycles=d["cycles"],
                                        program=d.get("program", "")))
            else:
                raise PhaserError(
                    f"{path}:{lineno}: unknown record type {d.get('type')!r}")
    return episodes, evals
