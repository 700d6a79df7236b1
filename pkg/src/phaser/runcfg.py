"""Run configuration files and run manifests.

Config files are flat ``key = value`` lines. ``#`` starts a comment,
blank lines are skipped, and dotted keys namespace engine
hyperparameters (``ppo.lr = 0.003``). Values are scalars or comma (or
whitespace) separated lists; booleans are written true/false. Every
key is validated against the schema for the selected engine before
anything runs, and errors name the offending key. The full grammar is
documented in docs/file_formats.md.

The environment variable PHASER_SEED, when set, overrides the config
seed; the manifest records the effective seed.

A RunManifest freezes everything that determines a run's outputs:
the resolved config (defaults materialized), the artifact version and
the scenario hash. Its fingerprint hashes exactly those fields, so
two runs with equal fingerprints produce identical episode logs;
timestamps are recorded but excluded from the fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError, ScenarioError
from .irfeatures import N_FEATURES
from .scenario import load_scenario, loads_scenario, shipped_scenario_names
from .util import canonical_json

MANIFEST_VERSION = 1

ENGINES = ("exhaustive", "random", "greedy", "genetic", "dqn", "pg", "ppo",
           "ppo-multiaction")
RL_ENGINES = ("dqn", "pg", "ppo", "ppo-multiaction")

# (type, default); type is one of int/float/bool/str/ints/strs.
_COMMON_FIELDS = {
    "engine": ("str", None),
    "scenario": ("str", None),
    "programs": ("strs", ()),
    "n": ("int", 0),
    "mode": ("str", "histogram"),
    "reward": ("str", "delta"),
    "normalization": ("str", "none"),
    "stride": ("int", 1),
    "seed": ("int", 0),
    "out": ("str", ""),
    "episodes": ("int", 0),
    "baseline": ("ints", ()),
    "workers": ("int", 1),
    "record_observations": ("bool", True),
    "feature_mask": ("ints", ()),
    "rotation": ("str", "joint"),
    "budget.samples": ("int", 0),
    "budget.wall_ms": ("int", 0),
}

_ENGINE_FIELDS = {
    "exhaustive": {"cap": ("int", 10 ** 6)},
    "random": {},
    "greedy": {"continue_on_no_improve": ("bool", False)},
    "genetic": {
        "population": ("int", 50),
        "generations": ("int", 100),
        "tournament": ("int", 3),
        "crossover": ("float", 0.9),
        "mutation": ("float", 0.05),
        "elitism": ("int", 2),
    },
    "dqn": {
        "hidden": ("ints", (512, 256)),
        "lr": ("float", 1e-3),
        "gamma": ("float", 1.0),
        "buffer": ("int", 10000),
        "batch_size": ("int", 32),
        "target_sync": ("int", 100),
        "warmup": ("int", 100),
        "epsilon_start": ("float", 1.0),
        "epsilon_end": ("float", 0.05),
    },
    "pg": {
        "hidden": ("ints", (256, 256)),
        "lr": ("float", 0.01),
        "batch_episodes": ("int", 10),
        "optimizer": ("str", "sgd"),
        "baseline": ("bool", True),
    },
    "ppo": {
        "hidden": ("ints", (256, 256)),
        "lr": ("float", 3e-4),
        "clip": ("float", 0.2),
        "epochs": ("int", 4),
        "minibatch": ("int", 64),
        "gamma": ("float", 1.0),
        "value_coef": ("float", 1.0),
        "entropy_coef": ("float", 0.01),
        "batch_episodes": ("int", 8),
    },
}
# The multi-action engine reuses the ppo hyperparameters plus the
# number of refinement steps per episode (0 means: use n).
_ENGINE_FIELDS["ppo-multiaction"] = dict(_ENGINE_FIELDS["ppo"],
                                         steps=("int", 0))

_MODES = ("features", "histogram", "combined", "onehot")
_REWARDS = ("delta", "log", "geomean")
_NORMALIZATIONS = ("none", "log", "per-instruction")


def parse_config_text(text):
    """Flat dict from config text. Duplicate keys and non-assignment
    lines raise ConfigError with the line number."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def _coerce(key, kind, value):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value not in ("true", "false"):
                raise ValueError("expected true or false")
            return value == "true"
        if kind == "ints":
            if not value.strip():
                return ()
            return tuple(int(tok) for tok in
                         value.replace(",", " ").split())
        if kind == "strs":
            if not value.strip():
                return ()
            return tuple(tok.strip() for tok in value.split(",")
                         if tok.strip())
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


@dataclass
class RunConfig:
    """A validated tuning run description. params holds the selected
    engine's hyperparameters with defaults filled in."""

    engine: str
    scenario: str
    programs: tuple = ()
    n: int = 0
    mode: str = "histogram"
    reward: str = "delta"
    normalization: str = "none"
    stride: int = 1
    seed: int = 0
    out: str = ""
    episodes: int = 0
    baseline: tuple = ()
    workers: int = 1
    record_observations: bool = True
    feature_mask: tuple = ()
    rotation: str = "joint"
    budget_samples: int = 0
    budget_ms: int = 0
    params: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text):
        raw = parse_config_text(text)
        for required in ("engine", "scenario"):
            if required not in raw:
                raise ConfigError(f"{required}: required key missing")
        engine = raw["engine"]
        if engine not in ENGINES:
            raise ConfigError(
                f"engine: unknown engine '{engine}' "
                f"(choose from {', '.join(ENGINES)})")
        engine_fields = _ENGINE_FIELDS[engine]
        prefix = engine + "."

        fields = {}
        params = {}
        for key, value in raw.items():
            if key in _COMMON_FIELDS:
                kind, _ = _COMMON_FIELDS[key]
                fields[key] = _coerce(key, kind, value)
            elif key.startswith(prefix) and key[len(prefix):] in engine_fields:
                name = key[len(prefix):]
                kind, _ = engine_fields[name]
                params[name] = _coerce(key, kind, value)
            else:
                raise ConfigError(f"{key}: unknown key for engine '{engine}'")
        for name, (kind, default) in engine_fields.items():
            params.setdefault(name, default)

        env_seed = os.environ.get("PHASER_SEED")
        if env_seed is not None:
            fields["seed"] = _coerce("PHASER_SEED", "int", env_seed)

        cfg = cls(
            engine=engine,
            scenario=fields.get("scenario", raw["scenario"]),
            programs=fields.get("programs", ()),
            n=fields.get("n", 0),
            mode=fields.get("mode", "histogram"),
            reward=fields.get("reward", "delta"),
            normalization=fields.get("normalization", "none"),
            stride=fields.get("stride", 1),
            seed=fields.get("seed", 0),
            out=fields.get("out", ""),
            episodes=fields.get("episodes", 0),
            baseline=fields.get("baseline", ()),
            workers=fields.get("workers", 1),
            record_observations=fields.get("record_observations", True),
            feature_mask=fields.get("feature_mask", ()),
            rotation=fields.get("rotation", "joint"),
            budget_samples=fields.get("budget.samples", 0),
            budget_ms=fields.get("budget.wall_ms", 0),
            params=params,
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def validate(self):
        if self.mode not in _MODES:
            raise ConfigError(f"mode: unknown mode '{self.mode}'")
        if self.reward not in _REWARDS:
            raise ConfigError(f"reward: unknown reward '{self.reward}'")
        if self.normalization not in _NORMALIZATIONS:
            raise ConfigError(
                f"normalization: unknown technique '{self.normalization}'")
        if self.stride < 1:
            raise ConfigError("stride: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.n < 0 or self.episodes < 0:
            raise ConfigError("n and episodes must be non-negative")
        if self.budget_samples < 0 or self.budget_ms < 0:
            raise ConfigError("budget.samples and budget.wall_ms "
                              "must be non-negative")
        if self.rotation not in ("joint", "roundrobin"):
            raise ConfigError(
                f"rotation: unknown rotation '{self.rotation}' "
                "(joint or roundrobin)")
        if self.engine in RL_ENGINES and self.episodes == 0:
            raise ConfigError(
                f"episodes: required for engine '{self.engine}'")
        if self.engine == "random" and not (self.budget_samples
                                            or self.budget_ms):
            raise ConfigError(
                "budget.samples: engine 'random' needs budget.samples "
                "or budget.wall_ms")
        if self.feature_mask:
            if self.mode not in ("features", "combined"):
                raise ConfigError(
                    "feature_mask: needs mode features or combined")
            bad = [i for i in self.feature_mask
                   if not 0 <= i < N_FEATURES]
            if bad:
                raise ConfigError(
                    f"feature_mask: indices {bad} out of [0, {N_FEATURES})")
        if self.engine == "pg" and self.params["optimizer"] not in (
                "sgd", "adam"):
            raise ConfigError(
                f"pg.optimizer: unknown optimizer "
                f"'{self.params['optimizer']}'")

    def resolve_scenario(self):
        """Load the scenario (path or shipped name). Returns
        (Scenario, text) where text is what the hash covers."""
        spec = self.scenario
        p = Path(spec)
        if spec.endswith(".scn") or p.exists():
            try:
                text = p.read_text()
            except OSError as exc:
                raise ConfigError(
                    f"scenario: cannot read {spec}: {exc}") from None
            return loads_scenario(text, name=p.stem), text
        if spec in shipped_scenario_names():
            from importlib import resources
            text = (resources.files("phaser") / "scenarios"
                    / f"{spec}.scn").read_text()
            return loads_scenario(text, name=spec), text
        raise ConfigError(
            f"scenario: '{spec}' is neither a file nor a shipped scenario "
            f"(shipped: {', '.join(shipped_scenario_names())})")

    def to_dict(self):
        """Fully resolved config for the manifest (defaults included)."""
        d = {
            "engine": self.engine,
            "scenario": self.scenario,
            "programs": list(self.programs),
            "n": self.n,
            "mode": self.mode,
            "reward": self.reward,
            "normalization": self.normalization,
            "stride": self.stride,
            "seed": self.seed,
            "episodes": self.episodes,
            "baseline": list(self.baseline),
            "workers": self.workers,
            "record_observations": self.record_observations,
            "feature_mask": list(self.feature_mask),
            "rotation": self.rotation,
            "budget": {"samples": self.budget_samples,
                       "wall_ms": self.budget_ms},
        }
        d[self.engine] = {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in sorted(self.params.items())}
        return d


def scenario_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    scenario_hash: str
    seed: int
    artifact_version: str = __version__
    created: str = ""
    finished: str = ""

    def fingerprint(self):
        """Hash of everything that determines the run's outputs.
        Timestamps are deliberately outside it."""
        basis = {
            "artifact_version": self.artifact_version,
            "config": self.config,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
        }
        return hashlib.sha256(canonical_json(basis).encode()).hexdigest()

    def to_dict(self):
        return {
            "manifest_version": MANIFEST_VERSION,
            "artifact_version": self.artifact_version,
            "config": self.config,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "created": self.created,
            "finished": self.finished,
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("manifest_version") != MANIFEST_VERSION:
            raise ConfigError(
                f"manifest version {d.get('manifest_version')} "
                f"!= {MANIFEST_VERSION}")
        return cls(config=d["config"],
                   scenario_hash=d["scenario_hash"],
                   seed=d["seed"],
                   artifact_version=d["artifact_version"],
                   created=d.get("created", ""),
                   finished=d.get("finished", ""))


def build_manifest(cfg, scenario_text):
    return RunManifest(
        config=cfg.to_dict(),
        scenario_hash=scenario_hash(scenario_text),
        seed=cfg.seed,
        created=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    )


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    try:
        with open(path) as fh:
            return RunManifest.from_dict(json.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"malformed manifest {path}: {exc}") from None
