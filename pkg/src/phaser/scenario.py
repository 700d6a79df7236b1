"""Synthetic tuning scenarios: cost models driven by sequence rules.

A scenario file (.scn) declares one or more synthetic programs. Each
program has a base cycle count and an ordered list of rules. A rule
fires when its trigger matches the applied pass sequence:

    present  p      pass p occurs anywhere
    before   a b    some occurrence of a precedes some occurrence of b
    adjacent a b    b immediately follows a
    twice    p      p occurs at least twice

Fired rules apply in declaration order to the running cycle count:
multiplicative rules floor-divide (cycles = cycles * num // den, with
the factor written as an exact decimal such as 0.85), additive rules
add a signed integer delta. All arithmetic is integer-exact.

A rule may also advertise itself through a feature index: while the
rule has not fired yet, feature[index] is raised by feature_value.
Decoy features take deterministic pseudo-random values derived from
the applied sequence and a noise seed (not the program name, so two
programs with the same seed share the same decoys and the decoys
carry no program identity), and identical runs see identical noise.

The exact file grammar lives in docs/file_formats.md.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from .errors import ScenarioError
from .irfeatures import N_FEATURES
from .passes import N_PASSES, PassRegistry
from .util import make_rng, stable_hash

TRIGGERS = ("present", "before", "adjacent", "twice")

SCENARIO_VERSION = 1


@dataclass(frozen=True)
class Rule:
    trigger: str
    passes: tuple
    num: int = 1
    den: int = 1
    delta: int = 0
    feature: int = -1
    feature_value: int = 0

    def __post_init__(self):
        if self.trigger not in TRIGGERS:
            raise ScenarioError(f"unknown trigger '{self.trigger}'")
        want = 1 if self.trigger in ("present", "twice") else 2
        if len(self.passes) != want:
            raise ScenarioError(
                f"trigger '{self.trigger}' needs {want} pass id(s), "
                f"got {len(self.passes)}")
        for p in self.passes:
            if not 0 <= p < N_PASSES:
                raise ScenarioError(f"pass id {p} out of range")
        if self.den <= 0 or self.num < 0:
            raise ScenarioError("factor must be a non-negative rational")
        if self.num == self.den and self.delta == 0:
            raise ScenarioError("rule has no effect")
        if self.num != self.den and self.delta != 0:
            raise ScenarioError("rule mixes factor and delta")
        if self.feature >= N_FEATURES:
            raise ScenarioError(f"feature index {self.feature} out of range")

    def fires(self, sequence):
        a = self.passes[0]
        if self.trigger == "present":
            return a in sequence
        if self.trigger == "twice":
            count = 0
            for p in sequence:
                if p == a:
                    count += 1
                    if count >= 2:
                        return True
            return False
        b = self.passes[1]
        if self.trigger == "adjacent":
            return any(sequence[i] == a and sequence[i + 1] == b
                       for i in range(len(sequence) - 1))
        # before: an occurrence of a precedes an occurrence of b; checked
        # in this order so before(x, x) fires once x occurs twice
        seen_a = False
        for p in sequence:
            if p == b and seen_a:
                return True
            if p == a:
                seen_a = True
        return False

    def apply(self, cycles):
        if self.num != self.den:
            return cycles * self.num // self.den
        return cycles + self.delta


@dataclass
class SyntheticProgram:
    name: str
    base_cycles: int
    rules: tuple = ()
    base_features: dict = field(default_factory=dict)  # sparse index->value
    noise_features: tuple = ()
    noise_amplitude: int = 0
    noise_seed: int = 0

    def __post_init__(self):
        if self.base_cycles <= 0:
            raise ScenarioError(f"{self.name}: base_cycles must be positive")
        for idx, val in self.base_features.items():
            if not 0 <= idx < N_FEATURES:
                raise ScenarioError(f"{self.name}: feature index {idx}")
            if val < 0:
                raise ScenarioError(f"{self.name}: negative base feature")
        for idx in self.noise_features:
            if not 0 <= idx < N_FEATURES:
                raise ScenarioError(f"{self.name}: noise index {idx}")
        if self.noise_amplitude < 0:
            raise ScenarioError(f"{self.name}: negative noise amplitude")
        # Worst case over trigger subsets: rule effects are monotone
        # nondecreasing in the incoming cycle count, so folding with a
        # min at every rule bounds every reachable cost from below.
        low = self.base_cycles
        for rule in self.rules:
            low = min(low, rule.apply(low))
        if low < 1:
            raise ScenarioError(
                f"{self.name}: rules can drive cycles to {low} (< 1)")

    def cost(self, sequence):
        """Cycle count after applying the pass sequence. Exact."""
        seq = tuple(sequence)
        cycles = self.base_cycles
        for rule in self.rules:
            if rule.fires(seq):
                cycles = rule.apply(cycles)
        return cycles

    def features(self, sequence):
        """Feature vector after applying the pass sequence (int64)."""
        seq = tuple(sequence)
        v = np.zeros(N_FEATURES, dtype=np.int64)
        for idx, val in self.base_features.items():
            v[idx] = val
        for rule in self.rules:
            if rule.feature >= 0 and not rule.fires(seq):
                v[rule.feature] += rule.feature_value
        if self.noise_features and self.noise_amplitude > 0:
            for idx in self.noise_features:
                h = stable_hash(self.noise_seed, idx, *seq)
                v[idx] = h % (self.noise_amplitude + 1)
        return v


@dataclass
class Scenario:
    name: str
    programs: list
    subset: tuple = ()    # enabled pass ids; empty = full registry
    n: int = 0            # suggested episode length; 0 = unset
    baseline: tuple = ()  # pass sequence used as speedup baseline

    def program(self, name):
        for p in self.programs:
            if p.name == name:
                return p
        raise ScenarioError(f"no program named '{name}'")

    def registry(self):
        """Action space: the subset if one is declared, else all passes."""
        return PassRegistry(self.subset) if self.subset else PassRegistry()


def parse_factor(text):
    """Exact rational from a decimal string: '0.85' -> (17, 20)."""
    try:
        frac = Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ScenarioError(f"bad factor '{text}': {exc}") from None
    return frac.numerator, frac.denominator


def _parse_int_list(value):
    value = value.strip()
    if not value:
        return ()
    try:
        return tuple(int(tok) for tok in value.replace(",", " ").split())
    except ValueError as exc:
        raise ScenarioError(f"bad id list '{value}': {exc}") from None


def _parse_sparse_features(value):
    out = {}
    value = value.strip()
    if not value:
        return out
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ScenarioError(f"bad feature entry '{item}' (want idx:value)")
        idx, val = item.split(":", 1)
        out[int(idx)] = int(val)
    return out


def loads_scenario(text, name="scenario"):
    """Parse scenario text. Raises ScenarioError with the line number."""
    header = {}
    programs = []
    prog = None      # dict under construction
    rule = None      # dict under construction

    def finish_rule():
        nonlocal rule
        if rule is None:
            return
        passes = _parse_int_list(rule.get("passes", ""))
        num, den = 1, 1
        if "factor" in rule:
            num, den = parse_factor(rule["factor"])
        try:
            built = Rule(
                trigger=rule.get("trigger", ""),
                passes=passes,
                num=num,
                den=den,
                delta=int(rule.get("delta", 0)),
                feature=int(rule.get("feature", -1)),
                feature_value=int(rule.get("feature_value", 0)),
            )
        except ScenarioError as exc:
            raise ScenarioError(f"line {rule['_line']}: {exc}") from None
        prog["rules"].append(built)
        rule = None

    def finish_program():
        nonlocal prog
        if prog is None:
            return
        try:
            programs.append(SyntheticProgram(
                name=prog.get("name", f"program{len(programs)}"),
                base_cycles=int(prog.get("base_cycles", 0)),
                rules=tuple(prog["rules"]),
                base_features=_parse_sparse_features(prog.get("features", "")),
                noise_features=_parse_int_list(prog.get("noise_features", "")),
                noise_amplitude=int(prog.get("noise_amplitude", 0)),
                noise_seed=int(prog.get("noise_seed", 0)),
            ))
        except ScenarioError as exc:
            raise ScenarioError(f"line {prog['_line']}: {exc}") from None
        prog = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[program]":
            finish_rule()
            finish_program()
            prog = {"rules": [], "_line": lineno}
            continue
        if line == "[rule]":
            finish_rule()
            if prog is None:
                raise ScenarioError(f"line {lineno}: [rule] before [program]")
            rule = {"_line": lineno}
            continue
        if line.startswith("["):
            raise ScenarioError(f"line {lineno}: unknown section {line}")
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        target = rule if rule is not None else (
            prog if prog is not None else header)
        if key in target and key != "_line":
            raise ScenarioError(f"line {lineno}: duplicate key '{key}'")
        target[key] = value
    finish_rule()
    finish_program()

    version = int(header.get("version", SCENARIO_VERSION))
    if version != SCENARIO_VERSION:
        raise ScenarioError(f"unsupported scenario version {version}")
    if not programs:
        raise ScenarioError("scenario defines no programs")
    subset = _parse_int_list(header.get("subset", ""))
    for p in subset:
        if not 0 <= p < N_PASSES:
            raise ScenarioError(f"subset pass id {p} out of range")
    if len(set(subset)) != len(subset):
        raise ScenarioError("subset lists a pass id twice")
    return Scenario(
        name=header.get("name", name),
        programs=programs,
        subset=subset,
        n=int(header.get("n", 0)),
        baseline=_parse_int_list(header.get("baseline", "")),
    )


def load_scenario(path):
    from pathlib import Path
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return loads_scenario(text, name=p.stem)


def dumps_scenario(scenario):
    """Render a Scenario back to file text (round-trips via loads)."""
    lines = [f"version = {SCENARIO_VERSION}", f"name = {scenario.name}"]
    if scenario.subset:
        lines.append("subset = " + ", ".join(map(str, scenario.subset)))
    if scenario.n:
        lines.append(f"n = {scenario.n}")
    if scenario.baseline:
        lines.append("baseline = " + ", ".join(map(str, scenario.baseline)))
    for prog in scenario.programs:
        lines += ["", "[program]", f"name = {prog.name}",
                  f"base_cycles = {prog.base_cycles}"]
        if prog.base_features:
            pairs = ", ".join(f"{i}:{v}" for i, v in
                              sorted(prog.base_features.items()))
            lines.append(f"features = {pairs}")
        if prog.noise_features:
            lines.append("noise_features = "
                         + ", ".join(map(str, prog.noise_features)))
            lines.append(f"noise_amplitude = {prog.noise_amplitude}")
            lines.append(f"noise_seed = {prog.noise_seed}")
        for rule in prog.rules:
            lines += ["", "[rule]", f"trigger = {rule.trigger}",
                      "passes = " + ", ".join(map(str, rule.passes))]
            if rule.num != rule.den:
                frac = Fraction(rule.num, rule.den)
                lines.append(f"factor = {frac.numerator}/{frac.denominator}")
            if rule.delta:
                lines.append(f"delta = {rule.delta}")
            if rule.feature >= 0:
                lines.append(f"feature = {rule.feature}")
                lines.append(f"feature_value = {rule.feature_value}")
    return "\n".join(lines) + "\n"


def save_scenario(path, scenario):
    with open(path, "w") as fh:
        fh.write(dumps_scenario(scenario))


def shipped_scenario_names():
    root = resources.files("phaser") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir()
                  if p.name.endswith(".scn"))


def shipped_scenario(name):
    """Load one of the packaged scenarios ('licm_inline', ...) by name."""
    ref = resources.files("phaser") / "scenarios" / f"{name}.scn"
    try:
        text = ref.read_text()
    except (FileNotFoundError, OSError):
        raise ScenarioError(
            f"no shipped scenario '{name}' "
            f"(have: {', '.join(shipped_scenario_names())})") from None
    return loads_scenario(text, name=name)


def make_feature_corpus(n_programs=20, *,
                        subset=(5, 7, 23, 25, 28, 30, 31, 33),
                        base_cycles=10000, gain=500, signal=5,
                        noise_features=tuple(range(8, 48)),
                        noise_amplitude=12, noise_seed=0):
    """Corpus where exactly one pass pays off per program and a low
    informative feature index says which one.

    Program i benefits (cycles - gain) from pass subset[i % len(subset)]
    only; its rule advertises itself on feature i % len(subset) with the
    given signal value while it has not fired. Every program carries the
    same constant block on features 48..55 and shares the same
    sequence-keyed decoy noise on noise_features, so the decoys vary
    during an episode but never identify the program."""
    if n_programs < 1:
        raise ScenarioError("need at least one program")
    constants = {48: 3, 49: 7, 50: 11, 51: 100, 52: 6, 53: 9, 54: 4, 55: 2}
    programs = []
    for i in range(n_programs):
        j = i % len(subset)
        rule = Rule(trigger="present", passes=(subset[j],), delta=-gain,
                    feature=j, feature_value=signal)
        programs.append(SyntheticProgram(
            name=f"prog{i:02d}",
            base_cycles=base_cycles,
            rules=(rule,),
            base_features=dict(constants),
            noise_features=noise_features,
            noise_amplitude=noise_amplitude,
            noise_seed=noise_seed,
        ))
    return Scenario(name="feature_corpus", programs=programs,
                    subset=tuple(subset), n=2)


def random_scenario(seed, *, n_programs=2, n_rules=3, n=8):
    """A small random but valid scenario, deterministic in the seed.
    Factors stay in [0.5, 1.5] and deltas in [-200, 200] so the
    positivity validation never trips for sane rule counts."""
    rng = make_rng(stable_hash("random-scenario", seed))
    k = int(rng.integers(4, 9))
    subset = tuple(sorted(rng.choice(N_PASSES, size=k, replace=False)
                          .tolist()))
    programs = []
    for pi in range(n_programs):
        rules = []
        for _ in range(n_rules):
            trigger = TRIGGERS[rng.integers(len(TRIGGERS))]
            want = 1 if trigger in ("present", "twice") else 2
            passes = tuple(int(subset[i]) for i in
                           rng.integers(0, k, size=want))
            if rng.random() < 0.7:
                num = int(rng.integers(5, 16))  # factor num/10 in [0.5, 1.5]
                if num == 10:
                    num = 9
                rules.append(Rule(trigger=trigger, passes=passes,
                                  num=num, den=10))
            else:
                delta = int(rng.integers(1, 201))
                if rng.random() < 0.5:
                    delta = -delta
                rules.append(Rule(trigger=trigger, passes=passes,
                                  delta=delta))
        programs.append(SyntheticProgram(
            name=f"rand{pi}",
            base_cycles=int(rng.integers(5000, 50001)),
            rules=tuple(rules),
        ))
    return Scenario(name=f"random{seed}", programs=programs,
                    subset=subset, n=n)
