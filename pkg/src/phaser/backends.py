"""Cost backends: map (program, pass sequence) to a cycle count.

Every counted evaluation increments `samples`; engine budgets are
expressed in these units. Two bookkeeping paths are deliberately
uncounted and documented as such:

- the cost of the untouched program (empty prepasses) during reset,
  so an episode of length N at compile stride s consumes exactly
  ceil(N/s) samples per program;
- feature extraction, which never runs the cost command.
"""

from __future__ import annotations

import re
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import BackendError, BackendTimeout, CommandFailed, CostParseError
from .passes import FULL_REGISTRY

DEFAULT_TIMEOUT_S = 300.0


class Backend:
    """Base class. Subclasses implement _cost and may override
    _empty_cost and features."""

    def __init__(self):
        self.samples = 0
        self._lock = threading.Lock()

    def evaluate(self, program, sequence, count=True):
        """Thread-safe: engines may fan candidate evaluations out to
        worker threads."""
        cost = self._cost(program, tuple(sequence))
        if count:
            with self._lock:
                self.samples += 1
        return cost

    def initial_cost(self, program, prepasses=()):
        """Cost at episode start. Counted only if prepasses is nonempty."""
        prepasses = tuple(prepasses)
        if prepasses:
            return self.evaluate(program, prepasses)
        return self._empty_cost(program)

    def _cost(self, program, sequence):
        raise NotImplementedError

    def _empty_cost(self, program):
        return self._cost(program, ())

    def features(self, program, sequence):
        """Feature vector after applying sequence, or None if the
        backend cannot provide features."""
        return None


class SyntheticBackend(Backend):
    """Evaluates SyntheticProgram cost models. Exact integer costs."""

    def _cost(self, program, sequence):
        return program.cost(sequence)

    def features(self, program, sequence):
        return program.features(sequence)


@dataclass
class IrProgram:
    """A program on disk for the external backend."""
    name: str
    path: str


class ExternalBackend(Backend):
    """Drives external transform/cost commands.

    transform_cmd and cost_cmd are command templates with the
    placeholders {input}, {passes}, {output} ({input} only, for
    cost_cmd). Templates are split with shlex first; the {passes}
    token expands to one argv entry per pass flag, for example
    '-simplifycfg -loop-rotate -loop-unroll' for ids (31, 23, 33).

    The cycle count is the last integer in the cost command's stdout;
    anything else raises CostParseError.
    """

    _INT_RE = re.compile(r"-?\d+")

    def __init__(self, transform_cmd, cost_cmd, registry=FULL_REGISTRY,
                 timeout_s=DEFAULT_TIMEOUT_S, workdir=None):
        super().__init__()
        self.transform_argv = shlex.split(transform_cmd)
        self.cost_argv = shlex.split(cost_cmd)
        if not any("{passes}" in tok for tok in self.transform_argv):
            raise BackendError("transform_cmd must mention {passes}")
        self.registry = registry
        self.timeout_s = timeout_s
        self._dir = Path(workdir) if workdir else Path(
            tempfile.mkdtemp(prefix="phaser-ext-"))
        self._dir.mkdir(parents=True, exist_ok=True)
        self._empty_costs = {}
        self._last_output = None  # (program name, sequence, path)
        self._out_counter = 0

    def _run(self, argv):
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=self.timeout_s)
        except subprocess.TimeoutExpired:
            raise BackendTimeout(
                f"'{argv[0]}' exceeded {self.timeout_s}s") from None
        except OSError as exc:
            raise CommandFailed(f"cannot run '{argv[0]}': {exc}") from None
        if proc.returncode != 0:
            raise CommandFailed(
                f"'{argv[0]}' exited {proc.returncode}", stderr=proc.stderr)
        return proc.stdout

    def _fill(self, template, mapping, splice_passes=None):
        argv = []
        for tok in template:
            if tok == "{passes}":
                argv.extend(splice_passes or [])
            else:
                argv.append(tok.format(**mapping))
        return argv

    def _transform(self, program, sequence):
        with self._lock:
            self._out_counter += 1
            serial = self._out_counter
        out = self._dir / f"{Path(program.path).stem}-{serial}.ll"
        flags = [self.registry.name(p) for p in sequence]
        argv = self._fill(self.transform_argv,
                          {"input": program.path, "output": str(out),
                           "passes": ""},
                          splice_passes=flags)
        self._run(argv)
        with self._lock:
            self._last_output = (program.name, tuple(sequence), out)
        return out

    def _parse_cost(self, text):
        matches = self._INT_RE.findall(text)
        if not matches:
            raise CostParseError(
                f"no integer in cost output: {text[:200]!r}")
        return int(matches[-1])

    def _cost(self, program, sequence):
        transformed = self._transform(program, sequence)
        out = self._run(self._fill(self.cost_argv,
                                   {"input": str(transformed)}))
        return self._parse_cost(out)

    def _empty_cost(self, program):
        # Cost of the raw input, cached per program, never counted.
        if program.name not in self._empty_costs:
            out = self._run(self._fill(self.cost_argv,
                                       {"input": program.path}))
            self._empty_costs[program.name] = self._parse_cost(out)
        return self._empty_costs[program.name]

    def features(self, program, sequence):
        from .irfeatures import extract_features_from_text
        sequence = tuple(sequence)
        if not sequence:
            return extract_features_from_text(Path(program.path).read_text())
        last = self._last_output
        if last and last[0] == program.name and last[1] == sequence:
            path = last[2]
        else:
            path = self._transform(program, sequence)
        return extract_features_from_text(Path(path).read_text())
