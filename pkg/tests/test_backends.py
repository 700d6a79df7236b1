"""Backend sample accounting and the external command driver."""

import os
import stat
import threading

import pytest

from phaser.backends import ExternalBackend, IrProgram, SyntheticBackend
from phaser.errors import (BackendError, BackendTimeout, CommandFailed,
                           CostParseError)
from phaser.scenario import make_feature_corpus, shipped_scenario


def test_counting_and_uncounted_paths():
    backend = SyntheticBackend()
    prog = shipped_scenario("three_pass_opt").programs[0]
    assert backend.samples == 0
    backend.evaluate(prog, [31, 23])
    assert backend.samples == 1
    backend.evaluate(prog, [31, 23], count=False)
    assert backend.samples == 1
    # empty prepasses: bookkeeping, not a sample
    backend.initial_cost(prog)
    assert backend.samples == 1
    # nonempty prepasses actually compile
    backend.initial_cost(prog, prepasses=(31,))
    assert backend.samples == 2
    assert backend.features(prog, ()) is not None


def test_thread_safe_counter():
    backend = SyntheticBackend()
    prog = make_feature_corpus(1).programs[0]

    def worker():
        for _ in range(200):
            backend.evaluate(prog, (5,))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.samples == 1600


def _script(path, body):
    path.write_text("#!/bin/sh\n" + body)
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


@pytest.fixture
def toolchain(tmp_path):
    """Stub transform/cost commands: transform copies the input and
    logs the flags; cost prints 100 plus 10 per applied flag."""
    transform = _script(tmp_path / "transform.sh", """\
in="$1"; shift
out="$1"; shift
cp "$in" "$out"
echo "$#" >> "$out"
""")
    cost = _script(tmp_path / "cost.sh", """\
n=$(tail -n 1 "$1")
case "$n" in ''|*[!0-9]*) n=0;; esac
echo "cycles: $((100 + 10 * n))"
""")
    ir = tmp_path / "prog.ll"
    ir.write_text("define void @f() {\nentry:\n  ret void\n}\n0\n")
    program = IrProgram(name="prog", path=str(ir))
    backend = ExternalBackend(
        transform_cmd=f"{transform} {{input}} {{output}} {{passes}}",
        cost_cmd=f"{cost} {{input}}",
        workdir=str(tmp_path / "work"))
    return backend, program


def test_external_backend_runs_commands(toolchain):
    backend, program = toolchain
    assert backend.evaluate(program, (31, 23, 33)) == 130
    assert backend.evaluate(program, ()) == 100
    assert backend.samples == 2
    # empty cost is cached and uncounted
    assert backend.initial_cost(program) == 100
    assert backend.initial_cost(program) == 100
    assert backend.samples == 2


def test_external_backend_features_reuse_last_output(toolchain):
    backend, program = toolchain
    backend.evaluate(program, (31,))
    v = backend.features(program, (31,))
    assert v is not None and v[51] >= 1
    # the raw program parses too
    assert backend.features(program, ())[53] == 1


def test_external_backend_error_paths(tmp_path):
    boom = _script(tmp_path / "boom.sh",
                   'echo "it broke" >&2\nexit 1\n')
    ok = _script(tmp_path / "ok.sh", 'echo 42\n')
    ir = tmp_path / "p.ll"
    ir.write_text("define void @f() {\nentry:\n  ret void\n}\n")
    prog = IrProgram(name="p", path=str(ir))

    backend = ExternalBackend(f"{boom} {{input}} {{output}} {{passes}}",
                              f"{ok} {{input}}",
                              workdir=str(tmp_path / "w1"))
    with pytest.raises(CommandFailed) as exc:
        backend.evaluate(prog, (31,))
    assert "it broke" in exc.value.stderr

    noint = _script(tmp_path / "noint.sh", 'echo "no numbers here"\n')
    copy = _script(tmp_path / "copy.sh", 'cp "$1" "$2"\n')
    backend = ExternalBackend(f"{copy} {{input}} {{output}} {{passes}}",
                              f"{noint} {{input}}",
                              workdir=str(tmp_path / "w2"))
    with pytest.raises(CostParseError):
        backend.evaluate(prog, (31,))

    with pytest.raises(CommandFailed, match="cannot run"):
        ExternalBackend("/nonexistent {input} {output} {passes}",
                        f"{ok} {{input}}",
                        workdir=str(tmp_path / "w3")).evaluate(prog, (31,))


def test_external_backend_requires_passes_placeholder(tmp_path):
    with pytest.raises(BackendError, match="passes"):
        ExternalBackend("cp {input} {output}", "wc -l {input}",
                        workdir=str(tmp_path))


def test_external_backend_timeout(tmp_path):
    slow = _script(tmp_path / "slow.sh", "sleep 5\n")
    copy = _script(tmp_path / "copy.sh", 'cp "$1" "$2"\n')
    ir = tmp_path / "p.ll"
    ir.write_text("define void @f() {\nentry:\n  ret void\n}\n")
    prog = IrProgram(name="p", path=str(ir))
    backend = ExternalBackend(f"{copy} {{input}} {{output}} {{passes}}",
                              f"{slow} {{input}}", timeout_s=0.2,
                              workdir=str(tmp_path / "w"))
    with pytest.raises(BackendTimeout):
        backend.evaluate(prog, (31,))


def test_cost_parse_takes_last_integer(tmp_path):
    chatty = _script(tmp_path / "chatty.sh",
                     'echo "pass 1 of 3 done"\necho "total cycles = 777"\n')
    copy = _script(tmp_path / "copy.sh", 'cp "$1" "$2"\n')
    ir = tmp_path / "p.ll"
    ir.write_text("define void @f() {\nentry:\n  ret void\n}\n")
    prog = IrProgram(name="p", path=str(ir))
    backend = ExternalBackend(f"{copy} {{input}} {{output}} {{passes}}",
                              f"{chatty} {{input}}",
                              workdir=str(tmp_path / "w"))
    assert backend.evaluate(prog, (31,)) == 777
