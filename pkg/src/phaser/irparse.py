"""Line-oriented parser for a subset of LLVM textual IR.

The subset covers what the feature extractor needs: define/declare
headers, labeled basic blocks, one instruction per line, and the
terminator forms ret / br / switch / unreachable. Everything else
inside a function body is kept as an opaque instruction with its
opcode token, so real-world .ll files degrade gracefully instead of
failing. Unknown top-level lines (globals, metadata, attributes,
type definitions) are skipped.

The exact grammar and its deliberate deviations from full LLVM are
documented in docs/ir_grammar.md. Structural rules enforced here:

- a label immediately followed by another label, '}' or EOF is an
  error (empty or unterminated block);
- a block whose last instruction is not a recognized terminator falls
  through to the next block; the final block of a function may end
  without a terminator;
- branch targets must name labels that exist in the function.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ParseError

TERMINATORS = frozenset({"ret", "br", "switch", "unreachable"})

BINARY_OPS = frozenset({
    "add", "fadd", "sub", "fsub", "mul", "fmul",
    "udiv", "sdiv", "fdiv", "urem", "srem", "frem",
    "shl", "lshr", "ashr", "and", "or", "xor",
})

# Casts plus single-operand arithmetic.
UNARY_OPS = frozenset({
    "trunc", "zext", "sext", "fptrunc", "fpext", "fptoui", "fptosi",
    "uitofp", "sitofp", "ptrtoint", "inttoptr", "bitcast",
    "addrspacecast", "fneg",
})

MEMORY_OPS = frozenset({
    "alloca", "load", "store", "getelementptr",
    "fence", "cmpxchg", "atomicrmw",
})

# Words that may sit between 'call' and the return type.
_CALL_ATTR_WORDS = frozenset({
    "tail", "musttail", "notail", "fastcc", "coldcc", "ccc", "cc",
    "zeroext", "signext", "inreg", "noundef", "nonnull", "noalias",
    "nocapture", "sret", "byval", "inalloca", "swiftcc", "spir_func",
})

_TOKEN_RE = re.compile(r'"[^"]*"|[^\s,()\[\]{}]+|[()\[\]{}]')
_LABEL_RE = re.compile(r"^([A-Za-z$._0-9][A-Za-z$._0-9-]*):(?:\s|$)")
_INT_TYPE_RE = re.compile(r"^i(\d+)$")
_INT_LIT_RE = re.compile(r"^-?\d+$")
_FLOAT_LIT_RE = re.compile(r"^-?\d+\.\d+(?:[eE][+-]?\d+)?$|^0x[0-9A-Fa-f]{8,16}$")
_NAME_RE = re.compile(r"@([A-Za-z$._0-9\"][^\s(]*)\(")


@dataclass
class Instruction:
    opcode: str
    line: int
    is_terminator: bool = False
    targets: tuple = ()          # branch/switch successor labels
    unconditional: bool = False  # br with a single target
    phi_args: int = 0
    int_consts: tuple = ()       # (bit_width, value) pairs; width 0 = unknown
    has_float_const: bool = False
    call_returns_int: bool = False


@dataclass
class Block:
    label: str
    instructions: list = field(default_factory=list)
    preds: set = field(default_factory=set)
    succs: set = field(default_factory=set)

    def phi_count(self):
        return sum(1 for ins in self.instructions if ins.opcode == "phi")

    def phi_args_total(self):
        return sum(ins.phi_args for ins in self.instructions if ins.opcode == "phi")

    def leading_phis(self):
        n = 0
        for ins in self.instructions:
            if ins.opcode != "phi":
                break
            n += 1
        return n


@dataclass
class Function:
    name: str
    is_external: bool
    blocks: list = field(default_factory=list)

    def edges(self):
        """Deduplicated CFG edge set as (src_label, dst_label) pairs."""
        out = set()
        for blk in self.blocks:
            for dst in blk.succs:
                out.add((blk.label, dst))
        return out


@dataclass
class IrModule:
    functions: list = field(default_factory=list)

    def instruction_count(self):
        return sum(len(b.instructions) for f in self.functions for b in f.blocks)

    def blocks(self):
        for f in self.functions:
            yield from f.blocks

    def instructions(self):
        for f in self.functions:
            for b in f.blocks:
                yield from b.instructions


def _strip_comment(line):
    """Drop a ';' comment, ignoring semicolons inside double quotes."""
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        elif ch == ";" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def _tokenize(text):
    return _TOKEN_RE.findall(text)


def _parse_instruction(text, lineno):
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty instruction", lineno)
    idx = 0
    if len(tokens) >= 3 and tokens[0].startswith("%") and tokens[1] == "=":
        idx = 2
    # 'tail call', 'musttail call' and so on normalize to 'call'.
    while idx < len(tokens) - 1 and tokens[idx] in ("tail", "musttail", "notail"):
        idx += 1
    if idx >= len(tokens):
        raise ParseError("instruction has no opcode", lineno)
    opcode = tokens[idx]
    rest = tokens[idx + 1:]

    ins = Instruction(opcode=opcode, line=lineno)
    ins.is_terminator = opcode in TERMINATORS

    if opcode in ("br", "switch"):
        targets = []
        for i, tok in enumerate(rest):
            if tok == "label" and i + 1 < len(rest) and rest[i + 1].startswith("%"):
                targets.append(rest[i + 1][1:])
        if not targets:
            col = text.find(opcode) + 1
            raise ParseError(f"cannot parse targets of '{opcode}'", lineno, col)
        ins.targets = tuple(targets)
        ins.unconditional = opcode == "br" and len(targets) == 1
    elif opcode == "phi":
        ins.phi_args = sum(1 for tok in rest if tok == "[")
        if ins.phi_args == 0:
            raise ParseError("phi with no incoming values", lineno)

    if opcode == "call":
        for tok in rest:
            if tok in _CALL_ATTR_WORDS:
                continue
            if tok.startswith("@") or tok.startswith("%"):
                break
            if _INT_TYPE_RE.match(tok):
                ins.call_returns_int = True
            break

    consts = []
    width = 0
    for i, tok in enumerate(rest):
        m = _INT_TYPE_RE.match(tok)
        if m:
            width = int(m.group(1))
            continue
        if tok in ("float", "double", "half", "fp128", "x86_fp80", "void", "label"):
            width = 0
            continue
        if _INT_LIT_RE.match(tok):
            if i + 1 < len(rest) and rest[i + 1] == "x":
                continue  # array type dimension, not an operand
            if i > 0 and rest[i - 1] in ("align", "addrspace"):
                continue
            consts.append((width, int(tok)))
        elif _FLOAT_LIT_RE.match(tok):
            ins.has_float_const = True
    ins.int_consts = tuple(consts)
    return ins


def _link_blocks(func, lineno_end):
    labels = {b.label for b in func.blocks}
    if len(labels) != len(func.blocks):
        seen = set()
        for b in func.blocks:
            if b.label in seen:
                raise ParseError(f"duplicate label '{b.label}'", lineno_end)
            seen.add(b.label)
    for i, blk in enumerate(func.blocks):
        if not blk.instructions:
            raise ParseError(f"empty basic block '{blk.label}'", lineno_end)
        last = blk.instructions[-1]
        if last.opcode in ("br", "switch"):
            for tgt in last.targets:
                if tgt not in labels:
                    raise ParseError(
                        f"unknown branch target '%{tgt}'", last.line)
                blk.succs.add(tgt)
        elif last.opcode in ("ret", "unreachable"):
            pass
        elif i + 1 < len(func.blocks):
            # No recognized terminator: fall through to the next block.
            blk.succs.add(func.blocks[i + 1].label)
        # The final block may end without a terminator.
    by_label = {b.label: b for b in func.blocks}
    for blk in func.blocks:
        for dst in blk.succs:
            by_label[dst].preds.add(blk.label)


def _function_name(text, lineno):
    m = _NAME_RE.search(text)
    if not m:
        raise ParseError("cannot find '@name(' in function header", lineno,
                         text.find("@") + 1 if "@" in text else 1)
    return m.group(1).strip('"')


def parse_module(text):
    """Parse IR text into an IrModule. Raises ParseError with the
    1-based line (and best-effort column) on malformed input."""
    lines = text.splitlines()
    module = IrModule()
    func = None
    block = None
    pending = None  # (lineno, text) of an instruction spanning lines
    func_line = 0

    for lineno, raw in enumerate(lines, start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue

        if pending is not None:
            pending = (pending[0], pending[1] + " " + line)
            if pending[1].count("[") <= pending[1].count("]"):
                block.instructions.append(
                    _parse_instruction(pending[1], pending[0]))
                pending = None
            continue

        if func is None:
            if line.startswith("define"):
                if not line.endswith("{"):
                    raise ParseError("expected '{' at end of define line",
                                     lineno, len(raw) + 1)
                func = Function(name=_function_name(line, lineno),
                                is_external=False)
                func_line = lineno
                block = None
            elif line.startswith("declare"):
                module.functions.append(
                    Function(name=_function_name(line, lineno),
                             is_external=True))
            # Any other top-level line (globals, metadata, attributes,
            # target/type declarations) is ignored.
            continue

        if line == "}":
            if block is None:
                raise ParseError("function has no basic blocks", lineno)
            _link_blocks(func, lineno)
            module.functions.append(func)
            func = None
            block = None
            continue

        m = _LABEL_RE.match(line)
        if m:
            if block is not None and not block.instructions:
                raise ParseError(f"empty basic block '{block.label}'", lineno)
            block = Block(label=m.group(1))
            func.blocks.append(block)
            continue

        if block is None:
            # Instructions before any label: implicit entry block.
            block = Block(label="entry")
            func.blocks.append(block)

        if line.startswith("switch") and line.count("[") > line.count("]"):
            pending = (lineno, line)
            continue
        block.instructions.append(_parse_instruction(line, lineno))

    if func is not None:
        raise ParseError(f"unterminated function '@{func.name}'", func_line)
    if pending is not None:
        raise ParseError("unterminated switch instruction", pending[0])
    return module
