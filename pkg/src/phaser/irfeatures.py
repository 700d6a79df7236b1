"""56-dimensional static feature vector over parsed IR modules.

Feature indices are stable API: episode logs, importance matrices and
the CSV headers all use them. Definitions that full LLVM leaves open
are pinned here and in docs/ir_grammar.md:

- index 18 counts deduplicated CFG edges (no call graph edges);
- indices 19/20 count integer literal operands whose inferred bit
  width is 32/64; indices 21/22 count literal 0/1 of any width;
- index 52 counts alloca/load/store/getelementptr/fence/cmpxchg/
  atomicrmw;
- index 55 counts casts plus single-operand arithmetic (fneg).
"""

from __future__ import annotations

import csv

import numpy as np

from .irparse import BINARY_OPS, MEMORY_OPS, UNARY_OPS, parse_module

FEATURE_NAMES = (
    "Number of BB where total args for phi nodes is gt 5",      # 0
    "Number of BB where total args for phi nodes is [1, 5]",    # 1
    "Number of BBs with 1 predecessor",                         # 2
    "Number of BBs with 1 predecessor and 1 successor",         # 3
    "Number of BBs with 1 predecessor and 2 successors",        # 4
    "Number of BBs with 1 successor",                           # 5
    "Number of BBs with 2 predecessors",                        # 6
    "Number of BBs with 2 predecessors and 1 successor",        # 7
    "Number of BBs with 2 predecessors and successors",         # 8
    "Number of BBs with 2 successors",                          # 9
    "Number of BBs with gt 2 predecessors",                     # 10
    "Number of BBs with Phi node count in range (0, 3]",        # 11
    "Number of BBs with more than 3 Phi nodes",                 # 12
    "Number of BB with no Phi nodes",                           # 13
    "Number of Phi-nodes at beginning of BB",                   # 14
    "Number of branches",                                       # 15
    "Number of calls that return an int",                       # 16
    "Number of critical edges",                                 # 17
    "Number of edges",                                          # 18
    "Number of occurrences of 32-bit integer constants",        # 19
    "Number of occurrences of 64-bit integer constants",        # 20
    "Number of occurrences of constant 0",                      # 21
    "Number of occurrences of constant 1",                      # 22
    "Number of unconditional branches",                         # 23
    "Number of binary operations with a constant operand",      # 24
    "Number of AShr insts",                                     # 25
    "Number of Add insts",                                      # 26
    "Number of Alloca insts",                                   # 27
    "Number of And insts",                                      # 28
    "Number of BB's with instructions between [15, 500]",       # 29
    "Number of BB's with less than 15 instructions",            # 30
    "Number of BitCast insts",                                  # 31
    "Number of Br insts",                                       # 32
    "Number of Call insts",                                     # 33
    "Number of GetElementPtr insts",                            # 34
    "Number of ICmp insts",                                     # 35
    "Number of LShr insts",                                     # 36
    "Number of Load insts",                                     # 37
    "Number of Mul insts",                                      # 38
    "Number of Or insts",                                       # 39
    "Number of PHI insts",                                      # 40
    "Number of Ret insts",                                      # 41
    "Number of SExt insts",                                     # 42
    "Number of Select insts",                                   # 43
    "Number of Shl insts",                                      # 44
    "Number of Store insts",                                    # 45
    "Number of Sub insts",                                      # 46
    "Number of Trunc insts",                                    # 47
    "Number of Xor insts",                                      # 48
    "Number of ZExt insts",                                     # 49
    "Number of basic blocks",                                   # 50
    "Number of instructions (of all types)",                    # 51
    "Number of memory instructions",                            # 52
    "Number of non-external functions",                         # 53
    "Total arguments to Phi nodes",                             # 54
    "Number of Unary operations",                               # 55
)

N_FEATURES = len(FEATURE_NAMES)

TOTAL_INSTRUCTIONS = 51  # index used by per-instruction normalization

_OPCODE_FEATURES = {
    "ashr": 25, "add": 26, "alloca": 27, "and": 28, "bitcast": 31,
    "br": 32, "call": 33, "getelementptr": 34, "icmp": 35, "lshr": 36,
    "load": 37, "mul": 38, "or": 39, "phi": 40, "ret": 41, "sext": 42,
    "select": 43, "shl": 44, "store": 45, "sub": 46, "trunc": 47,
    "xor": 48, "zext": 49,
}


def extract_features(module):
    """Feature vector (int64, length 56) of a parsed IrModule."""
    v = np.zeros(N_FEATURES, dtype=np.int64)

    for func in module.functions:
        if not func.is_external:
            v[53] += 1
        for blk in func.blocks:
            npred = len(blk.preds)
            nsucc = len(blk.succs)
            nphi = blk.phi_count()
            phi_args = blk.phi_args_total()
            ninst = len(blk.instructions)

            if phi_args > 5:
                v[0] += 1
            elif phi_args >= 1:
                v[1] += 1
            if npred == 1:
                v[2] += 1
                if nsucc == 1:
                    v[3] += 1
                if nsucc == 2:
                    v[4] += 1
            if nsucc == 1:
                v[5] += 1
            if npred == 2:
                v[6] += 1
                if nsucc == 1:
                    v[7] += 1
                if nsucc == 2:
                    v[8] += 1
            if nsucc == 2:
                v[9] += 1
            if npred > 2:
                v[10] += 1
            if 0 < nphi <= 3:
                v[11] += 1
            if nphi > 3:
                v[12] += 1
            if nphi == 0:
                v[13] += 1
            v[14] += blk.leading_phis()
            if 15 <= ninst <= 500:
                v[29] += 1
            if ninst < 15:
                v[30] += 1
            v[50] += 1
            v[54] += phi_args

            for ins in blk.instructions:
                v[51] += 1
                feat = _OPCODE_FEATURES.get(ins.opcode)
                if feat is not None:
                    v[feat] += 1
                if ins.opcode == "br":
                    v[15] += 1
                    if ins.unconditional:
                        v[23] += 1
                if ins.opcode == "call" and ins.call_returns_int:
                    v[16] += 1
                for width, value in ins.int_consts:
                    if width == 32:
                        v[19] += 1
                    if width == 64:
                        v[20] += 1
                    if value == 0:
                        v[21] += 1
                    if value == 1:
                        v[22] += 1
                if ins.opcode in BINARY_OPS and (
                        ins.int_consts or ins.has_float_const):
                    v[24] += 1
                if ins.opcode in MEMORY_OPS:
                    v[52] += 1
                if ins.opcode in UNARY_OPS:
                    v[55] += 1

        edges = func.edges()
        v[18] += len(edges)
        by_label = {b.label: b for b in func.blocks}
        for src, dst in edges:
            if len(by_label[src].succs) > 1 and len(by_label[dst].preds) > 1:
                v[17] += 1

    return v


def extract_features_from_text(text):
    return extract_features(parse_module(text))


def write_feature_csv(path, rows):
    """Write (name, vector) pairs as CSV with the canonical header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["program"] + list(FEATURE_NAMES))
        for name, vec in rows:
            writer.writerow([name] + [int(x) for x in vec])
