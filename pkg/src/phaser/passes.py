"""Transform pass registry.

The table below is the action space: 46 pass flags with stable integer
ids. It is reproduced verbatim from the tuning harness this package
replays, including its warts: id 19 and id 40 are both -functionattrs,
and id 45 (-terminate) is not a real LLVM pass. Ids must never be
renumbered; episode logs and analysis matrices index by them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PASS_TABLE = (
    "-correlated-propagation",  # 0
    "-scalarrepl",              # 1
    "-lowerinvoke",             # 2
    "-strip",                   # 3
    "-strip-nondebug",          # 4
    "-sccp",                    # 5
    "-globalopt",               # 6
    "-gvn",                     # 7
    "-jump-threading",          # 8
    "-globaldce",               # 9
    "-loop-unswitch",           # 10
    "-scalarrepl-ssa",          # 11
    "-loop-reduce",             # 12
    "-break-crit-edges",        # 13
    "-loop-deletion",           # 14
    "-reassociate",             # 15
    "-lcssa",                   # 16
    "-codegenprepare",          # 17
    "-memcpyopt",               # 18
    "-functionattrs",           # 19
    "-loop-idiom",              # 20
    "-lowerswitch",             # 21
    "-constmerge",              # 22
    "-loop-rotate",             # 23
    "-partial-inliner",         # 24
    "-inline",                  # 25
    "-early-cse",               # 26
    "-indvars",                 # 27
    "-adce",                    # 28
    "-loop-simplify",           # 29
    "-instcombine",             # 30
    "-simplifycfg",             # 31
    "-dse",                     # 32
    "-loop-unroll",             # 33
    "-lower-expect",            # 34
    "-tailcallelim",            # 35
    "-licm",                    # 36
    "-sink",                    # 37
    "-mem2reg",                 # 38
    "-prune-eh",                # 39
    "-functionattrs",           # 40 (duplicate of 19, kept as-is)
    "-ipsccp",                  # 41
    "-deadargelim",             # 42
    "-sroa",                    # 43
    "-loweratomic",             # 44
    "-terminate",               # 45 (not a real pass; excluded from
                                #     external runs by default)
)

N_PASSES = len(PASS_TABLE)

# Default action set for external (command-driven) backends: everything
# except the placeholder id 45.
DEFAULT_EXTERNAL_IDS = tuple(i for i in range(N_PASSES) if i != 45)


@dataclass(frozen=True)
class PassRegistry:
    """An ordered set of enabled pass ids defining an action space.

    Actions in the environment are indices into `ids`; `ids[action]`
    is the stable registry id used in logs and analysis output.
    """

    ids: tuple = field(default_factory=lambda: tuple(range(N_PASSES)))

    def __post_init__(self):
        seen = set()
        for i in self.ids:
            if not 0 <= i < N_PASSES:
                raise ValueError(f"pass id {i} out of range [0, {N_PASSES})")
            if i in seen:
                raise ValueError(f"pass id {i} enabled twice")
            seen.add(i)
        if not self.ids:
            raise ValueError("registry must enable at least one pass")

    def __len__(self):
        return len(self.ids)

    def name(self, pass_id):
        return PASS_TABLE[pass_id]

    def names(self):
        return [PASS_TABLE[i] for i in self.ids]

    def flags(self, sequence):
        """Render a sequence of registry ids as a command-line string,
        e.g. [31, 23, 33] -> '-simplifycfg -loop-rotate -loop-unroll'."""
        return " ".join(PASS_TABLE[i] for i in sequence)

    def index_of(self, pass_id):
        """Action index of a registry id within this action space."""
        try:
            return self.ids.index(pass_id)
        except ValueError:
            raise ValueError(f"pass id {pass_id} not enabled") from None


FULL_REGISTRY = PassRegistry()
