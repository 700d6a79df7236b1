"""Compiler phase-ordering autotuner.

Search and reinforcement-learning engines over an episodic
pass-sequencing environment, plus random-forest analysis of which
program features drive which passes.
"""

__version__ = "0.1.0"

LOG_SCHEMA_VERSION = 1
