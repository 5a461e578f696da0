"""Vulnerability indicators for raw EVM bytecode.

Pipeline: disassembly, CFG recovery, abstract-vulnerability-pattern node
scoring, and a two-stage student network distilled from source-code
features.
"""

__version__ = "0.1.0"
