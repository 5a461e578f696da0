"""Abstract vulnerability patterns and the node scoring mechanism.

A pattern table splits mnemonics into three stages: state loading (SL),
state operation (SO) and state storage (SS).  A node chain matches when the
instructions met along the chain contain SL, SO and SS in that order.  Every
node of a matched chain is scored ``xi``; all other nodes get ``nu``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cfg import Cfg
from .disasm import MNEMONICS, Instruction
from .kernels import MATCHED, chain_match_mask

SL, SO, SS = "SL", "SO", "SS"
_STAGE = {SL: 0, SO: 1, SS: 2}


class VulnClass(str, Enum):
    REENTRANCY = "reentrancy"
    TIMESTAMP = "timestamp"
    TXORIGIN = "txorigin"
    DELEGATECALL = "delegatecall"

    @classmethod
    def parse(cls, text: str | VulnClass) -> VulnClass:
        if isinstance(text, VulnClass):
            return text
        key = text.strip().lower().replace(".", "").replace("_", "").replace("-", "")
        aliases = {"tx": "txorigin", "origin": "txorigin", "reentry": "reentrancy"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown vulnerability class {text!r}; expected one of "
                + ", ".join(c.value for c in cls)
            ) from None


@dataclass(frozen=True)
class PatternTable:
    vuln_class: VulnClass
    sl: frozenset[str]
    so: frozenset[str]
    ss: frozenset[str]

    def __post_init__(self):
        for name, s in ((SL, self.sl), (SO, self.so), (SS, self.ss)):
            if not s:
                raise ValueError(f"{self.vuln_class.value}: {name} set is empty")
            unknown = set(s) - MNEMONICS
            if unknown:
                raise ValueError(f"{self.vuln_class.value}: unknown mnemonics {sorted(unknown)}")
        if self.sl & self.so or self.sl & self.ss or self.so & self.ss:
            raise ValueError(f"{self.vuln_class.value}: SL/SO/SS sets overlap")

    def tag(self, mnemonic: str) -> str | None:
        if mnemonic in self.sl:
            return SL
        if mnemonic in self.so:
            return SO
        if mnemonic in self.ss:
            return SS
        return None

    def to_dict(self) -> dict:
        return {SL: sorted(self.sl), SO: sorted(self.so), SS: sorted(self.ss)}


DEFAULT_SO = frozenset(
    {"ADD", "SUB", "MUL", "DIV", "LT", "GT", "EQ", "ISZERO", "AND", "OR", "XOR", "NOT"}
)
DEFAULT_SS = frozenset({"SSTORE", "MSTORE", "MSTORE8"})
DEFAULT_SL = {
    VulnClass.REENTRANCY: frozenset({"CALLVALUE", "CALL"}),
    VulnClass.TIMESTAMP: frozenset({"TIMESTAMP"}),
    VulnClass.TXORIGIN: frozenset({"ORIGIN"}),
    VulnClass.DELEGATECALL: frozenset({"DELEGATECALL"}),
}


def default_tables() -> dict[VulnClass, PatternTable]:
    return {c: PatternTable(c, DEFAULT_SL[c], DEFAULT_SO, DEFAULT_SS) for c in VulnClass}


def load_tables(path: str | Path) -> dict[VulnClass, PatternTable]:
    """Read pattern tables from JSON; classes not listed keep their defaults.

    Format: ``{"reentrancy": {"SL": [...], "SO": [...], "SS": [...]}, ...}``.
    Missing stage keys fall back to the default set for that stage.
    """
    data = json.loads(Path(path).read_text())
    return tables_from_mapping(data)


def tables_from_mapping(data: Mapping) -> dict[VulnClass, PatternTable]:
    tables = default_tables()
    for key, entry in data.items():
        c = VulnClass.parse(key)
        base = tables[c]
        tables[c] = PatternTable(
            c,
            frozenset(m.upper() for m in entry.get(SL, base.sl)),
            frozenset(m.upper() for m in entry.get(SO, base.so)),
            frozenset(m.upper() for m in entry.get(SS, base.ss)),
        )
    return tables


@dataclass(frozen=True)
class ScoreConfig:
    xi: float = 1.0
    nu: float = 0.0
    l: int = 2
    feature_dim: int = 64

    def __post_init__(self):
        if not (0.5 < self.xi <= 1.0):
            raise ValueError(f"xi must lie in (0.5, 1], got {self.xi}")
        if not (0.0 <= self.nu < 0.5):
            raise ValueError(f"nu must lie in [0, 0.5), got {self.nu}")
        if not (1 <= self.l <= 5):
            raise ValueError(f"chain depth l must be in 1..5, got {self.l}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")


@dataclass
class NodeScores:
    scores: np.ndarray  # (n,)
    features: np.ndarray  # (n, D)
    matched: np.ndarray  # (n,) bool


def classify_instruction(instr: Instruction | str, table: PatternTable) -> frozenset[str]:
    m = instr if isinstance(instr, str) else instr.mnemonic
    tag = table.tag(m)
    return frozenset() if tag is None else frozenset({tag})


def _advance(state: int, mnemonics: Iterable[str], table: PatternTable) -> int:
    for m in mnemonics:
        if state == MATCHED:
            break
        tag = table.tag(m)
        if tag is not None and _STAGE[tag] == state:
            state += 1
    return state


def node_transitions(cfg: Cfg, table: PatternTable) -> np.ndarray:
    """(n, 4) automaton table: state after each node, per entry state."""
    trans = np.empty((cfg.n, MATCHED + 1), dtype=np.int64)
    for b in cfg.blocks:
        ms = b.mnemonics
        for s in range(MATCHED + 1):
            trans[b.index, s] = _advance(s, ms, table)
    return trans


def _csr(cfg: Cfg) -> tuple[np.ndarray, np.ndarray]:
    succ = cfg.successors()
    indptr = np.zeros(cfg.n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(s) for s in succ])
    indices = np.array([j for s in succ for j in s], dtype=np.int64)
    return indptr, indices


def enumerate_chains(cfg: Cfg, root: int, l: int) -> list[list[int]]:
    """Maximal simple DFS descents from ``root`` with at most ``l`` edges."""
    if not 1 <= l <= 5:
        raise ValueError(f"chain depth l must be in 1..5, got {l}")
    succ = cfg.successors()
    chains: list[list[int]] = []

    def descend(path: list[int]):
        extended = False
        if len(path) <= l:
            for nxt in succ[path[-1]]:
                if nxt not in path:
                    extended = True
                    descend(path + [nxt])
        if not extended:
            chains.append(path)

    descend([root])
    return chains


def match_chain(chain: Sequence[int], cfg: Cfg, table: PatternTable) -> bool:
    state = 0
    for v in chain:
        state = _advance(state, cfg.blocks[v].mnemonics, table)
    return state == MATCHED


def matched_mask(cfg: Cfg, table: PatternTable, l: int) -> np.ndarray:
    if cfg.n == 0:
        return np.zeros(0, dtype=bool)
    indptr, indices = _csr(cfg)
    return chain_match_mask(indptr, indices, node_transitions(cfg, table), l)


def score_nodes(cfg: Cfg, table: PatternTable, config: ScoreConfig = ScoreConfig()) -> NodeScores:
    mask = matched_mask(cfg, table, config.l)
    scores = np.where(mask, config.xi, config.nu).astype(np.float64)
    features = np.repeat(scores[:, None], config.feature_dim, axis=1)
    return NodeScores(scores, features, mask)


def matched_chains(cfg: Cfg, table: PatternTable, l: int) -> list[list[int]]:
    """All matched chains from every root, for reporting."""
    out = []
    for root in range(cfg.n):
        out.extend(c for c in enumerate_chains(cfg, root, l) if match_chain(c, cfg, table))
    return out


def triage_contract(
    cfg: Cfg,
    tables: Mapping[VulnClass, PatternTable] | None = None,
    l: int = 2,
) -> set[VulnClass]:
    tables = default_tables() if tables is None else tables
    return {c for c, t in tables.items() if matched_mask(cfg, t, l).any()}
