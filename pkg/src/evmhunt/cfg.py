"""Basic-block partitioning and static jump-target resolution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .disasm import HALTING, ContractBytecode, Instruction, disassemble

TOP = None  # unknown stack cell


class TerminatorKind(str, Enum):
    FALLTHROUGH = "fallthrough"
    JUMP = "jump"
    JUMPI = "jumpi"
    HALT = "halt"
    INVALID = "invalid"


class UnresolvedReason(str, Enum):
    NOT_JUMPDEST = "not-jumpdest"
    UNKNOWN_TARGET = "unknown-target"


@dataclass(frozen=True)
class BasicBlock:
    index: int
    start_offset: int
    instructions: tuple[Instruction, ...]
    terminator_kind: TerminatorKind

    @property
    def is_jumpdest(self) -> bool:
        return self.instructions[0].mnemonic == "JUMPDEST"

    @property
    def mnemonics(self) -> list[str]:
        return [i.mnemonic for i in self.instructions]

    @property
    def falls_through(self) -> bool:
        return self.terminator_kind in (TerminatorKind.FALLTHROUGH, TerminatorKind.JUMPI)


@dataclass
class Cfg:
    blocks: list[BasicBlock]
    edges: set[tuple[int, int]] = field(default_factory=set)
    unresolved: list[tuple[int, UnresolvedReason]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.blocks)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def successors(self) -> list[list[int]]:
        succ: list[list[int]] = [[] for _ in self.blocks]
        for i, j in sorted(self.edges):
            succ[i].append(j)
        return succ

    def to_json(self) -> dict:
        return {
            "blocks": [
                {
                    "index": b.index,
                    "start_offset": b.start_offset,
                    "terminator": b.terminator_kind.value,
                    "instructions": [str(i) for i in b.instructions],
                }
                for b in self.blocks
            ],
            "edges": [list(e) for e in self.sorted_edges()],
            "unresolved": [[i, r.value] for i, r in self.unresolved],
        }

    def to_dot(self, name: str = "cfg") -> str:
        lines = [f"digraph {json.dumps(name)} {{", "  node [shape=box, fontname=monospace];"]
        for b in self.blocks:
            body = "\\l".join(str(i) for i in b.instructions) + "\\l"
            lines.append(f'  b{b.index} [label="B{b.index}\\n{body}"];')
        for i, j in self.sorted_edges():
            lines.append(f"  b{i} -> b{j};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _kind(last: Instruction) -> TerminatorKind:
    m = last.mnemonic
    if m == "JUMP":
        return TerminatorKind.JUMP
    if m == "JUMPI":
        return TerminatorKind.JUMPI
    if m == "INVALID":
        return TerminatorKind.INVALID
    if m in HALTING:
        return TerminatorKind.HALT
    return TerminatorKind.FALLTHROUGH


def split_blocks(seq: Sequence[Instruction]) -> list[BasicBlock]:
    blocks: list[BasicBlock] = []
    current: list[Instruction] = []

    def close():
        if current:
            blocks.append(
                BasicBlock(len(blocks), current[0].offset, tuple(current), _kind(current[-1]))
            )
            current.clear()

    for ins in seq:
        if ins.mnemonic == "JUMPDEST":
            close()
        current.append(ins)
        if ins.op.is_terminator or ins.op.is_branch:
            close()
    close()
    return blocks


# -- abstract stack ---------------------------------------------------------
# A state is a tuple of cells, top of stack last; cells below the tuple are
# unknown.  Each cell is an int constant or TOP.


def _join(a: tuple | None, b: tuple) -> tuple:
    if a is None:
        return b
    k = min(len(a), len(b))
    if k == 0:
        return ()
    tail_a, tail_b = a[len(a) - k :], b[len(b) - k :]
    return tuple(x if x == y else TOP for x, y in zip(tail_a, tail_b))


def _pop(stack: list):
    return stack.pop() if stack else TOP


def _step(stack: list, ins: Instruction, depth_cap: int) -> None:
    op = ins.op
    m = op.mnemonic
    if op.is_push:
        stack.append(ins.value)
    elif m.startswith("DUP"):
        k = op.pops
        stack.append(stack[-k] if len(stack) >= k else TOP)
    elif m.startswith("SWAP"):
        k = op.pops - 1
        while len(stack) < k + 1:
            # materialize unknown cells so the swap stays positional
            stack.insert(0, TOP)
        stack[-1], stack[-1 - k] = stack[-1 - k], stack[-1]
    else:
        for _ in range(op.pops):
            _pop(stack)
        stack.extend([TOP] * op.pushes)
    if len(stack) > depth_cap:
        del stack[: len(stack) - depth_cap]


def _simulate(block: BasicBlock, entry: tuple, depth_cap: int) -> tuple[tuple, object]:
    """Run a block; return (exit state, jump-target cell or TOP)."""
    stack = list(entry)
    target = TOP
    for ins in block.instructions:
        if ins.mnemonic in ("JUMP", "JUMPI"):
            target = stack[-1] if stack else TOP
        _step(stack, ins, depth_cap)
    return tuple(stack), target


def resolve_jump_targets(
    blocks: Sequence[BasicBlock],
    *,
    max_passes: int | None = None,
    depth_cap: int = 64,
) -> tuple[set[tuple[int, int]], list[tuple[int, UnresolvedReason]]]:
    """Constant-propagate PUSHed jump targets to a bounded fixpoint.

    Returns the resolved jump edges (taken side only) and the list of
    unresolved JUMP/JUMPI blocks.  Fallthrough edges are added by
    :func:`build_cfg`.
    """
    n = len(blocks)
    if n == 0:
        return set(), []
    if max_passes is None:
        max_passes = 4 * n
    by_offset = {b.start_offset: b.index for b in blocks}

    def jump_target(cell):
        if cell is TOP:
            return None
        j = by_offset.get(cell)
        return j if j is not None and blocks[j].is_jumpdest else None

    def successors(b: BasicBlock, cell) -> list[int]:
        out = []
        if b.terminator_kind in (TerminatorKind.JUMP, TerminatorKind.JUMPI):
            j = jump_target(cell)
            if j is not None:
                out.append(j)
        if b.falls_through and b.index + 1 < n:
            out.append(b.index + 1)
        return out

    entry: list[tuple | None] = [None] * n
    entry[0] = ()
    seeded = False
    for _ in range(max_passes):
        changed = False
        for b in blocks:
            state = entry[b.index]
            if state is None:
                continue
            out, cell = _simulate(b, state, depth_cap)
            for j in successors(b, cell):
                joined = _join(entry[j], out)
                if joined != entry[j]:
                    entry[j] = joined
                    changed = True
        if not changed:
            if seeded or all(s is not None for s in entry):
                break
            # blocks unreachable from the entry start from an unknown stack
            entry = [() if s is None else s for s in entry]
            seeded = True

    targets = [_simulate(b, entry[b.index] or (), depth_cap)[1] for b in blocks]

    edges: set[tuple[int, int]] = set()
    unresolved: list[tuple[int, UnresolvedReason]] = []
    for b in blocks:
        if b.terminator_kind not in (TerminatorKind.JUMP, TerminatorKind.JUMPI):
            continue
        cell = targets[b.index]
        j = jump_target(cell)
        if j is not None:
            edges.add((b.index, j))
        elif cell is TOP:
            unresolved.append((b.index, UnresolvedReason.UNKNOWN_TARGET))
        else:
            unresolved.append((b.index, UnresolvedReason.NOT_JUMPDEST))
    return edges, unresolved


def build_cfg(
    code: ContractBytecode | bytes | Sequence[Instruction],
    *,
    max_passes: int | None = None,
    depth_cap: int = 64,
) -> Cfg:
    if isinstance(code, (ContractBytecode, bytes, bytearray)):
        seq = disassemble(code)
    else:
        seq = list(code)
    blocks = split_blocks(seq)
    edges, unresolved = resolve_jump_targets(blocks, max_passes=max_passes, depth_cap=depth_cap)
    for b in blocks:
        if b.falls_through and b.index + 1 < len(blocks):
            edges.add((b.index, b.index + 1))
    return Cfg(blocks, edges, unresolved)
