"""Synthetic labelled contracts.

Positives carry a planted SL -> SO -> SS chain for the requested class on
consecutive control-flow nodes; negatives carry decoys that use some of the
same opcodes without ever completing a chain (lone loads, reversed order,
stages too far apart, or a chain for a different class).  Filler blocks are
pattern-free for every default table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .avp import DEFAULT_SL, DEFAULT_SO, DEFAULT_SS, VulnClass, default_tables, triage_contract
from .cfg import build_cfg
from .disasm import BY_MNEMONIC, ContractBytecode

# no member of any default SL/SO/SS set
FILLER_OPS = (
    "CALLDATASIZE", "CALLDATALOAD", "CALLER", "ADDRESS", "SLOAD", "MLOAD", "KECCAK256",
    "SHL", "SHR", "MOD", "EXP", "GAS", "NUMBER", "CODESIZE", "RETURNDATASIZE", "BYTE",
    "SLT", "SGT", "DUP1", "DUP2", "SWAP1", "POP", "SELFBALANCE", "CHAINID", "MSIZE",
)  # fmt: skip

_DECOYS = ("sl_only", "no_sl", "reversed", "split", "other_class")


@dataclass
class SampleRecord:
    id: str
    bytecode: ContractBytecode
    label: int
    vuln_class: VulnClass
    teacher: np.ndarray | None = None


@dataclass(frozen=True)
class SynthConfig:
    n_pos: int = 400
    n_neg: int = 400
    vuln_class: VulnClass = VulnClass.REENTRANCY
    noise_blocks: int = 8
    seed: int = 42
    teacher_dim: int = 32
    teacher_spread: float = 1.0

    def __post_init__(self):
        if self.n_pos < 0 or self.n_neg < 0 or self.noise_blocks < 0:
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "vuln_class", VulnClass.parse(self.vuln_class))


@dataclass
class _Block:
    body: list = field(default_factory=list)  # mnemonics or ("PUSH", value)
    end: tuple = ()  # (), ("jump", idx), ("jumpi", idx), ("halt", mnemonic)


def _assemble(blocks: list[_Block]) -> bytes:
    """Lay blocks out in order; every block but the first opens with JUMPDEST."""

    def size(b: _Block, first: bool) -> int:
        n = 0 if first else 1
        for item in b.body:
            n += 2 if isinstance(item, tuple) else 1
        kind = b.end[0] if b.end else None
        if kind == "jump":
            n += 4
        elif kind == "jumpi":
            n += 5
        elif kind == "halt":
            n += 1 if b.end[1] == "STOP" else 4
        return n

    offsets, pc = [], 0
    for i, b in enumerate(blocks):
        offsets.append(pc)
        pc += size(b, i == 0)

    out = bytearray()

    def op(name: str):
        out.append(BY_MNEMONIC[name].byte_value)

    for i, b in enumerate(blocks):
        if i:
            op("JUMPDEST")
        for item in b.body:
            if isinstance(item, tuple):
                out += bytes([0x60, item[1] & 0xFF])
            else:
                op(item)
        kind = b.end[0] if b.end else None
        if kind in ("jump", "jumpi"):
            if kind == "jumpi":
                op("CALLDATASIZE")
            out += bytes([0x61]) + offsets[b.end[1]].to_bytes(2, "big")
            op("JUMP" if kind == "jump" else "JUMPI")
        elif kind == "halt":
            if b.end[1] != "STOP":
                out += bytes([0x60, 0x00, 0x80])  # PUSH1 0, DUP1
            op(b.end[1])
    return bytes(out)


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def filler(self, lo: int = 2, hi: int = 6) -> list:
        rng = self.rng
        body = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            if rng.random() < 0.3:
                body.append(("PUSH", int(rng.integers(0, 256))))
            else:
                body.append(FILLER_OPS[int(rng.integers(len(FILLER_OPS)))])
        return body

    def with_op(self, *ops: str) -> list:
        """Filler with the given opcodes inserted in order."""
        body = self.filler(1, 4)
        positions = sorted(int(self.rng.integers(0, len(body) + 1)) for _ in ops)
        for k, (pos, name) in enumerate(zip(positions, ops)):
            body.insert(pos + k, name)
        return body

    def pick(self, pool) -> str:
        items = sorted(pool)
        return items[int(self.rng.integers(len(items)))]


def _segments(kind: str, b: _Builder, cls: VulnClass, noise_blocks: int) -> list[list]:
    """Block bodies that must sit on consecutive main-path nodes."""
    sl = lambda: b.pick(DEFAULT_SL[cls])  # noqa: E731
    so = lambda: b.pick(DEFAULT_SO)  # noqa: E731
    ss = lambda: b.pick(DEFAULT_SS)  # noqa: E731
    if kind == "chain3":
        return [b.with_op(sl()), b.with_op(so()), b.with_op(ss())]
    if kind == "chain_sl_so":
        return [b.with_op(sl(), so()), b.with_op(ss())]
    if kind == "chain_so_ss":
        return [b.with_op(sl()), b.with_op(so(), ss())]
    if kind == "sl_only":
        return [b.with_op(sl())]
    if kind == "no_sl":
        return [b.with_op(so()), b.with_op(ss())]
    if kind == "reversed":
        return [b.with_op(ss()), b.with_op(so()), b.with_op(sl())]
    if kind == "split":
        gap = [b.filler() for _ in range(3)]
        return [b.with_op(sl()), b.with_op(so())] + gap + [b.with_op(ss())]
    if kind == "other_class":
        other = [c for c in VulnClass if c is not cls and not (DEFAULT_SL[c] & DEFAULT_SL[cls])]
        oc = other[int(b.rng.integers(len(other)))]
        return [b.with_op(b.pick(DEFAULT_SL[oc])), b.with_op(so()), b.with_op(ss())]
    raise ValueError(kind)


def _contract(b: _Builder, cls: VulnClass, positive: bool, noise_blocks: int) -> bytes:
    rng = b.rng
    if positive:
        kind = ("chain3", "chain_sl_so", "chain_so_ss")[int(rng.integers(3))]
    else:
        kind = _DECOYS[int(rng.integers(len(_DECOYS)))]
    planted = _segments(kind, b, cls, noise_blocks)

    n_side = int(rng.integers(0, noise_blocks // 3 + 1)) if noise_blocks else 0
    n_main = noise_blocks - n_side
    cut = int(rng.integers(0, n_main + 1))
    main_bodies = [b.filler() for _ in range(cut)] + planted
    main_bodies += [b.filler() for _ in range(n_main - cut)]
    main_bodies = [b.filler(1, 3)] + main_bodies  # entry block

    main = [_Block(body) for body in main_bodies]
    side_at = sorted(
        int(x) for x in rng.choice(len(main), size=min(n_side, len(main)), replace=False)
    )
    blocks = list(main)
    for i, blk in enumerate(main):
        nxt = i + 1 if i + 1 < len(main) else None
        if nxt is None:
            blk.end = ("halt", "STOP" if rng.random() < 0.5 else "RETURN")
        elif i in side_at:
            side = _Block(b.filler(), ("halt", "REVERT"))
            blocks.append(side)
            blk.end = ("jumpi", len(blocks) - 1)
        elif rng.random() < 0.5:
            blk.end = ("jump", nxt)
    return _assemble(blocks)


def synth_dataset(config: SynthConfig = SynthConfig()) -> list[SampleRecord]:
    cls = config.vuln_class
    rng = np.random.default_rng(config.seed)
    builder = _Builder(rng)
    table = default_tables()[cls]

    teacher_rng = np.random.default_rng([config.seed, 7])
    centers = teacher_rng.normal(0.0, 1.0, size=(2, config.teacher_dim))

    labels = [1] * config.n_pos + [0] * config.n_neg
    records = []
    for i, label in enumerate(labels):
        raw = _contract(builder, cls, bool(label), config.noise_blocks)
        found = bool(triage_contract(build_cfg(raw), {cls: table}))
        if found != bool(label):
            raise RuntimeError(f"synthetic sample {i} violates its planted label")
        teacher = centers[label] + config.teacher_spread * teacher_rng.normal(
            size=config.teacher_dim
        )
        tag = "pos" if label else "neg"
        rid = f"{cls.value}_{tag}_{i:05d}"
        records.append(SampleRecord(rid, ContractBytecode(raw, rid), label, cls, teacher))
    return records
