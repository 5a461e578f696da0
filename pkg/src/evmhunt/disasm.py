"""EVM bytecode decoding."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

# byte -> (mnemonic, stack pops, stack pushes); Cancun instruction set.
_BASE_OPCODES: dict[int, tuple[str, int, int]] = {
    0x00: ("STOP", 0, 0),
    0x01: ("ADD", 2, 1),
    0x02: ("MUL", 2, 1),
    0x03: ("SUB", 2, 1),
    0x04: ("DIV", 2, 1),
    0x05: ("SDIV", 2, 1),
    0x06: ("MOD", 2, 1),
    0x07: ("SMOD", 2, 1),
    0x08: ("ADDMOD", 3, 1),
    0x09: ("MULMOD", 3, 1),
    0x0A: ("EXP", 2, 1),
    0x0B: ("SIGNEXTEND", 2, 1),
    0x10: ("LT", 2, 1),
    0x11: ("GT", 2, 1),
    0x12: ("SLT", 2, 1),
    0x13: ("SGT", 2, 1),
    0x14: ("EQ", 2, 1),
    0x15: ("ISZERO", 1, 1),
    0x16: ("AND", 2, 1),
    0x17: ("OR", 2, 1),
    0x18: ("XOR", 2, 1),
    0x19: ("NOT", 1, 1),
    0x1A: ("BYTE", 2, 1),
    0x1B: ("SHL", 2, 1),
    0x1C: ("SHR", 2, 1),
    0x1D: ("SAR", 2, 1),
    0x20: ("KECCAK256", 2, 1),
    0x30: ("ADDRESS", 0, 1),
    0x31: ("BALANCE", 1, 1),
    0x32: ("ORIGIN", 0, 1),
    0x33: ("CALLER", 0, 1),
    0x34: ("CALLVALUE", 0, 1),
    0x35: ("CALLDATALOAD", 1, 1),
    0x36: ("CALLDATASIZE", 0, 1),
    0x37: ("CALLDATACOPY", 3, 0),
    0x38: ("CODESIZE", 0, 1),
    0x39: ("CODECOPY", 3, 0),
    0x3A: ("GASPRICE", 0, 1),
    0x3B: ("EXTCODESIZE", 1, 1),
    0x3C: ("EXTCODECOPY", 4, 0),
    0x3D: ("RETURNDATASIZE", 0, 1),
    0x3E: ("RETURNDATACOPY", 3, 0),
    0x3F: ("EXTCODEHASH", 1, 1),
    0x40: ("BLOCKHASH", 1, 1),
    0x41: ("COINBASE", 0, 1),
    0x42: ("TIMESTAMP", 0, 1),
    0x43: ("NUMBER", 0, 1),
    0x44: ("PREVRANDAO", 0, 1),
    0x45: ("GASLIMIT", 0, 1),
    0x46: ("CHAINID", 0, 1),
    0x47: ("SELFBALANCE", 0, 1),
    0x48: ("BASEFEE", 0, 1),
    0x49: ("BLOBHASH", 1, 1),
    0x4A: ("BLOBBASEFEE", 0, 1),
    0x50: ("POP", 1, 0),
    0x51: ("MLOAD", 1, 1),
    0x52: ("MSTORE", 2, 0),
    0x53: ("MSTORE8", 2, 0),
    0x54: ("SLOAD", 1, 1),
    0x55: ("SSTORE", 2, 0),
    0x56: ("JUMP", 1, 0),
    0x57: ("JUMPI", 2, 0),
    0x58: ("PC", 0, 1),
    0x59: ("MSIZE", 0, 1),
    0x5A: ("GAS", 0, 1),
    0x5B: ("JUMPDEST", 0, 0),
    0x5C: ("TLOAD", 1, 1),
    0x5D: ("TSTORE", 2, 0),
    0x5E: ("MCOPY", 3, 0),
    0x5F: ("PUSH0", 0, 1),
    0xF0: ("CREATE", 3, 1),
    0xF1: ("CALL", 7, 1),
    0xF2: ("CALLCODE", 7, 1),
    0xF3: ("RETURN", 2, 0),
    0xF4: ("DELEGATECALL", 6, 1),
    0xF5: ("CREATE2", 4, 1),
    0xFA: ("STATICCALL", 6, 1),
    0xFD: ("REVERT", 2, 0),
    0xFE: ("INVALID", 0, 0),
    0xFF: ("SELFDESTRUCT", 1, 0),
}

HALTING = frozenset({"STOP", "RETURN", "REVERT", "SELFDESTRUCT", "INVALID"})


class HexFormatError(ValueError):
    """Bytecode text could not be decoded as hex."""


@dataclass(frozen=True)
class OpcodeInfo:
    byte_value: int
    mnemonic: str
    immediate_len: int
    pops: int
    pushes: int

    @property
    def is_terminator(self) -> bool:
        return self.mnemonic in HALTING or self.mnemonic == "JUMP"

    @property
    def is_branch(self) -> bool:
        return self.mnemonic == "JUMPI"

    @property
    def is_push(self) -> bool:
        return 0x5F <= self.byte_value <= 0x7F


def _build_table() -> tuple[OpcodeInfo, ...]:
    table = []
    for b in range(256):
        if 0x60 <= b <= 0x7F:
            k = b - 0x5F
            table.append(OpcodeInfo(b, f"PUSH{k}", k, 0, 1))
        elif 0x80 <= b <= 0x8F:
            k = b - 0x7F
            table.append(OpcodeInfo(b, f"DUP{k}", 0, k, k + 1))
        elif 0x90 <= b <= 0x9F:
            k = b - 0x8F
            table.append(OpcodeInfo(b, f"SWAP{k}", 0, k + 1, k + 1))
        elif 0xA0 <= b <= 0xA4:
            k = b - 0xA0
            table.append(OpcodeInfo(b, f"LOG{k}", 0, k + 2, 0))
        elif b in _BASE_OPCODES:
            name, pops, pushes = _BASE_OPCODES[b]
            table.append(OpcodeInfo(b, name, 0, pops, pushes))
        else:
            table.append(OpcodeInfo(b, "INVALID", 0, 0, 0))
    return tuple(table)


OPCODES: tuple[OpcodeInfo, ...] = _build_table()
MNEMONICS: frozenset[str] = frozenset(op.mnemonic for op in OPCODES)
BY_MNEMONIC: dict[str, OpcodeInfo] = {}
for _op in OPCODES:
    # 0xFE is the designated INVALID; keep it over the undefined bytes
    if _op.mnemonic not in BY_MNEMONIC or _op.byte_value == 0xFE:
        BY_MNEMONIC[_op.mnemonic] = _op


def decode_opcode(byte_value: int) -> OpcodeInfo:
    if not 0 <= byte_value <= 255:
        raise ValueError(f"byte value out of range: {byte_value}")
    return OPCODES[byte_value]


@dataclass(frozen=True)
class Instruction:
    offset: int
    op: OpcodeInfo
    immediate: bytes = b""
    truncated: bool = False

    @property
    def mnemonic(self) -> str:
        return self.op.mnemonic

    @property
    def size(self) -> int:
        return 1 + self.op.immediate_len

    @property
    def value(self) -> int | None:
        """Integer pushed by a PUSH instruction, else None."""
        if not self.op.is_push:
            return None
        return int.from_bytes(self.immediate, "big")

    def __str__(self) -> str:
        text = f"{self.offset:04x}: {self.op.mnemonic}"
        if self.op.immediate_len:
            text += f" 0x{self.immediate.hex()}"
        return text


@dataclass(frozen=True)
class ContractBytecode:
    raw: bytes
    id: str = ""

    @classmethod
    def from_hex(cls, text: str, id: str = "") -> ContractBytecode:
        return cls(parse_hex(text), id)

    @classmethod
    def from_file(cls, path: str | Path, id: str | None = None) -> ContractBytecode:
        path = Path(path)
        try:
            raw = parse_hex(path.read_text())
        except HexFormatError as exc:
            raise HexFormatError(f"{path}: {exc}") from None
        return cls(raw, path.stem if id is None else id)


InstructionSeq = Sequence[Instruction]

_WS = re.compile(r"\s+")


def parse_hex(text: str) -> bytes:
    """Decode hex text with optional ``0x`` prefix; whitespace is ignored."""
    s = _WS.sub("", text)
    if s[:2] in ("0x", "0X"):
        s = s[2:]
    if len(s) % 2:
        raise HexFormatError("odd-length hex string")
    try:
        return bytes.fromhex(s)
    except ValueError:
        raise HexFormatError("non-hex characters in bytecode") from None


def disassemble(code: ContractBytecode | bytes) -> list[Instruction]:
    raw = code.raw if isinstance(code, ContractBytecode) else bytes(code)
    out = []
    pc = 0
    n = len(raw)
    while pc < n:
        op = OPCODES[raw[pc]]
        k = op.immediate_len
        imm = raw[pc + 1 : pc + 1 + k]
        truncated = len(imm) < k
        if truncated:
            imm = imm + bytes(k - len(imm))
        out.append(Instruction(pc, op, imm, truncated))
        pc += 1 + k
    return out


def assemble(seq: Iterable[Instruction]) -> bytes:
    """Re-serialize instructions: opcode byte followed by its immediate."""
    return b"".join(bytes([i.op.byte_value]) + i.immediate for i in seq)


def strip_trailing_metadata(code: ContractBytecode) -> ContractBytecode:
    """Drop a trailing Solidity CBOR metadata blob if one is present.

    Layout: ``<code> <cbor map, L bytes> <L as 2-byte big-endian>``.
    """
    raw = code.raw
    if len(raw) < 2:
        return code
    length = int.from_bytes(raw[-2:], "big")
    start = len(raw) - 2 - length
    if length == 0 or start < 0:
        return code
    if not 0xA0 <= raw[start] <= 0xBF:
        return code
    return ContractBytecode(raw[:start], code.id)
