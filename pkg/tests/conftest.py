import numpy as np
import pytest

from evmhunt.disasm import BY_MNEMONIC


def asm(*items) -> bytes:
    """Tiny assembler for hand-written programs.

    Items are mnemonics, or ``(mnemonic, value)`` pairs for PUSHn.
    """
    out = bytearray()
    for item in items:
        if isinstance(item, tuple):
            name, value = item
            op = BY_MNEMONIC[name]
            out.append(op.byte_value)
            out += int(value).to_bytes(op.immediate_len, "big")
        else:
            out.append(BY_MNEMONIC[item].byte_value)
    return bytes(out)


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Norm-relative error; ``floor`` bounds the denominator from below."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=float)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"C{num} {'PASS' if ok else 'FAIL'}  {detail}")
