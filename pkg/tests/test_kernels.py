"""Compiled kernels against their uncompiled Python bodies.

Under ``EVMHUNT_DISABLE_JIT=1`` both sides are the same function and the
comparisons hold trivially; the skip-gram test still compares the two
distinct bodies.
"""

import numpy as np
import pytest

from evmhunt import kernels
from evmhunt._jit import JIT_ENABLED, python_impl


def _twice(fn, *args):
    copies = [[a.copy() if isinstance(a, np.ndarray) else a for a in args] for _ in range(2)]
    return fn(*copies[0]), python_impl(fn)(*copies[1]), copies


def _random_csr(rng, n):
    succ = [sorted(set(rng.integers(0, n, size=int(rng.integers(0, 3))).tolist())) for _ in range(n)]
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(s) for s in succ])
    indices = np.array([j for s in succ for j in s], dtype=np.int64)
    return indptr, indices


def test_flag_is_exposed():
    assert isinstance(JIT_ENABLED, bool)


@pytest.mark.parametrize("seed", range(10))
def test_chain_mask_matches_python(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    indptr, indices = _random_csr(rng, n)
    trans = rng.integers(0, kernels.MATCHED + 1, size=(n, kernels.MATCHED + 1)).astype(np.int64)
    trans = np.maximum(trans, np.arange(kernels.MATCHED + 1))  # automaton never moves back
    for depth in (1, 2, 3):
        a, b, _ = _twice(kernels.chain_match_mask, indptr, indices, trans, depth)
        assert np.array_equal(a, b)


def test_lstm_kernels_match_python(rng):
    xw = rng.normal(size=(7, 12))
    wh = rng.normal(size=(3, 12))
    (hs, cs, gates), (hs2, cs2, gates2), _ = _twice(kernels.lstm_seq_forward, xw, wh)
    assert np.allclose(hs, hs2, rtol=1e-13, atol=1e-15) and np.allclose(gates, gates2, rtol=1e-13)
    dh = rng.normal(size=(7, 3))
    a, b, _ = _twice(kernels.lstm_seq_backward, dh, hs, cs, gates, np.ascontiguousarray(wh.T))
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_gat_kernels_match_python(rng):
    k, n, d = 2, 5, 3
    z = rng.normal(size=(k, n, d))
    s_src, s_dst = rng.normal(size=(k, n)), rng.normal(size=(k, n))
    pairs = sorted({(int(i), int(j)) for i, j in rng.integers(0, n, size=(8, 2))} | {(i, i) for i in range(n)},
                   key=lambda e: (e[1], e[0]))  # fmt: skip
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    fa, fb, _ = _twice(kernels.gat_attention_forward, z, s_src, s_dst, src, dst, n, 0.2)
    for x, y in zip(fa, fb):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-15)
    agg, alpha, raw = fa
    d_agg = rng.normal(size=agg.shape)
    ba, bb, _ = _twice(kernels.gat_attention_backward, d_agg, z, alpha, raw, src, dst, n, 0.2)
    for x, y in zip(ba, bb):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-14)


def _sgns_inputs(rng):
    vocab, dim = 9, 6
    tokens = rng.integers(0, vocab, size=120).astype(np.int64)
    starts = np.array([0, 30, 31, 80, 120], dtype=np.int64)
    counts = np.bincount(tokens, minlength=vocab) + 1.0
    cum = np.cumsum(counts**0.75)
    table = np.round(cum / cum[-1] * 2**31).astype(np.int64)
    syn0 = rng.uniform(-0.1, 0.1, size=(vocab, dim))
    return syn0, np.zeros_like(syn0), tokens, starts, table


def test_sgns_row_and_loop_bodies_agree(rng):
    syn0, syn1, tokens, starts, table = _sgns_inputs(rng)
    a0, a1 = syn0.copy(), syn1.copy()
    b0, b1 = syn0.copy(), syn1.copy()
    python_impl(kernels._sgns_loops)(a0, a1, tokens, starts, table, 3, 4, 3, 0.05, 17)
    kernels._sgns_rows(b0, b1, tokens, starts, table, 3, 4, 3, 0.05, 17)
    assert not np.array_equal(a0, syn0)
    assert np.allclose(a0, b0, rtol=1e-10, atol=1e-12)
    assert np.allclose(a1, b1, rtol=1e-10, atol=1e-12)


def test_sgns_dispatch_is_deterministic(rng):
    syn0, syn1, tokens, starts, table = _sgns_inputs(rng)
    runs = []
    for _ in range(2):
        s0, s1 = syn0.copy(), syn1.copy()
        kernels.sgns_train(s0, s1, tokens, starts, table, 3, 4, 2, 0.05, 5)
        runs.append(s0)
    assert np.array_equal(runs[0], runs[1])
    ref0, ref1 = syn0.copy(), syn1.copy()
    kernels._sgns_rows(ref0, ref1, tokens, starts, table, 3, 4, 2, 0.05, 5)
    assert np.allclose(runs[0], ref0, rtol=1e-10, atol=1e-12)


def test_lcg_matches_integer_arithmetic():
    state = 12345
    for _ in range(50):
        nxt = (state * 25214903917 + 11) % 2**48  # java.util.Random constants
        assert kernels._lcg(state) == nxt
        state = nxt
