"""Time each hot kernel compiled with numba against the numpy fallback.

The fallback is what runs under ``EVMHUNT_DISABLE_JIT=1``: the uncompiled
Python body for most kernels, and the row-vectorised body for skip-gram.
Compilation happens during a warm-up call and is not timed.

    python benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import time

import numpy as np

from evmhunt import kernels
from evmhunt._jit import JIT_ENABLED, python_impl


def _best(fn, make_args, repeat):
    best = float("inf")
    for _ in range(repeat):
        args = make_args()
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def _cases(rng):
    # skip-gram: a corpus about the size of the synthetic training set
    vocab, dim = 60, 64
    tokens = rng.integers(0, vocab, size=20_000).astype(np.int64)
    starts = np.arange(0, tokens.size + 1, 50, dtype=np.int64)
    counts = np.bincount(tokens, minlength=vocab) + 1.0
    cum = np.cumsum(counts**0.75)
    table = np.round(cum / cum[-1] * 2**31).astype(np.int64)
    syn0 = rng.uniform(-0.01, 0.01, size=(vocab, dim))
    sg_args = lambda: (syn0.copy(), np.zeros_like(syn0), tokens, starts, table, 5, 5, 1, 0.025, 1)  # noqa: E731

    # LSTM over a 40-block contract, hidden 64
    xw = rng.normal(size=(40, 256))
    wh = rng.normal(0, 0.1, size=(64, 256))
    hs, cs, gates = kernels.lstm_seq_forward(xw, wh)
    dh = rng.normal(size=(40, 64))
    wh_t = np.ascontiguousarray(wh.T)

    # GAT: 4 heads, 40 nodes, ~100 edges
    n, k, d = 40, 4, 16
    pairs = sorted({(int(i), int(j)) for i, j in rng.integers(0, n, size=(60, 2))} | {(i, i) for i in range(n)},
                   key=lambda e: (e[1], e[0]))  # fmt: skip
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    z = rng.normal(size=(k, n, d))
    s_src, s_dst = rng.normal(size=(k, n)), rng.normal(size=(k, n))
    agg, alpha, raw = kernels.gat_attention_forward(z, s_src, s_dst, src, dst, n, 0.2)
    d_agg = rng.normal(size=agg.shape)

    # chain matcher on a dense-ish 40-node graph, depth 3
    succ = [sorted(set(rng.integers(0, n, size=3).tolist())) for _ in range(n)]
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(s) for s in succ])
    indices = np.array([j for s in succ for j in s], dtype=np.int64)
    trans = np.maximum(rng.integers(0, 4, size=(n, 4)), np.arange(4)).astype(np.int64)

    return [
        ("sgns (20k tokens, 1 epoch)", kernels._sgns_loops, kernels._sgns_rows, sg_args),
        ("lstm forward", kernels.lstm_seq_forward, None, lambda: (xw, wh)),
        ("lstm backward", kernels.lstm_seq_backward, None, lambda: (dh, hs, cs, gates, wh_t)),
        ("gat forward", kernels.gat_attention_forward, None, lambda: (z, s_src, s_dst, src, dst, n, 0.2)),
        ("gat backward", kernels.gat_attention_backward, None,
         lambda: (d_agg, z, alpha, raw, src, dst, n, 0.2)),  # fmt: skip
        ("chain match mask", kernels.chain_match_mask, None, lambda: (indptr, indices, trans, 3)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not JIT_ENABLED:
        raise SystemExit("numba is disabled (EVMHUNT_DISABLE_JIT); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numba':>10s} {'fallback':>10s} {'speedup':>8s}")
    for name, jitted, fallback, make_args in _cases(rng):
        fallback = fallback or python_impl(jitted)
        jitted(*make_args())  # compile
        t_jit = _best(jitted, make_args, args.repeat)
        t_py = _best(fallback, make_args, args.repeat)
        print(f"{name:28s} {t_jit * 1e3:9.2f}ms {t_py * 1e3:9.2f}ms {t_py / t_jit:7.1f}x")


if __name__ == "__main__":
    main()
