"""Hot numeric kernels.

Every function here is written in the subset of Python/numpy that numba's
nopython mode accepts, and is compiled through :func:`evmhunt._jit.njit`.
With ``EVMHUNT_DISABLE_JIT=1`` the same bodies run as plain numpy.  The
skip-gram trainer is the exception: its compiled form is written as scalar
loops, which would crawl in the interpreter, so the fallback is a separate
row-vectorised body.
"""

import numpy as np

from ._jit import JIT_ENABLED, njit

MATCHED = 3  # automaton state once SL, SO, SS have been seen in order


# -- node scoring -----------------------------------------------------------


@njit
def chain_match_mask(indptr, indices, trans, depth_limit):
    """Mark every node lying on a matched chain.

    ``indptr``/``indices`` is the CSR successor list.  ``trans[v, s]`` is the
    pattern automaton state after feeding node ``v``'s instructions starting
    in state ``s`` (0: nothing, 1: SL seen, 2: SL..SO seen, 3: matched).
    Chains are the maximal simple paths of at most ``depth_limit`` edges
    from each root.
    """
    n = indptr.shape[0] - 1
    mask = np.zeros(n, dtype=np.bool_)
    path = np.empty(depth_limit + 1, dtype=np.int64)
    ptr = np.empty(depth_limit + 1, dtype=np.int64)
    state = np.empty(depth_limit + 1, dtype=np.int64)
    had_child = np.zeros(depth_limit + 1, dtype=np.bool_)
    on_path = np.zeros(n, dtype=np.bool_)
    for root in range(n):
        depth = 0
        path[0] = root
        ptr[0] = indptr[root]
        state[0] = trans[root, 0]
        had_child[0] = False
        on_path[root] = True
        while depth >= 0:
            node = path[depth]
            extended = False
            if depth < depth_limit:
                while ptr[depth] < indptr[node + 1]:
                    nxt = indices[ptr[depth]]
                    ptr[depth] += 1
                    if not on_path[nxt]:
                        had_child[depth] = True
                        depth += 1
                        path[depth] = nxt
                        ptr[depth] = indptr[nxt]
                        state[depth] = trans[nxt, state[depth - 1]]
                        had_child[depth] = False
                        on_path[nxt] = True
                        extended = True
                        break
            if extended:
                continue
            if not had_child[depth] and state[depth] == MATCHED:
                for k in range(depth + 1):
                    mask[path[k]] = True
            on_path[node] = False
            depth -= 1
    return mask


# -- LSTM -------------------------------------------------------------------


@njit
def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@njit
def lstm_seq_forward(xw, wh):
    """Run one LSTM direction over a sequence.

    ``xw`` is the precomputed input term ``X @ Wx + b`` with shape (T, 4H);
    gate order is input, forget, output, candidate.  Returns hidden states
    (T+1, H) and cell states (T+1, H), both with the zero initial state in
    row 0, and the activated gates (T, 4H).
    """
    t_len = xw.shape[0]
    h_dim = wh.shape[0]
    hs = np.zeros((t_len + 1, h_dim))
    cs = np.zeros((t_len + 1, h_dim))
    gates = np.empty((t_len, 4 * h_dim))
    for t in range(t_len):
        z = xw[t] + np.dot(hs[t], wh)
        i = _sigmoid(z[:h_dim])
        f = _sigmoid(z[h_dim : 2 * h_dim])
        o = _sigmoid(z[2 * h_dim : 3 * h_dim])
        g = np.tanh(z[3 * h_dim :])
        c = f * cs[t] + i * g
        cs[t + 1] = c
        hs[t + 1] = o * np.tanh(c)
        gates[t, :h_dim] = i
        gates[t, h_dim : 2 * h_dim] = f
        gates[t, 2 * h_dim : 3 * h_dim] = o
        gates[t, 3 * h_dim :] = g
    return hs, cs, gates


@njit
def lstm_seq_backward(dh_out, hs, cs, gates, wh_t):
    """Backpropagate through :func:`lstm_seq_forward`.

    ``dh_out`` (T, H) is the loss gradient w.r.t. each emitted hidden state;
    ``wh_t`` is ``Wh.T`` made contiguous.  Returns the gradient w.r.t. the
    gate pre-activations (T, 4H); weight gradients follow by matmul.
    """
    t_len, h_dim = dh_out.shape
    dz_all = np.empty((t_len, 4 * h_dim))
    dh_next = np.zeros(h_dim)
    dc_next = np.zeros(h_dim)
    for t in range(t_len - 1, -1, -1):
        i = gates[t, :h_dim]
        f = gates[t, h_dim : 2 * h_dim]
        o = gates[t, 2 * h_dim : 3 * h_dim]
        g = gates[t, 3 * h_dim :]
        tc = np.tanh(cs[t + 1])
        dh = dh_out[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz_all[t, :h_dim] = dc * g * i * (1.0 - i)
        dz_all[t, h_dim : 2 * h_dim] = dc * cs[t] * f * (1.0 - f)
        dz_all[t, 2 * h_dim : 3 * h_dim] = dh * tc * o * (1.0 - o)
        dz_all[t, 3 * h_dim :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = np.dot(dz_all[t], wh_t)
    return dz_all


# -- graph attention ----------------------------------------------------------


@njit
def gat_attention_forward(z, s_src, s_dst, src, dst, n_nodes, slope):
    """Attention-weighted aggregation for every head.

    ``z`` (K, n, Dh) holds per-head projected node features, ``s_src`` and
    ``s_dst`` (K, n) the per-node attention logits for the source and
    target side.  Edges ``src[e] -> dst[e]`` must include self-loops.
    Returns the aggregated features (K, n, Dh), the attention weights
    (K, E) and the pre-LeakyReLU edge logits (K, E).
    """
    n_heads = z.shape[0]
    head_dim = z.shape[2]
    n_edges = src.shape[0]
    raw = np.empty((n_heads, n_edges))
    alpha = np.empty((n_heads, n_edges))
    agg = np.zeros((n_heads, n_nodes, head_dim))
    for k in range(n_heads):
        peak = np.full(n_nodes, -np.inf)
        for e in range(n_edges):
            r = s_src[k, src[e]] + s_dst[k, dst[e]]
            raw[k, e] = r
            a = r if r > 0.0 else slope * r
            alpha[k, e] = a
            if a > peak[dst[e]]:
                peak[dst[e]] = a
        denom = np.zeros(n_nodes)
        for e in range(n_edges):
            w = np.exp(alpha[k, e] - peak[dst[e]])
            alpha[k, e] = w
            denom[dst[e]] += w
        for e in range(n_edges):
            alpha[k, e] /= denom[dst[e]]
            agg[k, dst[e]] += alpha[k, e] * z[k, src[e]]
    return agg, alpha, raw


@njit
def gat_attention_backward(d_agg, z, alpha, raw, src, dst, n_nodes, slope):
    """Gradients of :func:`gat_attention_forward`.

    Returns d_z (K, n, Dh), d_s_src (K, n), d_s_dst (K, n).
    """
    n_heads = z.shape[0]
    n_edges = src.shape[0]
    d_z = np.zeros_like(z)
    d_s_src = np.zeros((n_heads, n_nodes))
    d_s_dst = np.zeros((n_heads, n_nodes))
    d_alpha = np.empty(n_edges)
    for k in range(n_heads):
        weighted = np.zeros(n_nodes)
        for e in range(n_edges):
            d_z[k, src[e]] += alpha[k, e] * d_agg[k, dst[e]]
            d_alpha[e] = np.dot(d_agg[k, dst[e]], z[k, src[e]])
            weighted[dst[e]] += alpha[k, e] * d_alpha[e]
        for e in range(n_edges):
            d_logit = alpha[k, e] * (d_alpha[e] - weighted[dst[e]])
            if raw[k, e] <= 0.0:
                d_logit *= slope
            d_s_src[k, src[e]] += d_logit
            d_s_dst[k, dst[e]] += d_logit
    return d_z, d_s_src, d_s_dst


# -- skip-gram with negative sampling ----------------------------------------

_LCG_MUL = 0x5DEECE66D
_LCG_ADD = 0xB
_LCG_MASK = (1 << 48) - 1


@njit
def _lcg(state):
    return (state * _LCG_MUL + _LCG_ADD) & _LCG_MASK


@njit
def _negative(state, cum_table, table_top):
    state = _lcg(state)
    draw = (state >> 17) % table_top
    return state, np.searchsorted(cum_table, draw, side="right")


@njit
def _sgns_loops(syn0, syn1, tokens, starts, cum_table, window, negatives, epochs, lr, seed):
    state = (seed ^ _LCG_MUL) & _LCG_MASK
    n_tokens = tokens.shape[0]
    n_seq = starts.shape[0] - 1
    table_top = cum_table[cum_table.shape[0] - 1]
    total = epochs * n_tokens
    done = 0
    dim = syn0.shape[1]
    work = np.empty(dim)
    for _ in range(epochs):
        for s in range(n_seq):
            lo = starts[s]
            hi = starts[s + 1]
            for pos in range(lo, hi):
                alpha = lr * max(1.0 - done / total, 1e-4)
                done += 1
                word = tokens[pos]
                state = _lcg(state)
                shrink = (state >> 16) % window
                left = max(lo, pos - window + shrink)
                right = min(hi, pos + window - shrink + 1)
                for cpos in range(left, right):
                    if cpos == pos:
                        continue
                    ctx = tokens[cpos]
                    for j in range(dim):
                        work[j] = 0.0
                    for d in range(negatives + 1):
                        if d == 0:
                            target = word
                            label = 1.0
                        else:
                            state, target = _negative(state, cum_table, table_top)
                            if target == word:
                                continue
                            label = 0.0
                        f = 0.0
                        for j in range(dim):
                            f += syn0[ctx, j] * syn1[target, j]
                        g = (label - 1.0 / (1.0 + np.exp(-f))) * alpha
                        for j in range(dim):
                            work[j] += g * syn1[target, j]
                            syn1[target, j] += g * syn0[ctx, j]
                    for j in range(dim):
                        syn0[ctx, j] += work[j]
    return syn0, syn1


def _sgns_rows(syn0, syn1, tokens, starts, cum_table, window, negatives, epochs, lr, seed):
    state = (seed ^ _LCG_MUL) & _LCG_MASK
    n_tokens = tokens.shape[0]
    table_top = int(cum_table[-1])
    total = epochs * n_tokens
    done = 0
    tokens = tokens.tolist()
    bounds = list(zip(starts[:-1].tolist(), starts[1:].tolist()))
    for _ in range(epochs):
        for lo, hi in bounds:
            for pos in range(lo, hi):
                alpha = lr * max(1.0 - done / total, 1e-4)
                done += 1
                word = tokens[pos]
                state = _lcg(state)
                shrink = (state >> 16) % window
                for cpos in range(max(lo, pos - window + shrink), min(hi, pos + window - shrink + 1)):
                    if cpos == pos:
                        continue
                    l1 = syn0[tokens[cpos]]
                    work = np.zeros_like(l1)
                    for d in range(negatives + 1):
                        if d == 0:
                            target, label = word, 1.0
                        else:
                            state, target = _negative(state, cum_table, table_top)
                            if target == word:
                                continue
                            label = 0.0
                        row = syn1[target]
                        g = (label - 1.0 / (1.0 + np.exp(-np.dot(l1, row)))) * alpha
                        work += g * row
                        row += g * l1
                    l1 += work
    return syn0, syn1


def sgns_train(syn0, syn1, tokens, starts, cum_table, window, negatives, epochs, lr, seed):
    """Skip-gram negative-sampling updates, in place on ``syn0``/``syn1``.

    ``tokens`` is the flattened corpus of vocabulary ids; sequence ``s``
    spans ``tokens[starts[s]:starts[s + 1]]`` and windows never cross
    sequence boundaries.  ``cum_table`` is the cumulative unigram^0.75
    distribution scaled to 2**31 for negative draws.  The learning rate
    decays linearly to ``lr * 1e-4``.  Randomness comes from a 48-bit LCG
    so the compiled and fallback paths draw identical samples; the compiled
    path uses scalar loops, the fallback numpy row operations, so the two
    agree up to floating-point summation order.
    """
    impl = _sgns_loops if JIT_ENABLED else _sgns_rows
    return impl(syn0, syn1, tokens, starts, cum_table, window, negatives, epochs, lr, seed)
