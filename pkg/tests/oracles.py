"""Independent reference implementations used as test oracles.

Everything here is deliberately written from the definitions (brute
force, full DP matrices, straight-line formula transcriptions) and
shares no code with the package under test.
"""

import math
from collections import Counter

import numpy as np


# ---------------------------------------------------------------------------
# Finite differences


def numeric_grad(f, params, eps=1e-3):
    """Central finite differences of the scalar function `f()`.

    `params` maps name -> Tensor (or any object with a `.data` ndarray);
    f() must re-run the forward pass and return a python float. Data is
    perturbed in place and restored. Use float64 parameters.
    """
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f()
            flat[i] = orig - eps
            f_minus = f()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        out[name] = g.reshape(p.data.shape)
    return out


def max_rel_err(analytic, numeric, floor=0.1):
    """Worst-case |a - n| / max(floor, |a|, |n|) over matching arrays."""
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = numeric[name]
        denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# Pooling


def column_max(seq):
    """Per-column max by explicit iteration; seq is (T, d) or (T, B, d)."""
    seq = np.asarray(seq)
    out = seq[0].copy()
    for t in range(1, seq.shape[0]):
        step = seq[t]
        it = np.nditer(step, flags=["multi_index"])
        for v in it:
            if v > out[it.multi_index]:
                out[it.multi_index] = v
    return out


# ---------------------------------------------------------------------------
# Scalar LSTM cell


def scalar_lstm_step(x, h, c, wi, wh, b):
    """Hand evaluation of the gate formulas for H = 1 scalars.

    wi, wh, b are length-4 sequences in (input, forget, cell, output)
    gate order; x, h, c are floats.
    """
    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    pre = [wi[k] * x + wh[k] * h + b[k] for k in range(4)]
    i, f, g, o = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
    c_new = f * c + i * g
    h_new = o * math.tanh(c_new)
    return h_new, c_new


# ---------------------------------------------------------------------------
# Levenshtein (full-matrix DP)


def levenshtein_full(a, b):
    """Textbook full-matrix edit distance with unit costs."""
    m, n = len(a), len(b)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[m][n]


# ---------------------------------------------------------------------------
# BLEU (brute force, from the definition)


def _ngram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def brute_force_bleu(candidates, reference_sets, max_n=4):
    """Corpus BLEU computed naively from the definition.

    Clipped modified n-gram precisions for n = 1..4 with add-one
    smoothing on n >= 2 whenever the clipped count is zero (also when
    the denominator is zero), geometric mean with uniform weights, and
    brevity penalty exp(1 - r/c) for c < r where r sums each segment's
    closest reference length (ties -> shorter).
    """
    clipped = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    c_len = 0
    r_len = 0
    for cand, refs in zip(candidates, reference_sets):
        c_len += len(cand)
        best = None
        for ref in refs:
            key = (abs(len(ref) - len(cand)), len(ref))
            if best is None or key < best:
                best = key
        r_len += best[1]
        for n in range(1, max_n + 1):
            cand_counts = Counter(_ngram_list(cand, n))
            for gram, count in cand_counts.items():
                max_in_refs = 0
                for ref in refs:
                    seen = 0
                    for i in range(len(ref) - n + 1):
                        if tuple(ref[i:i + n]) == gram:
                            seen += 1
                    max_in_refs = max(max_in_refs, seen)
                clipped[n] += min(count, max_in_refs)
                totals[n] += count
    log_sum = 0.0
    for n in range(1, max_n + 1):
        num, den = clipped[n], totals[n]
        if n >= 2 and num == 0:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += 0.25 * math.log(num / den)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# Attention (straight-line transcription of the projection pipeline)


def straight_line_attention(h_p, h_h, h_dec, weights, p_mask, h_mask):
    """One attention step of the dual-head projection pipeline, written
    as unvectorized loops over timesteps.

    h_p: (Tp, A_in) premise states for ONE example; h_h: (Th, A_in);
    h_dec: (H_dec,); weights: dict with w1_p, b1_p, wc_p, bc_p, w2_p,
    b2_p and the _h twins (numpy arrays, (out, in) layout); masks are
    boolean per timestep. Returns (p_ctx, h_ctx, w_p, w_h).
    """
    def head(states, mask, w1, b1, wc, bc, w2, b2):
        T = states.shape[0]
        proj1 = [np.tanh(w1 @ states[t] + b1) for t in range(T)]
        projc = np.tanh(wc @ h_dec + bc)
        raw = np.array([float(projc @ proj1[t]) for t in range(T)])
        exps = np.zeros(T)
        m = max(raw[t] for t in range(T) if mask[t])
        for t in range(T):
            if mask[t]:
                exps[t] = math.exp(raw[t] - m)
        w = exps / exps.sum()
        proj2 = [np.tanh(w2 @ states[t] + b2) for t in range(T)]
        ctx = np.zeros_like(proj2[0])
        for t in range(T):
            ctx = ctx + w[t] * proj2[t]
        return ctx, w

    p_ctx, w_p = head(h_p, p_mask, weights["w1_p"], weights["b1_p"],
                      weights["wc_p"], weights["bc_p"], weights["w2_p"],
                      weights["b2_p"])
    h_ctx, w_h = head(h_h, h_mask, weights["w1_h"], weights["b1_h"],
                      weights["wc_h"], weights["bc_h"], weights["w2_h"],
                      weights["b2_h"])
    return p_ctx, h_ctx, w_p, w_h
