"""Slow, loop-based reference implementations used as test oracles.

They share no code with the package so a bug in a vectorized path cannot
hide behind itself.
"""

import math

import numpy as np


def profile_by_summation(k, n_max, n_min):
    """Counts and total of the exponential profile, one class at a time."""
    b = (n_max / n_min) ** (1.0 / (k - 1))
    counts = []
    for r in range(k):
        if r == 0:
            counts.append(n_max)
        elif r == k - 1:
            counts.append(n_min)
        else:
            counts.append(int(math.floor(n_max * b ** (-r) + 0.5)))
    total = 0
    for c in counts:
        total += c
    return counts, total


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def fusion_row(p_v, p_s, counts, params, degree, beta, sort_by="visual"):
    """Fused scores of one sample with plain Python loops.

    ``p_s=None`` gives the single-expert variant. ``params`` is a dict of
    nested lists shaped as in the package.
    """
    k = len(p_v)
    key = p_v if sort_by == "visual" else p_s
    order = sorted(range(k), key=lambda y: (-key[y], y))
    cols = [p_v] if p_s is None else [p_v, p_s]
    x = [[c[y] for c in cols] for y in order]
    conv_w, conv_b = params["conv_w"], params["conv_b"]
    F = len(conv_b)
    h = []
    for r in range(k - 1):
        acc = 0.0
        for f in range(F):
            z = conv_b[f]
            for dr in range(2):
                for c in range(len(cols)):
                    z += conv_w[f][dr][c] * x[r + dr][c]
            acc += z
        h.append(acc / F)
    top = max(counts)
    m = [n / top for n in counts]

    def weights(w, b):
        coef = []
        for j in range(degree):
            c = b[j]
            if w is not None:
                for r in range(k - 1):
                    c += w[j][r] * h[r]
            coef.append(c)
        return [_sig(sum(coef[j] * (1.0 if j == 0 else m[y] ** j) for j in range(degree))) for y in range(k)]

    w_v = weights(params.get("v_w"), params["v_b"])
    if p_s is None:
        return [w_v[y] * p_v[y] for y in range(k)]
    w_s = weights(params.get("s_w"), params["s_b"])
    f0 = params["lam_b"][0] + sum(params["lam_w"][r] * h[r] for r in range(k - 1))
    lam = _sig(f0 - beta)
    return [lam * w_v[y] * p_v[y] + (1 - lam) * w_s[y] * p_s[y] for y in range(k)]


def ece_by_hand(confidences, correct, lo, num_bins):
    """Bins over [lo, 1], right-inclusive; the first bin also takes ``lo``."""
    width = (1.0 - lo) / num_bins
    bins = [[] for _ in range(num_bins)]
    for c, ok in zip(confidences, correct):
        b = 0
        while b < num_bins - 1 and c > lo + (b + 1) * width:
            b += 1
        bins[b].append((c, ok))
    n = len(confidences)
    ece = 0.0
    for members in bins:
        if members:
            conf = sum(c for c, _ in members) / len(members)
            acc = sum(ok for _, ok in members) / len(members)
            ece += len(members) / n * abs(conf - acc)
    return ece


def random_rows(rng, n, k, sharp=1.0):
    """Random probability rows (softmax of scaled normal logits)."""
    z = rng.normal(size=(n, k)) * sharp
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
