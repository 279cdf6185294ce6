"""Slow, obviously-correct reference implementations used as test oracles."""

import math


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    """Sweep every cutoff of the stable descending ranking and sum precision * recall increment."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for y in labels if y == 1)
    ap, prev_recall = 0.0, 0.0
    for k in range(1, len(order) + 1):
        tp = sum(1 for i in order[:k] if labels[i] == 1)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / k)
        prev_recall = recall
    return ap


def direct_point_metrics(scores, labels, threshold):
    tp = fp = fn = tn = 0
    for s, y in zip(scores, labels):
        if s >= threshold:
            tp, fp = tp + (y == 1), fp + (y == 0)
        else:
            fn, tn = fn + (y == 1), tn + (y == 0)

    def ratio(a, b):
        return a / b if b else 0.0

    sens, spec = ratio(tp, tp + fn), ratio(tn, tn + fp)
    ppv, npv = ratio(tp, tp + fp), ratio(tn, tn + fn)
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return {
        "sensitivity": sens,
        "specificity": spec,
        "ppv": ppv,
        "npv": npv,
        "bal_acc": (sens + spec) / 2,
        "f1": ratio(2 * ppv * sens, ppv + sens),
        "mcc": ratio(tp * tn - fp * fn, den),
    }


def full_dp_dtw(a, b):
    """Unbanded DTW as a memoized recursion over (i, j); squared local cost, root at the end."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def best(i, j):
        cost = (a[i] - b[j]) ** 2
        if i == 0 and j == 0:
            return cost
        options = []
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1))
        if i > 0:
            options.append(best(i - 1, j))
        if j > 0:
            options.append(best(i, j - 1))
        return cost + min(options)

    return math.sqrt(best(len(a) - 1, len(b) - 1))


def warping_paths(n, m):
    """Every monotone path from (0, 0) to (n-1, m-1) with unit steps."""
    if n == 1 and m == 1:
        return [[(0, 0)]]
    paths = []
    for di, dj in ((1, 0), (0, 1), (1, 1)):
        if n - di >= 1 and m - dj >= 1:
            paths += [p + [(n - 1, m - 1)] for p in warping_paths(n - di, m - dj)]
    return paths


def enumerated_dtw(a, b, band_radius=None):
    best = math.inf
    for path in warping_paths(len(a), len(b)):
        if band_radius is not None and any(abs(i - j) > band_radius for i, j in path):
            continue
        best = min(best, sum((a[i] - b[j]) ** 2 for i, j in path))
    return math.sqrt(best)
