"""Slow, independent reference implementations used only by the tests."""

import itertools
import math


def brute_ranks(values):
    """Average rank (1-based) by direct counting."""
    out = []
    for v in values:
        less = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        out.append(less + (equal + 1) / 2.0)
    return out


def textbook_pearson(a, b):
    n = len(a)
    ma = math.fsum(a) / n
    mb = math.fsum(b) / n
    num = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(math.fsum((x - ma) ** 2 for x in a))
    db = math.sqrt(math.fsum((y - mb) ** 2 for y in b))
    return num / (da * db)


def brute_spearman(a, b):
    return textbook_pearson(brute_ranks(a), brute_ranks(b))


def rank_difference_spearman(a, b):
    ra, rb = brute_ranks(a), brute_ranks(b)
    n = len(a)
    return 1 - 6 * sum((x - y) ** 2 for x, y in zip(ra, rb)) / (n * (n * n - 1))


def sweep_d_test(pristine, distorted):
    """Every candidate threshold, including all observed values and +-inf."""
    cands = sorted(set(pristine) | set(distorted))
    thresholds = [-math.inf, math.inf] + cands + [(x + y) / 2 for x, y in zip(cands, cands[1:])]
    best = 0.0
    for t in thresholds:
        acc = 0.5 * (sum(p > t for p in pristine) / len(pristine) + sum(d <= t for d in distorted) / len(distorted))
        best = max(best, acc)
    return best


def enumerate_pairs(rows):
    """rows: (pristine_id, kind, level, yhat). Returns (correct, total)."""
    correct = total = 0
    for a, b in itertools.permutations(rows, 2):
        if a[0] != b[0]:
            continue
        same_group = a[1] == b[1] and a[2] > 0 and b[2] - a[2] >= 2
        pristine_pair = a[2] == 0 and b[2] >= 3
        if same_group or pristine_pair:
            total += 1
            correct += a[3] > b[3]
    return correct, total


def group_l_test(rows):
    groups = {}
    for pid, kind, level, yh in rows:
        if level > 0:
            groups.setdefault((pid, kind), []).append((level, yh))
    vals = []
    for members in groups.values():
        lv = [m[0] for m in members]
        yh = [m[1] for m in members]
        if len(set(lv)) < 2:
            continue
        if len(set(yh)) < 2:
            vals.append(0.0)
        else:
            vals.append(abs(brute_spearman(lv, yh)))
    return sum(vals) / len(vals)
