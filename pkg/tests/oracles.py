"""Direct-summation reference implementations of the association measures.

Pure Python over lists, no numpy, so they share no code path with the package.
"""
import math
from collections import Counter, defaultdict


def pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    if sx == 0 or sy == 0:
        return 0.0
    return num / (sx * sy)


def entropy(values):
    n = len(values)
    return -sum(c / n * math.log(c / n) for c in Counter(values).values())


def conditional_entropy(x, y):
    """H(X|Y) = sum_y p(y) H(X | Y=y)."""
    n = len(x)
    groups = defaultdict(list)
    for a, b in zip(x, y):
        groups[b].append(a)
    return sum(len(g) / n * entropy(g) for g in groups.values())


def theil(x, y):
    hx = entropy(x)
    if hx == 0:
        return 1.0
    return (hx - conditional_entropy(x, y)) / hx


def eta(cat, num):
    groups = defaultdict(list)
    for c, v in zip(cat, num):
        groups[c].append(v)
    ybar = sum(num) / len(num)
    between = sum(len(g) * (sum(g) / len(g) - ybar) ** 2 for g in groups.values())
    total = sum((v - ybar) ** 2 for v in num)
    if total == 0:
        return 0.0
    return math.sqrt(between / total)
