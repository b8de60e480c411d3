"""Truncated derivative jets: row d of a jet holds the d-th x-derivative at every node."""

from math import comb

import numpy as np


def mul(a, b):
    """Leibniz product, truncated to the shorter jet."""
    n = min(len(a), len(b))
    out = np.zeros((n,) + a.shape[1:])
    for d in range(n):
        for k in range(d + 1):
            out[d] += comb(d, k) * a[k] * b[d - k]
    return out


def recip(a):
    """Jet of 1/a from a * r = 1."""
    r = np.zeros_like(a)
    r[0] = 1.0 / a[0]
    for d in range(1, len(a)):
        acc = sum(comb(d, k) * a[k] * r[d - k] for k in range(1, d + 1))
        r[d] = -acc * r[0]
    return r


def diff(a):
    """x-derivative: drops the lowest row, so the jet loses one order."""
    return a[1:]


def power(a, m):
    out = np.zeros_like(a)
    out[0] = 1.0
    for _ in range(m):
        out = mul(out, a)
    return out
