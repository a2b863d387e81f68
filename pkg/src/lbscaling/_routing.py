"""Compiled routing probabilities shared by the exact solver and the simulator.

Everything here works on *tail counts*: ``m[i]`` is the number of servers
holding at least ``i`` jobs, with ``m[0] == N`` and ``m[b + 1] == 0``.
Keeping a single implementation of ``A_i`` guarantees the generator matrix
and the simulated chain use bit-identical routing probabilities.
"""
from __future__ import annotations

import math

import numba
import numpy as np

JSQ = 0
I1F = 1
POD = 2
JIQ = 3
RANDOM = 4

# Above this d the falling-factorial product is replaced by log-gamma.
_PRODUCT_MAX_D = 64


@numba.njit(cache=True)
def hypergeom_all_in(m, N, d):
    """Probability that ``d`` draws without replacement from ``N`` all land in ``m``."""
    if m >= N:
        return 1.0
    if m < d:
        return 0.0
    if d <= _PRODUCT_MAX_D:
        p = 1.0
        for j in range(d):
            p *= (m - j) / (N - j)
        return p
    return math.exp(math.lgamma(m + 1.0) - math.lgamma(m - d + 1.0)
                    - math.lgamma(N + 1.0) + math.lgamma(N - d + 1.0))


@numba.njit(cache=True)
def a_tail_counts(kind, d, replace, N, m, i):
    """A_i for tail-count vector ``m`` (``m[0] == N``); ``A_0 == 1``."""
    if i == 0:
        return 1.0
    if i >= m.shape[0] - 1:
        return 0.0
    mi = m[i]
    if kind == JSQ:
        return 1.0 if mi == N else 0.0
    if kind == I1F:
        if m[1] < N:
            return 0.0
        if i == 1:
            return 1.0
        if m[2] < N:
            return 0.0
        return mi / N
    if kind == JIQ:
        if m[1] < N:
            return 0.0
        return mi / N
    if kind == RANDOM:
        return mi / N
    # power-of-d
    if replace:
        return (mi / N) ** d
    return hypergeom_all_in(mi, N, d)


@numba.njit(cache=True)
def a_matrix(kind, d, replace, N, tails):
    """Row-wise ``A_0..A_b`` for a stack of tail-count vectors.

    ``tails`` has shape ``(M, b + 2)``; the result has shape ``(M, b + 1)``.
    """
    M = tails.shape[0]
    b = tails.shape[1] - 2
    out = np.empty((M, b + 1))
    for k in range(M):
        for i in range(b + 1):
            out[k, i] = a_tail_counts(kind, d, replace, N, tails[k], i)
    return out
