"""Compiled event loops for the aggregate and per-server simulators.

Both kernels advance the chain from ``t`` to ``t_end`` and add to the
caller's accumulators. The pending event time ``t_next`` is carried
between calls, so a run split into segments draws exactly the same
random numbers as an unsplit run.
"""
from __future__ import annotations

import numba
import numpy as np

from ._routing import I1F, JIQ, JSQ, POD, RANDOM, a_tail_counts


@numba.njit(cache=True)
def _accumulate(m, N, dt, h_level, acc_S, acc_h):
    b = m.shape[0] - 2
    total = 0
    for i in range(1, b + 1):
        acc_S[i - 1] += m[i] * dt
        total += m[i]
    x = total / N - h_level
    if x > 0.0:
        p = 1.0
        for r in range(acc_h.shape[0]):
            p *= x
            acc_h[r] += p * dt


@numba.njit(cache=True)
def advance_aggregate(m, t, t_next, t_end, lamN, N, kind, d, replace, rng,
                      h_level, acc_S, acc_h, level_counts, ev):
    """Simulate the histogram chain on ``[t, t_end]``; returns the new ``t_next``.

    ``m`` holds tail counts (``m[0] == N``, ``m[b+1] == 0``) and is updated
    in place. ``ev`` counts ``[arrivals, departures]``.
    """
    b = m.shape[0] - 2
    while t_next <= t_end:
        _accumulate(m, N, t_next - t, h_level, acc_S, acc_h)
        t = t_next
        busy = m[1]
        u = rng.random() * (lamN + busy)
        if u < lamN:
            v = u / lamN  # uniform on [0, 1) given an arrival
            lvl = 0
            for i in range(1, b + 1):
                if v < a_tail_counts(kind, d, replace, N, m, i):
                    lvl = i
                else:
                    break
            level_counts[lvl] += 1
            if lvl < b:
                m[lvl + 1] += 1
            ev[0] += 1
        else:
            x = u - lamN
            i = 1
            c = m[1] - m[2]
            while x >= c and i < b:
                i += 1
                c += m[i] - m[i + 1]
            m[i] -= 1
            ev[1] += 1
        t_next = t + rng.exponential() / (lamN + m[1])
    _accumulate(m, N, t_end - t, h_level, acc_S, acc_h)
    return t_next


@numba.njit(cache=True)
def _pick_with_length(q, length, count, rng):
    """Uniformly choose one of the ``count`` servers whose queue equals ``length``."""
    k = int(rng.random() * count)
    for j in range(q.shape[0]):
        if q[j] == length:
            if k == 0:
                return j
            k -= 1
    return -1


@numba.njit(cache=True)
def _route(q, m, N, kind, d, replace, rng, scratch):
    """Server index chosen for an arrival under the per-server policy."""
    if kind == RANDOM:
        return int(rng.random() * N)
    if kind == JSQ:
        b = m.shape[0] - 2
        lo = 0
        while lo < b and m[lo + 1] == N:
            lo += 1
        return _pick_with_length(q, lo, m[lo] - m[lo + 1], rng)
    if kind == JIQ or kind == I1F:
        if m[1] < N:
            return _pick_with_length(q, 0, N - m[1], rng)
        if kind == I1F and m.shape[0] > 3 and m[2] < N:
            return _pick_with_length(q, 1, N - m[2], rng)
        return int(rng.random() * N)
    # power-of-d: least loaded among d samples, ties uniformly at random
    best = -1
    best_len = 1 << 30
    ties = 0
    if replace:
        for _ in range(d):
            j = int(rng.random() * N)
            if q[j] < best_len:
                best, best_len, ties = j, q[j], 1
            elif q[j] == best_len and j != best:
                ties += 1
                if rng.random() * ties < 1.0:
                    best = j
        return best
    for k in range(d):
        r = k + int(rng.random() * (N - k))
        tmp = scratch[k]
        scratch[k] = scratch[r]
        scratch[r] = tmp
        j = scratch[k]
        if q[j] < best_len:
            best, best_len, ties = j, q[j], 1
        elif q[j] == best_len:
            ties += 1
            if rng.random() * ties < 1.0:
                best = j
    return best


@numba.njit(cache=True)
def advance_servers(q, fifo, head, m, t, t_next, t_end, lamN, N, kind, d, replace, rng,
                    h_level, acc_S, acc_h, level_counts, ev, warmup, batch_len,
                    wait_sum, wait_cnt, scratch):
    """Per-server simulation with job tagging on ``[t, t_end]``.

    ``fifo[j, :]`` is a ring buffer of arrival times at server ``j``.
    Realized waits are credited to the batch in which the job arrived.
    """
    b = m.shape[0] - 2
    n_batches = wait_sum.shape[0]
    while t_next <= t_end:
        _accumulate(m, N, t_next - t, h_level, acc_S, acc_h)
        t = t_next
        busy = m[1]
        u = rng.random() * (lamN + busy)
        if u < lamN:
            j = _route(q, m, N, kind, d, replace, rng, scratch)
            lvl = q[j]
            level_counts[lvl] += 1
            if lvl < b:
                fifo[j, (head[j] + lvl) % b] = t
                q[j] += 1
                m[lvl + 1] += 1
                if lvl == 0 and t >= warmup:
                    k = int((t - warmup) / batch_len)
                    if k < n_batches:
                        wait_cnt[k] += 1
            ev[0] += 1
        else:
            k = int(u - lamN)
            j = -1
            for s in range(N):
                if q[s] > 0:
                    if k == 0:
                        j = s
                        break
                    k -= 1
            lvl = q[j]
            head[j] = (head[j] + 1) % b
            q[j] -= 1
            m[lvl] -= 1
            if lvl > 1:
                arrived = fifo[j, head[j]]
                if arrived >= warmup:
                    k = int((arrived - warmup) / batch_len)
                    if k < n_batches:
                        wait_sum[k] += t - arrived
                        wait_cnt[k] += 1
            ev[1] += 1
        t_next = t + rng.exponential() / (lamN + m[1])
    _accumulate(m, N, t_end - t, h_level, acc_S, acc_h)
    return t_next
