"""System parameters, the occupancy-histogram state, and CTMC transition rates."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid parameters, state, or policy output."""


@dataclass(frozen=True)
class Params:
    """Server count ``N``, heavy-traffic exponent ``alpha``, buffer depth ``b``.

    ``lam`` is the per-server load; it equals ``1 - N**-alpha`` unless
    ``lambda_override`` was given. Build instances with :func:`make_params`.
    """

    N: int
    alpha: float
    b: int
    lam: float
    lambda_override: Optional[float] = None

    @property
    def arrival_rate(self) -> float:
        return self.lam * self.N


def make_params(N: int, alpha: float, b: int,
                lambda_override: Optional[float] = None) -> Params:
    if int(N) != N or N < 1:
        raise ModelError(f"N must be a positive integer, got {N!r}")
    if int(b) != b or b < 1:
        raise ModelError(f"b must be a positive integer, got {b!r}")
    N, b = int(N), int(b)
    if lambda_override is not None:
        lam = float(lambda_override)
        if not 0.0 < lam < 1.0:
            raise ModelError(f"lambda_override must lie in (0, 1), got {lam}")
    else:
        if not 0.0 < alpha <= 1.0:
            raise ModelError(f"alpha must lie in (0, 1] without an override, got {alpha}")
        lam = 1.0 - float(N) ** (-float(alpha))
        if not 0.0 < lam < 1.0:
            raise ModelError(f"degenerate load lambda={lam} for N={N}, alpha={alpha}; "
                             "supply lambda_override")
    return Params(N=N, alpha=float(alpha), b=b, lam=lam, lambda_override=lambda_override)


@dataclass(frozen=True)
class AggregateState:
    """Occupancy histogram ``(n_0, ..., n_b)``: servers holding exactly i jobs."""

    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) < 2:
            raise ModelError("a state needs at least two histogram cells (b >= 1)")
        if any(c < 0 for c in counts):
            raise ModelError(f"negative count in {counts}")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_tails(cls, tails: Sequence[int], N: int) -> "AggregateState":
        """Inverse of :meth:`tail_counts`; ``tails[i-1]`` servers hold at least i jobs."""
        m = [N, *[int(t) for t in tails], 0]
        if any(m[i] < m[i + 1] for i in range(len(m) - 1)):
            raise ModelError(f"tail counts must be nonincreasing: {tails}")
        return cls(tuple(m[i] - m[i + 1] for i in range(len(m) - 1)))

    @property
    def N(self) -> int:
        return sum(self.counts)

    @property
    def b(self) -> int:
        return len(self.counts) - 1

    def tail_counts(self) -> np.ndarray:
        """``m[i]`` = servers with at least i jobs, for i = 0..b+1."""
        n = np.asarray(self.counts, dtype=np.int64)
        m = np.zeros(len(n) + 1, dtype=np.int64)
        m[:-1] = np.cumsum(n[::-1])[::-1]
        return m

    def total_jobs(self) -> int:
        return sum(i * c for i, c in enumerate(self.counts))

    def validate(self, params: Params) -> None:
        if self.b != params.b or self.N != params.N:
            raise ModelError(f"state {self.counts} does not match N={params.N}, b={params.b}")


def enumerate_counts(N: int, b: int) -> np.ndarray:
    """All histograms with ``b + 1`` cells summing to ``N``, shape ``(C(N+b, b), b + 1)``.

    Rows are in descending lexicographic order, so the empty system comes
    first and the saturated system last.
    """
    bars = np.fromiter(itertools.chain.from_iterable(
        itertools.combinations(range(N + b), b)), dtype=np.int64)
    bars = bars.reshape(-1, b)[::-1]
    edges = np.empty((bars.shape[0], b + 2), dtype=np.int64)
    edges[:, 0] = -1
    edges[:, 1:-1] = bars
    edges[:, -1] = N + b
    return np.ascontiguousarray(np.diff(edges, axis=1) - 1)


def tails_from_counts(counts: np.ndarray) -> np.ndarray:
    """Row-wise tail counts ``m[0..b+1]`` for a stack of histograms."""
    counts = np.asarray(counts, dtype=np.int64)
    m = np.zeros(counts.shape[:-1] + (counts.shape[-1] + 1,), dtype=np.int64)
    m[..., :-1] = np.cumsum(counts[..., ::-1], axis=-1)[..., ::-1]
    return m


def tail_fractions(state: AggregateState, params: Params) -> np.ndarray:
    """``(s_1, ..., s_b)``: fraction of servers with at least i jobs."""
    state.validate(params)
    return state.tail_counts()[1:-1] / params.N


@dataclass(frozen=True)
class Transition:
    """One outgoing event of the aggregate chain.

    ``kind`` is ``"arrival"``, ``"blocked"`` or ``"departure"``; ``level`` is
    the occupancy the affected server had *before* the event (the full
    level ``b`` for blocked arrivals).
    """

    target: AggregateState
    rate: float
    kind: str
    level: int


def check_tail_probabilities(a: np.ndarray, where=None) -> None:
    """Reject routing vectors ``A_0..A_b`` outside [0, 1] or increasing in i."""
    if a[0] != 1.0:
        raise ModelError(f"A_0 must be 1, got {a[0]} at {where}")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ModelError(f"routing probabilities outside [0, 1]: {a} at {where}")
    if np.any(np.diff(a) > 0.0):
        raise ModelError(f"routing probabilities not monotone nonincreasing: {a} at {where}")


def transitions(state: AggregateState, policy, params: Params) -> list:
    """All transitions out of ``state``, blocked arrivals included as self-loops.

    Arrival rates (blocked included) sum to ``lam * N``; departure rates sum
    to the number of busy servers.
    """
    state.validate(params)
    a = policy.a_vector(state, params)
    check_tail_probabilities(a, state.counts)
    n = state.counts
    b = params.b
    lamN = params.arrival_rate
    out = []
    for i in range(1, b + 1):
        p = a[i - 1] - a[i]
        if p > 0.0:
            if n[i - 1] == 0:
                raise ModelError(f"policy routes to empty level {i - 1} in {n}")
            target = list(n)
            target[i - 1] -= 1
            target[i] += 1
            out.append(Transition(AggregateState(tuple(target)), lamN * p, "arrival", i - 1))
    if a[b] > 0.0:
        out.append(Transition(state, lamN * a[b], "blocked", b))
    for i in range(1, b + 1):
        if n[i] > 0:
            target = list(n)
            target[i] -= 1
            target[i - 1] += 1
            out.append(Transition(AggregateState(tuple(target)), float(n[i]), "departure", i))
    return out
