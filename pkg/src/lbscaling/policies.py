"""Routing policies and the three-condition membership checker.

A policy is described entirely by its tail-routing probabilities
``A_i(s)`` -- the chance that an arriving job lands on a server that
already holds at least ``i`` jobs. Tie-breaking among equally loaded
servers does not matter at the histogram level since servers are
exchangeable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _routing
from .model import (AggregateState, ModelError, Params, check_tail_probabilities,
                    enumerate_counts, tails_from_counts)

_KIND_CODES = {
    "jsq": _routing.JSQ,
    "i1f": _routing.I1F,
    "pod": _routing.POD,
    "jiq": _routing.JIQ,
    "random": _routing.RANDOM,
}
BUILTIN_KINDS = tuple(_KIND_CODES)


@dataclass(frozen=True)
class Policy:
    """A routing rule.

    ``kind`` is one of ``jsq``, ``i1f``, ``pod``, ``jiq``, ``random`` or
    ``custom``. Power-of-d uses ``d`` and ``replace`` (sampling with
    replacement by default, which gives ``A_i = s_i**d``). A custom policy
    supplies ``fn(state) -> [A_1, ..., A_b]``; it works with the
    exact solver but not with the compiled simulator.
    """

    kind: str
    d: int = 1
    replace: bool = True
    fn: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in _KIND_CODES and self.kind != "custom":
            raise ModelError(f"unknown policy kind {self.kind!r}")
        if self.kind == "pod" and (int(self.d) != self.d or self.d < 1):
            raise ModelError(f"power-of-d needs a positive integer d, got {self.d!r}")
        if self.kind == "custom" and self.fn is None:
            raise ModelError("custom policy needs fn")

    @classmethod
    def jsq(cls):
        return cls("jsq")

    @classmethod
    def i1f(cls):
        return cls("i1f")

    @classmethod
    def jiq(cls):
        return cls("jiq")

    @classmethod
    def random(cls):
        return cls("random")

    @classmethod
    def pod(cls, d: int, replace: bool = True):
        return cls("pod", d=int(d), replace=replace)

    @classmethod
    def parse(cls, name: str, d: int = 2, sampling: str = "with"):
        """Build from a CLI-style name such as ``jsq`` or ``pod``."""
        kind = name.strip().lower()
        if kind in ("pod", "po-d", "powerofd"):
            return cls.pod(d, replace=not sampling.startswith("without"))
        return cls(kind)

    @property
    def builtin(self) -> bool:
        return self.kind in _KIND_CODES

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def label(self) -> str:
        if self.kind == "pod":
            return f"pod{self.d}" + ("" if self.replace else "-norep")
        return self.kind

    def check_size(self, N: int) -> None:
        if self.kind == "pod" and not self.replace and self.d > N:
            raise ModelError(f"sampling d={self.d} servers without replacement needs d <= N={N}")

    def a_vector(self, state: AggregateState, params: Params) -> np.ndarray:
        """``[A_0, A_1, ..., A_b]`` at ``state`` with ``A_0 = 1``."""
        state.validate(params)
        return self.a_rows(state.tail_counts()[None, :], params.N)[0]

    def a_rows(self, tails: np.ndarray, N: int) -> np.ndarray:
        """Vectorized ``A_0..A_b`` for tail-count rows of shape ``(M, b + 2)``."""
        tails = np.ascontiguousarray(tails, dtype=np.int64)
        if self.builtin:
            self.check_size(N)
            return _routing.a_matrix(self.code, int(self.d), bool(self.replace), int(N), tails)
        b = tails.shape[1] - 2
        out = np.empty((tails.shape[0], b + 1))
        out[:, 0] = 1.0
        for k, m in enumerate(tails):
            state = AggregateState.from_tails(m[1:-1], N)
            out[k, 1:] = np.asarray(self.fn(state), dtype=float)
        return out


def a_tail(policy: Policy, state: AggregateState, params: Params, i: int) -> float:
    """Probability an arrival is routed to a server holding at least ``i`` jobs."""
    if not 1 <= i <= params.b:
        raise ModelError(f"level i={i} outside 1..{params.b}")
    return float(policy.a_vector(state, params)[i])


def join_distribution(policy: Policy, state: AggregateState, params: Params):
    """Return ``(p_join, p_block)``.

    ``p_join[i]`` is the probability an arrival joins a server currently
    holding exactly ``i`` jobs (i = 0..b-1); ``p_block = A_b``.
    """
    a = policy.a_vector(state, params)
    check_tail_probabilities(a, state.counts)
    p_join = a[:-1] - a[1:]
    for i, p in enumerate(p_join):
        if p > 0.0 and state.counts[i] == 0:
            raise ModelError(f"policy routes to empty level {i} in {state.counts}")
    return p_join, float(a[-1])


# ---------------------------------------------------------------------------
# membership


@dataclass(frozen=True)
class ConditionResult:
    holds: bool
    witness: Optional[AggregateState]
    margin: float


@dataclass(frozen=True)
class PiReport:
    member: bool
    r_tested: int
    cond1: ConditionResult
    cond2: ConditionResult
    cond3: ConditionResult
    mode: str = "analytic"

    def to_dict(self) -> dict:
        def cond(c):
            return {"holds": c.holds, "margin": c.margin,
                    "witness": list(c.witness.counts) if c.witness is not None else None}
        return {"member": self.member, "r": self.r_tested, "mode": self.mode,
                "cond1": cond(self.cond1), "cond2": cond(self.cond2), "cond3": cond(self.cond3)}


@dataclass(frozen=True)
class PiThresholds:
    idle_s1: float       # premise s_1 <= this
    idle_a1: float       # bound on A_1
    level2_s2: float     # premise s_2 <= this
    level2_a2: float     # bound on A_2


def pi_thresholds(params: Params, r: int) -> PiThresholds:
    N, alpha = params.N, params.alpha
    return PiThresholds(
        idle_s1=1.0 - 1.0 / (4.0 * N ** alpha),
        idle_a1=1.0 / math.sqrt(N),
        level2_s2=0.95,
        level2_a2=10.0 * (2.0 * r / N ** (1.0 - alpha)) ** r,
    )


class CapExceeded(ModelError):
    """State space larger than the enumeration cap."""


def check_pi_membership(policy: Policy, params: Params, r: int = 1,
                        mode: str = "analytic", cap: int = 10 ** 7) -> PiReport:
    """Test the idle-preference, level-2 avoidance and sub-random blocking conditions.

    ``analytic`` evaluates closed-form worst cases and handles any ``N``
    for the built-in policies; ``enumerate`` scans every state and
    reports the first violation in canonical state order.
    """
    if int(r) != r or r < 1:
        raise ModelError(f"r must be a positive integer, got {r!r}")
    th = pi_thresholds(params, r)
    if mode == "enumerate":
        c1, c2, c3 = _enumerate_conditions(policy, params, th, cap)
    elif mode == "analytic":
        if not policy.builtin:
            raise ModelError("analytic membership is only available for built-in policies")
        c1, c2, c3 = _analytic_conditions(policy, params, th)
    else:
        raise ModelError(f"unknown mode {mode!r}")
    return PiReport(member=c1.holds and c2.holds and c3.holds, r_tested=int(r),
                    cond1=c1, cond2=c2, cond3=c3, mode=mode)


def _largest_count(N: int, frac: float) -> int:
    """Largest integer m with m / N <= frac."""
    m = min(N, max(0, math.floor(N * frac)))
    while m < N and (m + 1) / N <= frac:
        m += 1
    while m > 0 and m / N > frac:
        m -= 1
    return m


def _analytic_conditions(policy, params, th):
    N, b = params.N, params.b

    # A_1 depends on s only through s_1 and is nondecreasing in it.
    m1 = _largest_count(N, th.idle_s1)
    tails = np.zeros(b + 2, dtype=np.int64)
    tails[0], tails[1] = N, m1
    a1 = policy.a_rows(tails[None, :], N)[0, 1]
    state = AggregateState.from_tails(tails[1:-1], N)
    margin1 = float(th.idle_a1 - a1)
    c1 = ConditionResult(bool(margin1 >= 0.0), None if margin1 >= 0.0 else state, float(margin1))

    # A_2 is nondecreasing in s_1 and s_2; worst case pins s_1 = 1.
    if b >= 2:
        m2 = _largest_count(N, th.level2_s2)
        tails = np.zeros(b + 2, dtype=np.int64)
        tails[0], tails[1], tails[2] = N, N, m2
        a2 = policy.a_rows(tails[None, :], N)[0, 2]
        state = AggregateState.from_tails(tails[1:-1], N)
        margin2 = float(th.level2_a2 - a2)
        c2 = ConditionResult(bool(margin2 >= 0.0), None if margin2 >= 0.0 else state, float(margin2))
    else:
        c2 = ConditionResult(True, None, float(th.level2_a2))

    # A_b given s_b is largest when every lower level is saturated.
    mb = np.arange(N + 1, dtype=np.int64)
    tails = np.zeros((N + 1, b + 2), dtype=np.int64)
    tails[:, :b] = N
    tails[:, b] = mb
    ab = policy.a_rows(tails, N)[:, b]
    slack = mb / N - ab
    worst = int(np.argmin(slack))
    bad = np.flatnonzero(slack < 0.0)
    witness = AggregateState.from_tails(tails[bad[0], 1:-1], N) if bad.size else None
    c3 = ConditionResult(not bad.size, witness, float(slack[worst]))
    return c1, c2, c3


def _enumerate_conditions(policy, params, th, cap):
    N, b = params.N, params.b
    size = math.comb(N + b, b)
    if size > cap:
        raise CapExceeded(f"state space has {size} states, above cap {cap}")
    counts = enumerate_counts(N, b)
    tails = tails_from_counts(counts)
    a = policy.a_rows(tails, N)
    s = tails / N

    def condition(premise, value, bound):
        slack = bound - value
        checked = slack[premise]
        margin = float(checked.min()) if checked.size else float("inf")
        bad = np.flatnonzero(premise & (slack < 0.0))
        witness = AggregateState(tuple(counts[bad[0]])) if bad.size else None
        return ConditionResult(not bad.size, witness, margin)

    c1 = condition(s[:, 1] <= th.idle_s1, a[:, 1], th.idle_a1)
    if b >= 2:
        c2 = condition(s[:, 2] <= th.level2_s2, a[:, 2], th.level2_a2)
    else:
        c2 = ConditionResult(True, None, float(th.level2_a2))
    c3 = condition(np.ones(len(counts), dtype=bool), a[:, b], s[:, b])
    return c1, c2, c3
