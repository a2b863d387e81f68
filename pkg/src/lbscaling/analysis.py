"""Truncated distance, Lyapunov drift, tail bounds, and premise-gated bound checks.

Every check returns a :class:`VerificationReport` carrying both sides of
the inequality. A check only asserts (``satisfied`` is not ``None``) when
its premise on ``(N, alpha, b, r)`` holds; at desk-scale N most premises
fail and the numbers are reported for trend inspection only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .metrics import MetricsEstimate, batch_se, truncated_excess
from .model import AggregateState, Params, transitions
from .policies import Policy, check_pi_membership

EXACT_TOL = 1e-10
SIGMAS = 3.0


@dataclass(frozen=True)
class BoundParams:
    r: int
    k: float
    kbar: float


def make_bound_params(r: int, params: Params, kbar: Optional[float] = None) -> BoundParams:
    """``k = 32 r b + 1``; ``kbar`` defaults to ``k`` and must not exceed it."""
    if int(r) != r or r < 1:
        raise ValueError(f"r must be a positive integer, got {r!r}")
    k = 32.0 * r * params.b + 1.0
    if kbar is None:
        kbar = k
    if kbar > k:
        raise ValueError(f"kbar={kbar} exceeds k={k}")
    if params.N > 1:
        lowest = k - r / (params.N ** params.alpha * math.log(params.N))
        if kbar < lowest:
            raise ValueError(f"kbar={kbar} below the admissible range [{lowest}, {k}]")
    return BoundParams(r=int(r), k=k, kbar=float(kbar))


@dataclass
class VerificationReport:
    claim: str
    premise_holds: bool
    lhs: float
    rhs: float
    satisfied: Optional[bool]
    provenance: str
    se: float = 0.0
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("lhs", "rhs", "se"):
            v = d[key]
            d[key] = None if v is None or not math.isfinite(v) else float(v)
        return d


def reports_to_json(reports, **extra) -> str:
    """Serialize reports as ``{"reports": [...], ...extra}``."""
    return json.dumps({**extra, "reports": [r.to_dict() for r in reports]}, indent=2, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _report(claim, premise, lhs, rhs, provenance, se=0.0, tol=0.0, **detail):
    """``lhs <= rhs``, allowing ``tol`` (exact) or ``3 se`` (simulated) slack."""
    slack = SIGMAS * se if provenance == "simulated" else tol
    satisfied = bool(lhs <= rhs + slack) if premise else None
    return VerificationReport(claim, bool(premise), float(lhs), float(rhs), satisfied,
                              provenance, float(se), detail)


def _equality(claim, premise, lhs, rhs, provenance, se=0.0, tol=EXACT_TOL, **detail):
    slack = SIGMAS * se if provenance == "simulated" else tol
    satisfied = bool(abs(lhs - rhs) <= slack) if premise else None
    return VerificationReport(claim, bool(premise), float(lhs), float(rhs), satisfied,
                              provenance, float(se), detail)


# ---------------------------------------------------------------------------
# premises and scale factors


def _logN(params: Params) -> float:
    return math.log(params.N)


def _excess_scale(params: Params) -> float:
    """``N**(1 - alpha)``."""
    return float(params.N) ** (1.0 - params.alpha)


def heavy_traffic_regime(params: Params) -> bool:
    return params.lambda_override is None and 0.5 <= params.alpha < 1.0


def excess_premise(params: Params, r: int) -> bool:
    """``N**(1-alpha) / (32 log N) > r``, written without dividing by log N."""
    return heavy_traffic_regime(params) and _excess_scale(params) > 32.0 * r * _logN(params)


def s3_premise(params: Params, bp: BoundParams) -> bool:
    return heavy_traffic_regime(params) and _excess_scale(params) >= 5.0 * bp.k * _logN(params)


def waiting_premise(params: Params, r: int) -> bool:
    return heavy_traffic_regime(params) and _excess_scale(params) >= 3.0 * 40.0 ** (r / 2.0) * r


# ---------------------------------------------------------------------------
# truncated distance and Lyapunov function


def h_trunc(x, bp: BoundParams, params: Params):
    """``max(x - 1 - kbar log N / N**(1-alpha), 0)``."""
    out = truncated_excess(x, bp.kbar, params.N, params.alpha)
    return float(out) if np.ndim(out) == 0 else out


def lyapunov_values(fractions: np.ndarray, bp: BoundParams, params: Params) -> np.ndarray:
    """Row-wise ``min(sum_{i>=2} s_i - kbar log N / N**(1-alpha), 1 - s_1)``."""
    fractions = np.atleast_2d(fractions)
    offset = bp.kbar * _logN(params) / _excess_scale(params)
    return np.minimum(fractions[:, 1:].sum(axis=1) - offset, 1.0 - fractions[:, 0])


def lyapunov_v(state: AggregateState, bp: BoundParams, params: Params) -> float:
    s = state.tail_counts()[1:-1] / params.N
    return float(lyapunov_values(s[None, :], bp, params)[0])


def drift_bound(params: Params, bp: BoundParams) -> float:
    """``2/sqrt(N) - (k/b) log N / N**(1-alpha)``."""
    return 2.0 / math.sqrt(params.N) - bp.k / params.b * _logN(params) / _excess_scale(params)


def drift_premise_level(params: Params) -> float:
    return 1.0 / (4.0 * params.N ** params.alpha)


def drift_v(state: AggregateState, policy: Policy, params: Params, bp: BoundParams) -> float:
    """Generator applied to V at one state; blocked arrivals contribute nothing."""
    v0 = lyapunov_v(state, bp, params)
    return float(sum(t.rate * (lyapunov_v(t.target, bp, params) - v0)
                     for t in transitions(state, policy, params) if t.kind != "blocked"))


def drift_report(state: AggregateState, policy: Policy, params: Params, bp: BoundParams,
                 member: Optional[bool] = None) -> VerificationReport:
    """Single-state drift check, asserted only for Pi members with V above the premise level."""
    if member is None:
        member = policy.builtin and check_pi_membership(policy, params, bp.r).member
    v = lyapunov_v(state, bp, params)
    premise = member and v >= drift_premise_level(params)
    return _report("drift-bound", premise, drift_v(state, policy, params, bp),
                   drift_bound(params, bp), "exact", V=v, state=list(state.counts),
                   member=bool(member))


def drift_vector(edges, fractions: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``sum_{s'} q(s, s') (f(s') - f(s))`` for every state from an edge list."""
    rows, cols, rates = edges
    return np.bincount(rows, weights=rates * (values[cols] - values[rows]),
                       minlength=fractions.shape[0])


def check_drift_bound(space, policy: Policy, params: Params, bp: BoundParams,
                      edges=None) -> VerificationReport:
    """Exhaustive drift check over every state with ``V(s) >= 1/(4 N**alpha)``."""
    from .exact import transition_edges

    if edges is None:
        edges = transition_edges(space, policy, params)
    member = bool(policy.builtin and check_pi_membership(policy, params, bp.r).member)
    V = lyapunov_values(space.fractions, bp, params)
    dV = drift_vector(edges, space.fractions, V)
    mask = V >= drift_premise_level(params)
    bound = drift_bound(params, bp)
    n_checked = int(mask.sum())
    worst = float(dV[mask].max()) if n_checked else float("-inf")
    satisfied = None
    if member:
        satisfied = bool(worst <= bound)
    violations = np.flatnonzero(mask & (dV > bound))
    return VerificationReport(
        "drift-bound", member, worst, bound, satisfied, "exact",
        detail={"n_states": len(space), "n_checked": n_checked,
                "n_violations": int(violations.size),
                "first_violation": space.counts[violations[0]].tolist() if violations.size else None,
                "max_V": float(V.max())})


# ---------------------------------------------------------------------------
# tail probabilities


def ssc_tail(space, pi, bp: BoundParams, params: Params,
             threshold: Optional[float] = None) -> VerificationReport:
    """``Pr(V(S) >= 1/(2 N**alpha))`` from an exact distribution versus ``N**(-2r)``."""
    pi = getattr(pi, "pi", pi)
    level = 1.0 / (2.0 * params.N ** params.alpha) if threshold is None else threshold
    V = lyapunov_values(space.fractions, bp, params)
    lhs = float(pi[V >= level].sum())
    return _report("ssc-tail", excess_premise(params, bp.r), lhs,
                   float(params.N) ** (-2.0 * bp.r), "exact", threshold=level)


class PremiseError(ValueError):
    """A bound was requested outside the range where it is valid."""


@dataclass(frozen=True)
class TailBound:
    level: float
    bound: float
    q_max: float
    nu_max: float
    B: float
    gamma: float


def geometric_tail_bound(params: Params, bp: BoundParams, j: float) -> TailBound:
    """``Pr(V > B + 2 nu_max j) <= (q nu / (q nu + gamma))**(j + 1)``.

    Uses ``q_max = N``, ``nu_max = 1/N``, ``B = 1/(4 N**alpha)`` and
    ``gamma = (k - 1)/b * log N / N**(1-alpha)``.
    """
    if j < 0:
        raise ValueError("j must be nonnegative")
    if not _excess_scale(params) > 32.0 * bp.r * _logN(params):
        raise PremiseError(f"N**(1-alpha)/(32 log N) > r fails for N={params.N}, "
                           f"alpha={params.alpha}, r={bp.r}")
    N = params.N
    q_max, nu_max = float(N), 1.0 / N
    B = 1.0 / (4.0 * N ** params.alpha)
    gamma = (bp.k - 1.0) / params.b * _logN(params) / _excess_scale(params)
    base = q_max * nu_max / (q_max * nu_max + gamma)
    return TailBound(level=B + 2.0 * nu_max * j, bound=base ** (j + 1), q_max=q_max,
                     nu_max=nu_max, B=B, gamma=gamma)


def ssc_bound_chain(params: Params, bp: BoundParams) -> dict:
    """Numeric values of the inequality chain that turns the geometric bound into ``N**(-2r)``."""
    j = _excess_scale(params) / 8.0
    tb = geometric_tail_bound(params, bp, j)
    x = tb.gamma
    return {
        "j": j,
        "geometric": (1.0 / (1.0 + x)) ** j,
        "linearized": (1.0 - x / 2.0) ** j,
        "exponential": math.exp(-(bp.k - 1.0) * _logN(params) / (16.0 * params.b)),
        "target": float(params.N) ** (-2.0 * bp.r),
        "level": tb.level,
    }


# ---------------------------------------------------------------------------
# moment and rate bounds


def _provenance(metrics: MetricsEstimate) -> str:
    return "exact" if metrics.exact else "simulated"


def verify_excess_bound(metrics: MetricsEstimate, params: Params, bp: BoundParams) -> VerificationReport:
    """``E[h_k(sum S_i)**r] <= 10 (2r / N**(1-alpha))**r``."""
    if len(metrics.Eh) < bp.r:
        raise ValueError(f"metrics track moments up to {len(metrics.Eh)}, need r={bp.r}")
    if not math.isclose(metrics.kbar, bp.k, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"metrics use kbar={metrics.kbar}; the moment bound needs kbar = k = {bp.k}")
    rhs = 10.0 * (2.0 * bp.r / _excess_scale(params)) ** bp.r
    return _report("excess-moment", excess_premise(params, bp.r), metrics.Eh[bp.r - 1], rhs,
                   _provenance(metrics), se=float(metrics.Eh_se[bp.r - 1]), r=bp.r, k=bp.k)


def verify_derived_bounds(metrics: MetricsEstimate, params: Params, bp: BoundParams) -> list:
    r, k, N = bp.r, bp.k, params.N
    scale = _excess_scale(params)
    logN = _logN(params)
    prov = _provenance(metrics)
    tail = (3.0 * r / scale) ** (r / 2.0)
    es3 = float(metrics.ES[2]) if metrics.b >= 3 else 0.0
    es3_se = float(metrics.ES_se[2]) if metrics.b >= 3 else 0.0
    wait = waiting_premise(params, r)
    reports = [
        _report("level3-mean", s3_premise(params, bp), es3,
                20.0 * (3.0 * r / scale) ** r, prov, se=es3_se),
        _report("mean-wait", wait, metrics.EW, 4.0 * k * logN / scale, prov,
                se=metrics.EW_se),
        _report("wait-probability", wait, metrics.p_W, 20.0 * tail + 2.0 * k * logN / scale,
                prov, se=metrics.p_W_se),
        _report("busy-upper", True, N * metrics.ES[0], params.arrival_rate, prov,
                se=N * float(metrics.ES_se[0]), tol=EXACT_TOL * N),
        _report("busy-lower", wait, params.arrival_rate - 10.0 * N * tail,
                N * metrics.ES[0], prov, se=N * float(metrics.ES_se[0])),
    ]
    if metrics.b >= 2:
        reports.append(_report("level2-count", wait, N * metrics.ES[1],
                               10.0 * N * tail + 2.0 * k * N ** params.alpha * logN, prov,
                               se=N * float(metrics.ES_se[1])))
    return reports


# ---------------------------------------------------------------------------
# identities


def _identity_terms(ES, level, lam):
    """Both sides of each identity from mean tail fractions and arrival level shares."""
    ES = np.asarray(ES, dtype=float)
    level = np.asarray(level, dtype=float)
    b = ES.shape[-1]
    p_B = level[..., b]
    ahead = (np.arange(b) * level[..., :b]).sum(axis=-1)  # admitted share x mean jobs ahead
    out = {
        "work-conservation": (ES[..., 0], lam * (1.0 - p_B)),
        "little": (ES.sum(axis=-1), lam * (1.0 - p_B) + lam * ahead),
        "little-buffer": (ES[..., 1:].sum(axis=-1), lam * ahead),
    }
    if b >= 2:
        es3 = ES[..., 2] if b >= 3 else np.zeros_like(ES[..., 0])
        out["level3-balance"] = (es3, lam * level[..., 2:b].sum(axis=-1))
    return out


def verify_identities(source, policy: Policy, params: Params) -> list:
    """Level-3 balance, work conservation and both Little's-law forms.

    ``source`` is an exact :class:`MetricsEstimate` (checked to 1e-10) or a
    simulated one with per-batch data (checked to 3 standard errors).
    """
    m = source
    lam = params.lam
    if m.exact:
        terms = _identity_terms(m.ES, m.level_frac, lam)
        return [_equality(name, True, lhs, rhs, "exact") for name, (lhs, rhs) in terms.items()]
    if not m.batches:
        raise ValueError("simulated identities need per-batch data")
    point = _identity_terms(m.ES, m.level_frac, lam)
    per_batch = _identity_terms(m.batches["ES"], m.batches["level"], lam)
    out = []
    for name, (lhs, rhs) in point.items():
        bl, br = per_batch[name]
        se = float(batch_se(np.asarray(bl) - np.asarray(br)))
        out.append(_equality(name, True, lhs, rhs, "simulated", se=se))
    return out


def verify_stationarity(space, pi, policy: Policy, params: Params, bp: BoundParams,
                        edges=None) -> list:
    """``E[(G V)(S)] = 0`` and ``E[(G f)(S)] = 0`` for ``f = sum_{i>=3} s_i``."""
    from .exact import transition_edges

    pi = getattr(pi, "pi", pi)
    if edges is None:
        edges = transition_edges(space, policy, params)
    s = space.fractions
    V = lyapunov_values(s, bp, params)
    f = s[:, 2:].sum(axis=1)
    return [
        _equality("stationary-drift-V", True, float(pi @ drift_vector(edges, s, V)), 0.0, "exact"),
        _equality("stationary-drift-f", True, float(pi @ drift_vector(edges, s, f)), 0.0, "exact"),
    ]
