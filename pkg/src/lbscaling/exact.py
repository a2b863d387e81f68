"""Exact stationary analysis of the aggregate chain for small N."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .metrics import MetricsEstimate, truncated_excess
from .model import AggregateState, ModelError, Params, enumerate_counts, tails_from_counts
from .policies import CapExceeded, Policy

DIRECT_MAX_STATES = 20_000


class SolverError(RuntimeError):
    """Stationary solve failed (reducible chain or no convergence)."""


@dataclass
class StateSpace:
    """All histograms for ``(N, b)`` in descending lexicographic order."""

    N: int
    b: int
    counts: np.ndarray
    tails: np.ndarray = field(repr=False)
    keys: np.ndarray = field(repr=False)
    _powers: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.counts.shape[0]

    @property
    def fractions(self) -> np.ndarray:
        """``s_1..s_b`` per state, shape ``(M, b)``."""
        return self.tails[:, 1:-1] / self.N

    def state(self, k: int) -> AggregateState:
        return AggregateState(tuple(int(c) for c in self.counts[k]))

    def index_of_keys(self, keys: np.ndarray) -> np.ndarray:
        # keys are strictly decreasing along the state order
        pos = np.searchsorted(-self.keys, -np.asarray(keys))
        if np.any(pos >= len(self)) or np.any(self.keys[np.minimum(pos, len(self) - 1)] != keys):
            raise KeyError("state not in space")
        return pos

    def index(self, state: AggregateState) -> int:
        key = int(np.dot(np.asarray(state.counts, dtype=np.int64), self._powers))
        return int(self.index_of_keys(np.array([key]))[0])


def enumerate_states(params: Params, cap: int = 10 ** 7) -> StateSpace:
    N, b = params.N, params.b
    size = math.comb(N + b, b)
    if size > cap:
        raise CapExceeded(f"state space for N={N}, b={b} has {size} states, above cap {cap}")
    if (N + 1) ** (b + 1) >= 2 ** 62:
        raise CapExceeded(f"state keys for N={N}, b={b} overflow 64-bit integers")
    counts = enumerate_counts(N, b)
    powers = (N + 1) ** np.arange(b, -1, -1, dtype=np.int64)
    return StateSpace(N=N, b=b, counts=counts, tails=tails_from_counts(counts),
                      keys=counts @ powers, _powers=powers)


def transition_edges(space: StateSpace, policy: Policy, params: Params):
    """Off-diagonal transitions as ``(rows, cols, rates)`` arrays.

    Blocked arrivals are self-loops and are left out.
    """
    if (space.N, space.b) != (params.N, params.b):
        raise ModelError("state space does not match params")
    N, b = space.N, space.b
    a = policy.a_rows(space.tails, N)
    if np.any(a < 0.0) or np.any(a > 1.0) or np.any(np.diff(a, axis=1) > 0.0):
        bad = int(np.flatnonzero((a < 0.0).any(1) | (a > 1.0).any(1)
                                 | (np.diff(a, axis=1) > 0.0).any(1))[0])
        raise ModelError(f"malformed routing probabilities {a[bad]} at {tuple(space.counts[bad])}")
    lamN = params.arrival_rate
    idx = np.arange(len(space))
    rows, cols, rates = [], [], []
    for i in range(1, b + 1):
        p = a[:, i - 1] - a[:, i]
        live = p > 0.0
        if np.any(live & (space.counts[:, i - 1] == 0)):
            raise ModelError(f"policy routes arrivals to an empty level {i - 1}")
        step = space._powers[i] - space._powers[i - 1]
        rows.append(idx[live])
        cols.append(space.index_of_keys(space.keys[live] + step))
        rates.append(lamN * p[live])
    for i in range(1, b + 1):
        live = space.counts[:, i] > 0
        step = space._powers[i - 1] - space._powers[i]
        rows.append(idx[live])
        cols.append(space.index_of_keys(space.keys[live] + step))
        rates.append(space.counts[live, i].astype(float))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(rates)


def build_generator(space: StateSpace, policy: Policy, params: Params) -> sp.csr_matrix:
    """Sparse rate matrix with zero row sums."""
    rows, cols, rates = transition_edges(space, policy, params)
    M = len(space)
    exit_rates = np.bincount(rows, weights=rates, minlength=M)
    Q = sp.coo_matrix((np.concatenate([rates, -exit_rates]),
                       (np.concatenate([rows, np.arange(M)]), np.concatenate([cols, np.arange(M)]))),
                      shape=(M, M)).tocsr()
    Q.sum_duplicates()
    Q.sort_indices()
    return Q


@dataclass
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    method: str
    iterations: int = 0


def _finish(pi: np.ndarray, Q, method: str, iterations: int = 0) -> StationaryDistribution:
    if not np.all(np.isfinite(pi)):
        raise SolverError("stationary solve produced non-finite values (reducible chain?)")
    if np.any(pi < -1e-13):
        raise SolverError(f"stationary solve produced negative mass {pi.min():.3e} (reducible chain?)")
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    residual = float(np.max(np.abs(Q.T @ pi)))
    return StationaryDistribution(pi=pi, residual=residual, method=method, iterations=iterations)


def stationary_distribution(Q, method: str = "auto", tol: float = 1e-12,
                            max_iter: int = 2_000_000, uniformization: Optional[float] = None
                            ) -> StationaryDistribution:
    """Solve ``pi Q = 0`` with ``sum(pi) = 1``.

    ``direct`` replaces one balance equation by the normalization and runs
    a sparse LU solve; ``power`` iterates the uniformized kernel
    ``I + Q / Lambda``. ``auto`` picks direct up to 20 000 states.
    ``uniformization`` defaults to the largest exit rate.
    """
    Q = sp.csr_matrix(Q)
    M = Q.shape[0]
    if method == "auto":
        method = "direct" if M <= DIRECT_MAX_STATES else "power"
    if method == "direct":
        A = sp.lil_matrix(Q.T)
        A[M - 1, :] = np.ones(M)
        rhs = np.zeros(M)
        rhs[-1] = 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                pi = spla.spsolve(A.tocsc(), rhs)
            except (spla.MatrixRankWarning, RuntimeError) as exc:
                raise SolverError(f"singular balance equations: {exc}") from exc
        out = _finish(pi, Q, "direct-solve")
    elif method == "power":
        lam = uniformization if uniformization is not None else float(np.max(-Q.diagonal()))
        QT = (Q.T / lam).tocsr()
        pi = np.full(M, 1.0 / M)
        it = 0
        while True:
            for _ in range(50):
                pi = pi + QT @ pi
            it += 50
            pi /= pi.sum()
            if np.max(np.abs(QT @ pi)) * lam <= tol:
                break
            if it >= max_iter:
                raise SolverError(f"power iteration did not reach tol={tol} in {max_iter} steps")
        out = _finish(pi, Q, "power-iteration", it)
    else:
        raise ValueError(f"unknown method {method!r}")
    if out.residual > tol:
        raise SolverError(f"residual {out.residual:.3e} above tol {tol:.1e}")
    return out


def solve(params: Params, policy: Policy, method: str = "auto", tol: float = 1e-12,
          cap: int = 10 ** 7):
    """Enumerate, build and solve in one call; returns ``(space, Q, stationary)``."""
    space = enumerate_states(params, cap)
    Q = build_generator(space, policy, params)
    lam = params.arrival_rate + params.N
    return space, Q, stationary_distribution(Q, method=method, tol=tol, uniformization=lam)


def exact_metrics(space: StateSpace, pi, policy: Policy, params: Params,
                  r_max: int = 1, kbar: Optional[float] = None) -> MetricsEstimate:
    """Stationary expectations under ``pi``; arrival metrics use PASTA."""
    if isinstance(pi, StationaryDistribution):
        info = {"method": pi.method, "residual": pi.residual}
        pi = pi.pi
    else:
        info = {}
    b, N = space.b, space.N
    if kbar is None:
        kbar = 32.0 * r_max * b + 1.0
    a = policy.a_rows(space.tails, N)
    s = space.fractions
    ES = pi @ s
    level = np.empty(b + 1)
    level[:b] = pi @ (a[:, :-1] - a[:, 1:])
    level[b] = pi @ a[:, b]
    p_B = float(level[b])
    p_W = float(pi @ a[:, 1])
    EW = float(np.arange(b) @ level[:b]) / (1.0 - p_B)
    h = truncated_excess(s.sum(axis=1), kbar, N, params.alpha)
    Eh = np.array([pi @ h ** r for r in range(1, r_max + 1)])
    zero = np.zeros
    info.update(n_states=len(space), EA2=float(pi @ a[:, 2]) if b >= 2 else 0.0,
                EAb=float(level[b]))
    return MetricsEstimate(ES=ES, ES_se=zero(b), level_frac=level, level_frac_se=zero(b + 1),
                           p_W=p_W, p_W_se=0.0, p_B=p_B, p_B_se=0.0, EW=EW, EW_se=0.0,
                           Eh=Eh, Eh_se=zero(r_max), kbar=float(kbar), exact=True, info=info)


def export_pi_csv(space: StateSpace, pi, path) -> None:
    """Write ``n0..nb,probability`` rows in state order."""
    if isinstance(pi, StationaryDistribution):
        pi = pi.pi
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"n{i}" for i in range(space.b + 1)] + ["probability"])
        for row, p in zip(space.counts, pi):
            w.writerow([int(c) for c in row] + [repr(float(p))])
