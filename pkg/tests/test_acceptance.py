"""Acceptance criteria, one test per criterion (criterion 1 is split per policy).

Each test records a one-line PASS/FAIL verdict; the lines are printed in the
terminal summary (see conftest.py). Criteria 9 and 10 are long-running and
need ``--runslow``. Running this file as a script prints the same lines.
"""
import math
import time

import numpy as np
import pytest

from lbscaling.analysis import (check_drift_bound, make_bound_params, verify_excess_bound,
                                verify_identities, verify_stationarity)
from lbscaling.exact import build_generator, enumerate_states, exact_metrics, solve
from lbscaling.model import make_params
from lbscaling.policies import Policy, check_pi_membership
from lbscaling.simulator import SimConfig, simulate

import oracles

VERDICTS = []

BUILTINS = {
    "jsq": Policy.jsq(), "i1f": Policy.i1f(), "jiq": Policy.jiq(), "random": Policy.random(),
    "pod2": Policy.pod(2), "pod2-norep": Policy.pod(2, replace=False),
}
GRID_POLICIES = {k: BUILTINS[k] for k in ("jsq", "i1f", "pod2", "jiq", "random")}


def verdict(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------

@pytest.mark.parametrize("name", list(BUILTINS))
def test_c01_erlang_b(name):
    t0 = time.perf_counter()
    policy = BUILTINS[name]
    worst, where = 0.0, None
    for lam in (0.3, 0.7):
        for N in (2, 5, 10):
            p = make_params(N, 0.5, 1, lambda_override=lam)
            space, _, st = solve(p, policy)
            err = abs(exact_metrics(space, st, policy, p).p_B - oracles.erlang_b(N, N * lam))
            if err > worst:
                worst, where = err, (N, lam)
    dt = time.perf_counter() - t0
    verdict(f"1[{name}]", worst <= 1e-10 and dt < 1.0,
            f"max |p_B - ErlangB| = {worst:.3e} at (N, lambda) = {where}, {dt:.2f}s")


# 2, 3 and 7 share the exact grid -------------------------------------------

_EXACT = {}


def exact_instance(name, N, b=3, lam=None):
    key = (name, N, b, lam)
    if key not in _EXACT:
        policy = BUILTINS[name]
        p = make_params(N, 0.5, b, lambda_override=lam)
        space, _, st = solve(p, policy)
        _EXACT[key] = (policy, p, space, st, exact_metrics(space, st, policy, p))
    return _EXACT[key]


def test_c02_level3_balance():
    t0 = time.perf_counter()
    worst = 0.0
    for name in GRID_POLICIES:
        for N in (4, 6, 8):
            policy, p, space, st, m = exact_instance(name, N)
            rep = [r for r in verify_identities(m, policy, p) if r.claim == "level3-balance"][0]
            # independent evaluation of lam E[A_2 - A_b] from the routing rows
            a = policy.a_rows(space.tails, N)
            rhs = p.lam * float(st.pi @ (a[:, 2] - a[:, 3]))
            worst = max(worst, abs(m.ES[2] - rhs), abs(rep.lhs - rep.rhs))
    dt = time.perf_counter() - t0
    verdict(2, worst <= 1e-10 and dt < 5.0, f"max residual {worst:.3e}, {dt:.2f}s")


def test_c03_conservation_and_little_exact():
    worst = 0.0
    for name in GRID_POLICIES:
        for N in (4, 6, 8):
            policy, p, space, st, m = exact_instance(name, N)
            for r in verify_identities(m, policy, p):
                if r.claim != "level3-balance":
                    worst = max(worst, abs(r.lhs - r.rhs))
    verdict("3[exact]", worst <= 1e-10, f"max residual {worst:.3e}")


def test_c03_conservation_and_little_simulated():
    bad, n = [], 0
    for N in (100, 1000):
        p = make_params(N, 0.5, 3)
        for i, (name, policy) in enumerate(GRID_POLICIES.items()):
            m = simulate(policy, p, SimConfig(seed=2024, stream=i, warmup=100, horizon=2100))
            for r in verify_identities(m, policy, p):
                if r.claim == "level3-balance":
                    continue
                n += 1
                if abs(r.lhs - r.rhs) > 3 * r.se:
                    bad.append(f"{name}/N={N}/{r.claim} z={(r.lhs - r.rhs) / r.se:.2f}")
    verdict("3[simulated]", not bad, f"{n - len(bad)}/{n} within 3 SE {bad}")


# 4 -------------------------------------------------------------------------

def same_matrix(A, B):
    return (A.shape == B.shape and np.array_equal(A.indptr, B.indptr)
            and np.array_equal(A.indices, B.indices) and np.array_equal(A.data, B.data))


def test_c04_policy_equivalences():
    bad, n = [], 0
    for N in range(2, 9):
        for b in (1, 2, 3):
            p = make_params(N, 0.5, b)
            space = enumerate_states(p)
            pairs = ((Policy.pod(1), Policy.random(), "pod1=random"),
                     (Policy.pod(N, replace=False), Policy.jsq(), "podN-norep=jsq"))
            for x, y, label in pairs:
                n += 1
                if not same_matrix(build_generator(space, x, p), build_generator(space, y, p)):
                    bad.append(f"{label} N={N} b={b}")
    verdict(4, not bad, f"{n - len(bad)}/{n} generator pairs bit-identical {bad}")


# 5 -------------------------------------------------------------------------

def test_c05_simulator_matches_exact():
    p = make_params(8, 0.5, 3)
    bad, n, reruns = [], 0, []
    for i, name in enumerate(("jsq", "pod2")):
        policy, _, space, st, _ = exact_instance(name, 8)
        ex = exact_metrics(space, st, policy, p, kbar=97.0)
        cfg = SimConfig(seed=5, stream=i, warmup=1000, horizon=200_000)
        m = simulate(policy, p, cfg)
        reruns.append(m.fingerprint() == simulate(policy, p, cfg).fingerprint())
        for key, (v, se) in m.scalar_metrics().items():
            truth = ex.scalar_metrics()[key][0]
            n += 1
            if abs(v - truth) > 3 * se and v != truth:
                bad.append(f"{name}/{key} z={(v - truth) / se if se else math.inf:.2f}")
    verdict(5, not bad and all(reruns),
            f"{n - len(bad)}/{n} metrics within 3 SE {bad}; byte-identical reruns {reruns}")


# 6 -------------------------------------------------------------------------

def test_c06_drift_bound_exhaustive():
    t0 = time.perf_counter()
    parts, ok = [], True
    for N in (16, 64):
        p = make_params(N, 0.5, 3)
        bp = make_bound_params(1, p)
        space = enumerate_states(p)
        for name in ("jsq", "i1f"):
            rep = check_drift_bound(space, BUILTINS[name], p, bp)
            ok &= rep.satisfied is True
            parts.append(f"{name}/N={N}: {rep.detail['n_checked']} of {rep.detail['n_states']} "
                         f"states meet V >= 1/(4N^a), violations {rep.detail['n_violations']}")
    dt = time.perf_counter() - t0
    verdict(6, ok and dt < 60, "; ".join(parts) + f"; {dt:.2f}s")


# 7 -------------------------------------------------------------------------

def test_c07_stationary_drifts():
    worst, n = 0.0, 0
    instances = [(name, N, 3, None) for name in GRID_POLICIES for N in (4, 6, 8)]
    instances += [(name, N, 1, lam) for name in BUILTINS for N in (2, 5, 10) for lam in (0.3, 0.7)]
    for key in instances:
        policy, p, space, st, _ = exact_instance(*key)
        for r in verify_stationarity(space, st, policy, p, make_bound_params(1, p)):
            worst = max(worst, abs(r.lhs))
            n += 1
    verdict(7, worst <= 1e-10, f"max |E[GV]|, |E[Gf]| over {n} checks = {worst:.3e}")


# 8 -------------------------------------------------------------------------

def test_c08_membership():
    N, alpha = 10 ** 6, 0.5
    p = make_params(N, alpha, 3)
    d = math.ceil(N ** alpha * math.log(N) ** 2)
    reps = {name: check_pi_membership(pol, p, 1) for name, pol in
            (("jsq", Policy.jsq()), ("i1f", Policy.i1f()), (f"pod{d}", Policy.pod(d)),
             ("random", Policy.random()), ("jiq", Policy.jiq()))}
    ok = (reps["jsq"].member and reps["i1f"].member and reps[f"pod{d}"].member
          and not reps["random"].member and not reps["random"].cond1.holds
          and reps["random"].cond1.witness is not None
          and not reps["jiq"].member and not reps["jiq"].cond2.holds
          and reps["jiq"].cond2.witness is not None)
    verdict(8, ok, ", ".join(f"{k}={v.member}" for k, v in reps.items())
            + f"; random cond1 witness {reps['random'].cond1.witness.counts}"
            + f"; jiq cond2 witness {reps['jiq'].cond2.witness.counts}")


# 9 -------------------------------------------------------------------------

def fig_config(N, alpha, seed):
    """Run lengths in units of the relaxation time tau = max(1, N**(2 alpha - 1)).

    At alpha = 1 tau is about N, so the N = 1e5 point costs about 2e10
    events per tau; it starts half-way up the buffer to shorten warm-up.
    """
    tau = max(1.0, N ** (2 * alpha - 1))
    if alpha == 0.5:
        warmup, measure = 100.0, 5000.0
    elif alpha == 0.75:
        warmup, measure = 2 * tau, 40 * tau
    else:
        warmup, measure = 0.5 * tau, {1000: 100, 10000: 20, 100000: 4}[N] * tau
    init = (0, N // 2, N - N // 2, 0) if alpha == 1.0 else "empty"
    return SimConfig(seed=seed, warmup=warmup, horizon=warmup + measure, init=init)


@pytest.mark.slow
def test_c09_scaling_is_flat():
    lines, ok = [], True
    es3_n = None
    for i, alpha in enumerate((0.5, 0.75, 1.0)):
        scaled = []
        for j, N in enumerate((10 ** 3, 10 ** 4, 10 ** 5)):
            p = make_params(N, alpha, 3)
            cfg = fig_config(N, alpha, seed=7)
            t0 = time.perf_counter()
            m = simulate(Policy.jsq(), p, SimConfig(**{**cfg.__dict__, "stream": 3 * i + j}))
            s = N ** (1 - alpha)
            scaled.append(s * m.ES[1])
            print(f"  alpha={alpha} N={N}: N^(1-a)E[S2]={s * m.ES[1]:.4f} +- {s * m.ES_se[1]:.4f}, "
                  f"N E[S3]={N * m.ES[2]:.4g}, events={m.events:.3g}, {time.perf_counter() - t0:.0f}s",
                  flush=True)
            if alpha == 0.5 and N == 10 ** 5:
                es3_n = N * m.ES[2]
        ratio = max(scaled) / min(scaled)
        ok &= ratio < 2
        lines.append(f"alpha={alpha}: max/min={ratio:.3f} ({', '.join(f'{x:.3f}' for x in scaled)})")
    ok &= es3_n < 1
    verdict(9, ok, "; ".join(lines) + f"; N E[S3] at N=1e5, alpha=0.5: {es3_n:.4g}")


# 10 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_excess_moment_bound():
    p = make_params(10 ** 6, 0.5, 3)
    bp = make_bound_params(1, p)
    m = simulate(Policy.jsq(), p, SimConfig(seed=10, warmup=50, horizon=550, kbar=bp.k))
    rep = verify_excess_bound(m, p, bp)
    ok = rep.premise_holds and rep.satisfied and m.Eh[0] <= 10 * 2 / math.sqrt(p.N) + 3 * m.Eh_se[0]
    verdict(10, bool(ok), f"E[h_k] = {rep.lhs:.3e} (SE {rep.se:.1e}) vs bound {rep.rhs:.3e}; "
                          f"premise {rep.premise_holds}; events {m.events:.3g}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "--runslow"] + sys.argv[1:]))
