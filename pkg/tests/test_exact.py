import numpy as np
import pytest

from lbscaling.exact import (SolverError, build_generator, enumerate_states, exact_metrics,
                             export_pi_csv, solve, stationary_distribution)
from lbscaling.model import AggregateState, make_params
from lbscaling.policies import CapExceeded, Policy

import oracles


def test_small_spaces():
    sp = enumerate_states(make_params(2, 0.5, 1))
    assert [tuple(c) for c in sp.counts] == [(2, 0), (1, 1), (0, 2)]
    assert len(enumerate_states(make_params(4, 0.5, 3))) == 35
    with pytest.raises(CapExceeded):
        enumerate_states(make_params(50, 0.5, 3), cap=10 ** 4)


def test_index_roundtrip():
    sp = enumerate_states(make_params(7, 0.5, 3))
    for k in range(len(sp)):
        assert sp.index(sp.state(k)) == k


def test_random_generator_by_hand():
    p = make_params(2, 0.5, 1, lambda_override=0.3)
    Q = build_generator(enumerate_states(p), Policy.random(), p).toarray()
    lam = 0.3
    expected = np.array([[-2 * lam, 2 * lam, 0.0],
                         [1.0, -(1.0 + lam), lam],
                         [0.0, 2.0, -2.0]])
    assert np.allclose(Q, expected, atol=1e-15)


@pytest.mark.parametrize("policy", [Policy.jsq(), Policy.i1f(), Policy.jiq(), Policy.random(), Policy.pod(2)])
def test_rows_sum_to_zero(policy):
    p = make_params(9, 0.5, 3)
    Q = build_generator(enumerate_states(p), policy, p)
    assert np.max(np.abs(np.asarray(Q.sum(axis=1)))) <= 1e-12


def test_two_server_erlang_law():
    p = make_params(2, 0.5, 1, lambda_override=0.3)
    space, Q, st = solve(p, Policy.jsq())
    assert np.allclose(st.pi, np.array([1.0, 0.6, 0.18]) / 1.78, atol=1e-14)
    m = exact_metrics(space, st, Policy.jsq(), p)
    assert m.ES[0] == pytest.approx(0.48 / 1.78, abs=1e-14)
    assert m.p_B == pytest.approx(0.18 / 1.78, abs=1e-14)
    assert m.ES[0] == pytest.approx(0.3 * (1 - m.p_B), abs=1e-14)


@pytest.mark.parametrize("N", [2, 5, 10])
def test_random_one_slot_matches_independent_chain(N):
    p = make_params(N, 0.5, 1, lambda_override=0.7)
    space, _, st = solve(p, Policy.random())
    _, block = oracles.random_routing_b1(N, 0.7)
    assert exact_metrics(space, st, Policy.random(), p).p_B == pytest.approx(block, abs=1e-12)


def test_light_traffic():
    p = make_params(4, 0.5, 2, lambda_override=1e-6)
    space, _, st = solve(p, Policy.jsq())
    m = exact_metrics(space, st, Policy.jsq(), p)
    assert m.ES[0] == pytest.approx(1e-6, rel=1e-4)
    assert m.p_B < 1e-20


@pytest.mark.parametrize("name,policy,route", [
    ("jsq", Policy.jsq(), oracles.jsq_route),
    ("random", Policy.random(), oracles.random_route),
    ("pod2", Policy.pod(2), oracles.pod_route(2)),
])
@pytest.mark.parametrize("N,b", [(3, 2), (4, 2), (3, 3)])
def test_histogram_reduction_matches_brute_force(name, policy, route, N, b):
    p = make_params(N, 0.5, b)
    states, Qb = oracles.brute_force_generator(N, b, p.lam, route)
    space = enumerate_states(p)
    assert [tuple(c) for c in space.counts] == states
    Q = build_generator(space, policy, p).toarray()
    assert np.allclose(Q, Qb, atol=1e-13)
    pi = oracles.stationary_dense(Qb)
    _, _, st = solve(p, policy)
    assert np.allclose(st.pi, pi, atol=1e-12)


@pytest.mark.parametrize("policy", [Policy.jsq(), Policy.i1f(), Policy.random(), Policy.pod(2), Policy.jiq()])
def test_direct_and_power_agree(policy):
    p = make_params(8, 0.5, 3)
    space, Q, direct = solve(p, policy, method="direct")
    power = stationary_distribution(Q, method="power", uniformization=p.arrival_rate + p.N)
    assert 0.5 * np.abs(direct.pi - power.pi).sum() <= 1e-9
    assert direct.residual <= 1e-12 and power.residual <= 1e-12


def test_reducible_chain_is_rejected():
    import scipy.sparse as sp
    Q = sp.csr_matrix(np.array([[-1.0, 1.0, 0.0, 0.0], [1.0, -1.0, 0.0, 0.0],
                                [0.0, 0.0, -1.0, 1.0], [0.0, 0.0, 1.0, -1.0]]))
    with pytest.raises(SolverError):
        stationary_distribution(Q, method="direct")


def test_pi_export(tmp_path):
    p = make_params(2, 0.5, 1, lambda_override=0.3)
    space, _, st = solve(p, Policy.jsq())
    out = tmp_path / "pi.csv"
    export_pi_csv(space, st, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "n0,n1,probability"
    assert lines[1].startswith("2,0,") and len(lines) == 4


@pytest.mark.parametrize("d,replace", [(2, True), (3, True), (2, False), (4, False)])
@pytest.mark.parametrize("N,lam", [(5, 0.3), (10, 0.7)])
def test_pod_one_slot_matches_independent_chain(d, replace, N, lam):
    p = make_params(N, 0.5, 1, lambda_override=lam)
    pol = Policy.pod(d, replace=replace)
    space, _, st = solve(p, pol)
    assert exact_metrics(space, st, pol, p).p_B == pytest.approx(oracles.pod_b1(N, lam, d, replace), abs=1e-12)
