import math

import numpy as np
import pytest

from lbscaling.analysis import verify_identities
from lbscaling.exact import exact_metrics, solve
from lbscaling.model import make_params
from lbscaling.policies import Policy
from lbscaling.simulator import (SimConfig, SimulationError, SimulationRun, cross_check_modes,
                                 default_warmup, estimated_events, simulate, simulate_sweep)

import oracles


def within(est, se, truth, k=3.0):
    return abs(est - truth) <= k * se


def test_single_server_loss():
    p = make_params(1, 0.5, 1, lambda_override=0.3)
    m = simulate(Policy.random(), p, SimConfig(seed=11, warmup=50, horizon=40_000))
    assert within(m.p_B, m.p_B_se, 0.3 / 1.3)
    assert m.p_B == pytest.approx(oracles.erlang_b(1, 0.3), abs=3 * m.p_B_se)


def test_small_jsq_matches_exact():
    p = make_params(4, 0.5, 2)
    space, _, st = solve(p, Policy.jsq())
    ex = exact_metrics(space, st, Policy.jsq(), p)
    m = simulate(Policy.jsq(), p, SimConfig(seed=5, warmup=100, horizon=40_000))
    for i in range(2):
        assert within(m.ES[i], m.ES_se[i], ex.ES[i])
    assert within(m.p_B, m.p_B_se, ex.p_B)


def test_determinism():
    p = make_params(20, 0.75, 3)
    cfg = SimConfig(seed=123, warmup=20, horizon=500)
    a = simulate(Policy.pod(2), p, cfg)
    b = simulate(Policy.pod(2), p, cfg)
    assert a.fingerprint() == b.fingerprint()
    c = simulate(Policy.pod(2), p, SimConfig(seed=124, warmup=20, horizon=500))
    assert c.fingerprint() != a.fingerprint()


@pytest.mark.parametrize("mode", ["aggregate", "per-server"])
def test_split_run_is_identical(mode):
    p = make_params(12, 0.5, 3)
    cfg = SimConfig(seed=9, warmup=10, horizon=300, mode=mode)
    whole = SimulationRun(Policy.jsq(), p, cfg)
    whole.advance()
    parts = SimulationRun(Policy.jsq(), p, cfg)
    for t in (3.3, 10.0, 57.1, 123.4, 299.99):
        parts.advance(t)
    parts.advance()
    assert whole.estimate().fingerprint() == parts.estimate().fingerprint()


def test_event_accounting():
    p = make_params(6, 0.5, 2)
    m = simulate(Policy.random(), p, SimConfig(seed=2, warmup=10, horizon=2000))
    info = m.info
    assert info["arrivals"] + info["departures"] == m.events
    assert info["admitted"] + info["blocked"] == info["post_warmup_arrivals"]
    assert info["warmup_default"] is False


def test_defaults_reported():
    p = make_params(4, 0.5, 1)
    m = simulate(Policy.jsq(), p, SimConfig(seed=1))
    assert m.info["warmup"] == default_warmup(p) == 10.0
    assert m.info["horizon"] == 200.0 and m.info["warmup_default"]


def test_flow_balance_and_little():
    p = make_params(100, 0.5, 3)
    m = simulate(Policy.pod(2), p, SimConfig(seed=4, warmup=50, horizon=2000))
    for rep in verify_identities(m, Policy.pod(2), p):
        assert rep.satisfied, rep


def test_config_validation():
    p = make_params(4, 0.5, 2)
    with pytest.raises(SimulationError):
        simulate(Policy.jsq(), p, SimConfig(seed=1, warmup=10, horizon=5))
    with pytest.raises(SimulationError):
        simulate(Policy.jsq(), p, SimConfig(seed=1, batches=1))
    with pytest.raises(SimulationError):
        simulate(Policy.jsq(), p, SimConfig(seed=1, warmup=0, horizon=1e-6))


def test_explicit_initial_state():
    p = make_params(4, 0.5, 2)
    run = SimulationRun(Policy.jsq(), p, SimConfig(seed=1, warmup=1, horizon=100, init=(0, 0, 4)))
    assert list(run.m) == [4, 4, 4, 0]


def sweep_points():
    cfg = SimConfig(seed=0, warmup=10, horizon=200)
    return [(Policy.jsq(), make_params(10, 0.5, 3), cfg),
            (Policy.pod(2), make_params(20, 0.5, 3), cfg),
            (Policy.i1f(), make_params(30, 0.75, 2), cfg)]


def test_sweep_independent_of_workers():
    one = simulate_sweep(sweep_points(), master_seed=77, workers=1)
    many = simulate_sweep(sweep_points(), master_seed=77, workers=8)
    assert [r.estimate.fingerprint() for r in one] == [r.estimate.fingerprint() for r in many]
    # points draw from distinct streams
    assert len({r.estimate.fingerprint() for r in one}) == 3


def test_sweep_isolates_errors():
    pts = sweep_points()
    pts.insert(1, (None, make_params(10, 0.5, 3), SimConfig(seed=0)))
    res = simulate_sweep(pts, master_seed=77)
    assert [r.ok for r in res] == [True, False, True, True]
    good = simulate_sweep(sweep_points(), master_seed=77)
    # stream index shifts for later points, but the first point is unchanged
    assert res[0].estimate.fingerprint() == good[0].estimate.fingerprint()


@pytest.mark.parametrize("policy", [Policy.jsq(), Policy.pod(2)])
def test_modes_agree(policy):
    p = make_params(10, 0.5, 3)
    cc = cross_check_modes(policy, p, SimConfig(seed=31, warmup=50, horizon=20_000))
    assert cc.agree, cc.z


def test_modes_agree_on_single_slot_random():
    p = make_params(2, 0.5, 1)
    cc = cross_check_modes(Policy.random(), p, SimConfig(seed=8, warmup=50, horizon=40_000))
    assert cc.agree, cc.z
    space, _, st = solve(p, Policy.random())
    exact = exact_metrics(space, st, Policy.random(), p).p_B
    _, closed = oracles.random_routing_b1(2, p.lam)
    assert exact == pytest.approx(closed, abs=1e-14)
    for m in (cc.aggregate, cc.per_server):
        assert within(m.p_B, m.p_B_se, exact)


def test_without_replacement_per_server():
    p = make_params(10, 0.5, 3)
    cc = cross_check_modes(Policy.pod(3, replace=False), p, SimConfig(seed=3, warmup=50, horizon=20_000))
    assert cc.agree, cc.z


def test_realized_wait_matches_jobs_ahead():
    p = make_params(10, 0.75, 3)
    space, _, st = solve(p, Policy.random())
    ex = exact_metrics(space, st, Policy.random(), p)
    m = simulate(Policy.random(), p, SimConfig(seed=12, warmup=50, horizon=20_000, mode="per-server"))
    assert within(m.EW, m.EW_se, ex.EW)


def test_event_estimate():
    p = make_params(1000, 0.5, 3)
    assert estimated_events(p, SimConfig(seed=0, warmup=10, horizon=110)) == pytest.approx(2 * p.lam * 1000 * 110)
