from __future__ import annotations

import math

import numpy as np
import pytest

from bufnet.dynamics import (InfeasibleStateError, drift, growth_rates, integrate, stationary_arrivals,
                             throughput_estimate)
from bufnet.equilibrium import find_equilibrium
from bufnet.generators import chain, fig1
from bufnet.model import build_model
from bufnet.network import UNBOUNDED, CommoditySpec, NetworkInstance, Node, constant, feasible_box
from bufnet.policies import constant_rate_policy


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_idle_network_drift_within_leakage(chain2, sbp):
    m = build_model(chain2.with_arrival_rate("1", 0.0), sbp)
    f = m.drift(np.zeros(m.n))
    assert np.all(np.abs(f) <= m.leakage_allowance() + 1e-15)
    assert np.abs(f).max() < 1e-2


def test_drift_zero_at_solver_equilibrium(chain2, sbp):
    cert = find_equilibrium(chain2, sbp)
    assert cert.found
    assert np.abs(drift(chain2, sbp, cert.q)).max() < 1e-10


def test_hub_drift_under_dominant_commodity(shared):
    # commodity 1 far upstream of K and far above zero at K: both alpha gates open
    m = build_model(fig1(3.0, 1.0), shared)
    idx = m.layout.index
    q = np.zeros(m.n)
    q[idx[("1", "1")]] = 40.0
    q[idx[("2", "2")]] = 0.0
    q[idx[("K", "1")]] = 5.5
    q[idx[("K", "2")]] = 0.2
    beta = _sigmoid(shared.a * (6.0 - shared.eps - 5.7))
    f = m.drift(q)
    want = 6.0 * beta - 2.0 * _sigmoid(shared.a * (5.5 - shared.eps))
    assert f[idx[("K", "1")]] == pytest.approx(want, rel=1e-9, abs=1e-12)
    assert f[idx[("K", "1")]] == pytest.approx(6.0 * beta - 2.0, abs=1e-9)


def test_drift_rejects_infeasible_state(chain2, sbp):
    with pytest.raises(InfeasibleStateError):
        drift(chain2, sbp, np.array([1.0, 6.0]))
    with pytest.raises(InfeasibleStateError):
        drift(chain2, sbp, np.array([-1.0, 0.0]))


def test_chain_converges_to_stationary_state(chain2, sbp):
    m = build_model(chain2, sbp)
    tr = integrate(m, None, np.zeros(2), 500.0, record_every=100)
    assert np.abs(m.drift(tr.final)).max() < 1e-6


def test_idle_origin_is_absorbing(chain2, sbp):
    tr = integrate(chain2.with_arrival_rate("1", 0.0), sbp, np.zeros(2), 50.0)
    assert np.abs(tr.states).max() < 1e-3


def test_fig1_excess_grows_linearly(shared):
    net = fig1(2.0)
    m = build_model(net, shared)
    tr = integrate(m, None, np.zeros(m.n), 1000.0, record_every=100)
    g = growth_rates(tr, 500.0)
    assert g[m.layout.index[("2", "2")]] == pytest.approx(0.5, abs=0.05)


def test_stable_throughput_equals_arrivals(chain2, sbp):
    tr = integrate(chain2, sbp, np.zeros(2), 1000.0, record_every=100)
    assert throughput_estimate(tr, "1", 500.0) == pytest.approx(1.0, abs=0.01)


@pytest.mark.parametrize("lam2,want,tol", [(3.0, 1.5, 0.05), (1.2, 1.2, 0.02)])
def test_fig1_throughput(shared, lam2, want, tol):
    m = build_model(fig1(lam2), shared)
    tr = integrate(m, None, np.zeros(m.n), 1000.0, record_every=100)
    assert throughput_estimate(tr, "2", 500.0) == pytest.approx(want, abs=tol)


def test_window_longer_than_trajectory_rejected(chain2, sbp):
    tr = integrate(chain2, sbp, np.zeros(2), 10.0)
    with pytest.raises(ValueError):
        throughput_estimate(tr, "1", 8.0)


def test_trajectory_stays_feasible(shared):
    net = fig1(3.0)
    m = build_model(net, shared)
    reg = feasible_box(net, cap=math.inf)
    tr = integrate(m, None, np.zeros(m.n), 200.0, record_every=10)
    assert all(reg.contains(q) for q in tr.states)


def test_divergence_cap_stops_run(shared):
    m = build_model(fig1(3.0), shared)
    tr = integrate(m, None, np.zeros(m.n), 1000.0, divergence_cap=50.0)
    assert tr.diverged and tr.t_end < 1000.0


def test_adaptive_agrees_with_fixed_step(chain2, sbp):
    a = integrate(chain2, sbp, np.zeros(2), 20.0, adaptive=True, rtol=1e-8)
    b = integrate(chain2, sbp, np.zeros(2), 20.0, h=0.001)
    assert np.allclose(a.final, b.final, atol=1e-5)


def test_python_path_matches_kernel_for_constant_like_rates(sbp):
    net = chain(2, lam=0.3)
    tr = integrate(net, constant_rate_policy(), np.zeros(2), 10.0, record_every=100)
    # constant rates: q1 drains at 0.3 - 1.0 but is clamped at zero; q2 gains 1.0 - 1.0
    assert tr.final[0] == 0.0
    assert tr.final[1] == pytest.approx(0.0, abs=1e-12)


def test_piecewise_arrivals_switch():
    net = NetworkInstance.build([Node("1", UNBOUNDED, 1.0)], [],
                                [CommoditySpec("1", {"1": ((0.0, 0.0), (5.0, 0.5))})])
    m = build_model(net, constant_rate_policy(0.0))
    tr = integrate(m, None, np.zeros(1), 10.0)
    # the last stage of the step ending at t=5 already sees the new rate
    assert tr.at(5.0)[0] == pytest.approx(0.0, abs=tr.h * 0.5)
    assert tr.final[0] == pytest.approx(2.5, abs=tr.h * 0.5)
    assert stationary_arrivals(m).tolist() == [0.5]


def test_csv_header(chain2, sbp):
    tr = integrate(chain2, sbp, np.zeros(2), 1.0, record_every=50)
    head = tr.to_csv().splitlines()[0].split(",")
    assert head[0] == "t" and head[-1] == "cum_egress_1" and len(head) == 4


def test_constant_policy_egress_counts():
    net = NetworkInstance.build([Node("1", UNBOUNDED, 2.0)], [], [CommoditySpec("1", {"1": constant(1.0)})])
    tr = integrate(net, constant_rate_policy(0.25), np.zeros(1), 10.0)
    assert tr.cum_egress[-1, 0] == pytest.approx(5.0, rel=1e-9)


def test_default_step_agrees_with_halved_step(chain2, sbp):
    m = build_model(chain2, sbp)
    a = integrate(m, None, np.zeros(m.n), 20.0)
    b = integrate(m, None, np.zeros(m.n), 20.0, h=a.h / 2)
    assert np.abs(a.states[-1] - b.states[-1]).max() < 1e-6
