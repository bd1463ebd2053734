from __future__ import annotations

import math

import numpy as np
import pytest

from bufnet.generators import chain, fig1
from bufnet.model import build_model
from bufnet.network import UNBOUNDED, CommoditySpec, Link, NetworkInstance, Node, constant
from bufnet.policies import (DEFAULT_A, Family, PolicyError, buffer_occupancy, check_pointwise_condition,
                             constant_rate_policy, custom_policy, default_eps, discrete_limit_gap,
                             policy_from_config, shared_buffer_backpressure, smooth_backpressure)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_default_offset():
    assert smooth_backpressure().eps == pytest.approx(1 / math.sqrt(DEFAULT_A))
    assert default_eps(100.0) == pytest.approx(0.1)


def test_backpressure_half_rate_at_offset(sbp):
    lp = sbp.bind(3.0, UNBOUNDED)
    assert lp(2.0 + sbp.eps, 2.0) == pytest.approx(1.5, abs=1e-12)


def test_backpressure_saturates_to_capacity(sbp):
    lp = sbp.bind(2.0, 10.0)
    assert lp(10.0, 0.0) == pytest.approx(2.0, abs=1e-9)


def test_backpressure_closes_at_full_buffer(sbp):
    lp = sbp.bind(2.0, 5.0)
    assert lp(50.0, 5.0) <= _sigmoid(-sbp.a * sbp.eps) * 2.0 + 1e-15


def test_backpressure_matches_formula(sbp, rng):
    lp = sbp.bind(1.7, 6.0)
    a, e = sbp.a, sbp.eps
    for qi, qj in rng.uniform(0, 6, (50, 2)):
        want = _sigmoid(a * (qi - qj - e)) * _sigmoid(a * (6.0 - e - qj)) * 1.7
        assert lp(qi, qj) == pytest.approx(want, rel=1e-12, abs=1e-300)


def test_buffer_occupancy_examples():
    lp = buffer_occupancy().bind(2.0, 8.0)
    assert lp(50.0, 0.0) == pytest.approx(2.0, abs=1e-12)
    assert lp(50.0, 8.0) == 0.0
    assert lp(50.0, 4.0) == pytest.approx(1.0, abs=1e-12)


def test_buffer_occupancy_rejects_unbounded():
    with pytest.raises(PolicyError):
        buffer_occupancy().bind(1.0, UNBOUNDED)
    with pytest.raises(PolicyError):
        build_model(chain(2), buffer_occupancy())


@pytest.mark.parametrize("a,eps", [(0.0, 0.1), (-1.0, 0.1), (10.0, 0.0), (10.0, -0.5)])
def test_bad_smoothing_rejected(a, eps):
    with pytest.raises(PolicyError):
        smooth_backpressure(a, eps)


def test_rates_bounded_by_capacity(rng):
    for pol in (smooth_backpressure(), buffer_occupancy()):
        lp = pol.bind(2.5, 7.0)
        for qi, qj in rng.uniform(0, 7, (200, 2)):
            assert 0.0 <= lp(qi, qj) <= 2.5


def test_empty_source_barely_transmits(sbp):
    lp = sbp.bind(2.0, UNBOUNDED)
    assert lp(0.0, 0.0) <= _sigmoid(-sbp.a * sbp.eps) * 2.0


def test_analytic_partials_match_finite_differences(rng):
    for pol in (smooth_backpressure(), buffer_occupancy()):
        lp = pol.bind(2.0, 6.0)
        h = 1e-6
        for qi, qj in rng.uniform(0.5, 5.5, (30, 2)):
            p = lp.partials(qi, qj)
            fi = (lp(qi + h, qj) - lp(qi - h, qj)) / (2 * h)
            fj = (lp(qi, qj + h) - lp(qi, qj - h)) / (2 * h)
            assert p.dgi == pytest.approx(fi, rel=1e-5, abs=1e-7)
            assert p.dgj == pytest.approx(fj, rel=1e-5, abs=1e-7)


def test_custom_policy_falls_back_to_finite_differences():
    pol = custom_policy(lambda qi, qj, c, b: c * math.tanh(max(qi - qj, 0.0)), lambda qi, mu: mu * math.tanh(qi))
    p = pol.bind(2.0, 5.0).partials(1.0, 0.5)
    assert p.method == "finite-difference"
    assert p.dgi == pytest.approx(2.0 / math.cosh(0.5) ** 2, rel=1e-6)


def test_shared_gate_closes_when_hub_full(shared):
    m = build_model(fig1(1.0, 1.0), shared)
    idx = m.layout.index
    q = np.zeros(m.n)
    q[idx[("1", "1")]] = 30.0
    q[idx[("2", "2")]] = 30.0
    q[idx[("K", "1")]] = 3.0
    q[idx[("K", "2")]] = 3.0
    terms = m.link_terms(q)
    assert np.all(terms[:, 0] <= 6.0 * _sigmoid(-shared.a * shared.eps) + 1e-15)


def test_shared_family_reduces_to_backpressure_for_one_commodity(rng):
    net = chain(3, lam=0.7, buffers=[UNBOUNDED, 4.0, 6.0])
    a = build_model(net, smooth_backpressure())
    b = build_model(net, shared_buffer_backpressure())
    for q in rng.uniform(0, 4, (30, 3)):
        assert np.array_equal(a.drift(q), b.drift(q))


def test_pointwise_condition_passes_for_backpressure(sbp, rng):
    net = chain(3, buffers=[UNBOUNDED, 4.0, 6.0])
    for q in rng.uniform(0, 4, (50, 3)):
        assert check_pointwise_condition(sbp, net, q).passed


def test_pointwise_condition_fails_for_constant_policy():
    net = chain(2)
    v = check_pointwise_condition(constant_rate_policy(), net, np.array([1.0, 0.5]))
    assert not v.passed
    assert v.min_dgi == 0.0 and v.min_neg_dgj == 0.0 and v.max_egress == 0.0


def test_deep_saturation_sign_is_witnessed(sbp):
    # partials underflow to zero far from the switching point
    net = chain(2, buffers=[UNBOUNDED, 5.0])
    v = check_pointwise_condition(sbp, net, np.array([90.0, 0.1]))
    assert v.passed


def test_limit_gap_shrinks():
    r = discrete_limit_gap(Family.SMOOTH_BACKPRESSURE, [10, 100, 1000], 2.0, 1.0)
    assert not r.switching_surface and r.monotone
    assert r.gaps[-1].gap < 1e-6


def test_limit_gap_non_transmitting_side():
    r = discrete_limit_gap("smooth-backpressure", [10, 100, 1000], 1.0, 2.0)
    assert all(g.hard == 0.0 for g in r.gaps)
    assert r.monotone and r.gaps[-1].gap < 1e-12


def test_limit_gap_flags_switching_surface():
    r = discrete_limit_gap("smooth-backpressure", [10, 100], 1.0, 1.0)
    assert r.switching_surface and not r.gaps


def test_policy_from_config():
    pol = policy_from_config({"family": "buffer-occupancy", "a": 20})
    assert pol.family is Family.BUFFER_OCCUPANCY and pol.eps == pytest.approx(1 / math.sqrt(20))
    assert policy_from_config({"family": "constant"}).family is Family.CUSTOM
    with pytest.raises(PolicyError):
        policy_from_config({"family": "nope"})
