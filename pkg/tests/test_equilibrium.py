from __future__ import annotations

import numpy as np
import pytest

from bufnet.casestudy import OneHopSharedConfig
from bufnet.equilibrium import (BOX_CERTIFIED, CERTIFIED, DIVERGED, FAILED, FOUND, NOT_FOUND,
                                BoxConstructionError, BoxRegion, BracketError, certify_box,
                                construct_backpressure_box, default_margin, existence_sweep, find_equilibrium,
                                natural_residual, newton, per_commodity_box, verify_poincare_miranda)
from bufnet.generators import chain, fig1
from bufnet.model import build_model
from bufnet.network import (PER_COMMODITY, UNBOUNDED, CommoditySpec, Link, NetworkInstance, Node, constant,
                            overloaded_sources)


def test_idle_network_equilibrium_at_origin(chain2, sbp):
    cert = find_equilibrium(chain2.with_arrival_rate("1", 0.0), sbp)
    assert cert.status == FOUND and cert.residual < 1e-10
    assert np.abs(cert.q).max() < 1e-6


def test_chain_equilibrium_balances_flow(sbp):
    net = chain(2, lam=1.0, c=2.0, mu=2.0, buffers=[UNBOUNDED, 5.0])
    cert = find_equilibrium(net, sbp)
    assert cert.status == FOUND and cert.residual < 1e-10
    q1, q2 = cert.q
    assert sbp.bind(2.0, 5.0)(q1, q2) == pytest.approx(1.0, abs=1e-10)
    assert sbp.egress_rate(q2, 2.0) == pytest.approx(1.0, abs=1e-10)


def test_fig1_subsystem_above_threshold_has_no_equilibrium(shared):
    net = fig1(2.0)
    cert = find_equilibrium(net, shared, saturated=overloaded_sources(net), starts=3)
    assert cert.status in (NOT_FOUND, DIVERGED)
    assert cert.status == DIVERGED
    assert cert.growth is not None and cert.growth.max() == pytest.approx(0.5, abs=0.05)


def test_overloaded_chain_diverges(sbp):
    cert = find_equilibrium(chain(2, lam=3.0, mu=2.0), sbp, starts=2)
    assert cert.status == DIVERGED and cert.evidence == "no equilibrium (evidence)"


def test_newton_natural_residual_at_root(chain2, sbp):
    m = build_model(chain2, sbp)
    res = newton(m, np.array([2.0, 1.0]))
    assert res.converged and np.abs(natural_residual(m, res.q)).max() < 1e-10


def test_scalar_poincare_miranda():
    cert = verify_poincare_miranda(lambda q: 1.0 - q, BoxRegion([0.0], [2.0]))
    assert cert.status == CERTIFIED and cert.label == "sampled evidence"


def test_poincare_miranda_witness():
    cert = verify_poincare_miranda(lambda q: 3.0 - q, BoxRegion([0.0], [2.0]))
    assert cert.status == FAILED
    assert cert.witness["face"] == "upper" and cert.witness["f_i"] == pytest.approx(1.0)


def test_degenerate_box_is_exact_face():
    cert = verify_poincare_miranda(lambda q: np.array([0.0, 1.0 - q[1]]), BoxRegion([1.0, 0.0], [1.0, 2.0]))
    assert cert.status == CERTIFIED


def test_poincare_miranda_lhs_budget(sbp):
    net = chain(6, buffers=[UNBOUNDED] + [20.0] * 5)
    box = construct_backpressure_box(net, sbp)
    cert = verify_poincare_miranda(build_model(net, sbp), box, max_samples=600)
    assert cert.sampler == "lhs" and cert.samples == 600
    assert cert.certified


def test_chain_box_ordering(sbp):
    net = chain(2, buffers=[UNBOUNDED, 10.0])
    box = construct_backpressure_box(net, sbp)
    assert box.upper[0] > box.upper[1]
    assert box.upper[1] <= 10.0 - default_margin(10.0)
    assert box.lower.tolist() == [0.0, 0.0]


def test_chain_box_certified(sbp):
    net = chain(3, lam=0.8, buffers=[UNBOUNDED, 6.0, 6.0])
    box = construct_backpressure_box(net, sbp)
    assert verify_poincare_miranda(build_model(net, sbp), box).certified


def test_single_egress_node_box(sbp):
    net = NetworkInstance.build([Node("1", UNBOUNDED, 2.0)], [], [CommoditySpec("1", {"1": constant(1.5)})])
    box = construct_backpressure_box(net, sbp)
    m = build_model(net, sbp)
    assert m.drift(box.lower)[0] >= 0 and m.drift(box.upper)[0] <= 0


def test_capacity_violation_names_node(sbp):
    net = chain(3, lam=0.5, c=2.0, mu=1.0, buffers=[UNBOUNDED, 6.0, 6.0])
    with pytest.raises(BoxConstructionError, match="node 2"):
        construct_backpressure_box(net, sbp)


def test_buffer_too_small_for_box(sbp):
    net = chain(3, buffers=[UNBOUNDED, 1.5, 6.0])
    with pytest.raises(BoxConstructionError, match="box construction infeasible"):
        construct_backpressure_box(net, sbp)


def test_certify_box_newton_inside(sbp):
    net = chain(4, lam=1.0, buffers=[UNBOUNDED, 8.0, 8.0, 8.0])
    cert = certify_box(net, sbp)
    assert cert.status == BOX_CERTIFIED and cert.found
    assert cert.box.contains(cert.q) and not cert.notes


def _two_commodity_net(shared_link: bool, mode: str):
    nodes = [Node("a"), Node("b"), Node("x", 8.0), Node("y", 8.0), Node("T", 8.0, 3.0)]
    if shared_link:
        links = [Link("a", "x", 2.0), Link("b", "x", 2.0), Link("x", "T", 5.0)]
        alloc = {"x": 4.0, "T": 4.0}
    else:
        links = [Link("a", "x", 2.0), Link("b", "y", 2.0), Link("x", "T", 2.0), Link("y", "T", 2.0)]
        alloc = {"x": 4.0, "y": 4.0, "T": 4.0}
    coms = [CommoditySpec("1", {"a": constant(0.4)}, mode, alloc if mode == PER_COMMODITY else None),
            CommoditySpec("2", {"b": constant(0.3)}, mode, alloc if mode == PER_COMMODITY else None)]
    return NetworkInstance.build(nodes, links, coms)


def test_per_commodity_box_disjoint_is_product(sbp):
    net = _two_commodity_net(False, PER_COMMODITY)
    box, cert = per_commodity_box(net, sbp)
    one = construct_backpressure_box(chain(3, buffers=[UNBOUNDED, 4.0, 4.0]), sbp)
    blocks = build_model(net, sbp).layout.blocks()
    assert np.array_equal(box.upper[blocks["1"]], one.upper)
    assert cert.certified


def test_per_commodity_box_shared_link(sbp):
    _, cert = per_commodity_box(_two_commodity_net(True, PER_COMMODITY), sbp)
    assert cert.certified


def test_per_commodity_box_rejects_shared_buffers(sbp):
    with pytest.raises(BoxConstructionError, match="casestudy"):
        per_commodity_box(_two_commodity_net(True, "shared"), sbp)


def test_single_commodity_sweep_finds_capacity(sbp):
    net = chain(2, lam=1.0, c=3.0, mu=2.0, buffers=[UNBOUNDED, 6.0])
    res = existence_sweep(net, sbp, "1", (0.0, 4.0), starts=2)
    assert res.threshold == pytest.approx(2.0, abs=0.01)
    assert res.bracket[1] - res.bracket[0] <= 4.0 / 4096 + 1e-12
    assert res.to_csv().splitlines()[0] == "lambda,status,residual,threshold_estimate"


def test_sweep_without_transition_raises(sbp):
    net = chain(2, lam=1.0, c=3.0, mu=2.0, buffers=[UNBOUNDED, 6.0])
    with pytest.raises(BracketError, match="interval does not bracket transition"):
        existence_sweep(net, sbp, "1", (0.0, 1.0), starts=2)


@pytest.mark.parametrize("mu1", [1.0, 3.0])
def test_threshold_scales_with_overloaded_capacity(shared, mu1):
    cfg = OneHopSharedConfig((mu1, 3.0), (6.0, 4.5), (1.5 * mu1, 0.1), 6.0)
    res = existence_sweep(cfg.to_network(), shared, "2", (0.0, 3.0), iterations=10)
    assert res.threshold == pytest.approx(mu1 * 4.5 / 6.0, abs=0.01)


def test_certificate_serializes(chain2, sbp):
    d = find_equilibrium(chain2, sbp).to_dict()
    assert d["status"] == FOUND and set(d["q"]) == {"q_0_1", "q_1_1"}
