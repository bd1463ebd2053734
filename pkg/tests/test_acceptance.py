"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line; the lines are printed in the
pytest terminal summary, or directly when the module is run as a script.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from bufnet.casestudy import RandomFamily, sweep_validation
from bufnet.cli import main as cli_main
from bufnet.dynamics import integrate, throughput_estimate
from bufnet.equilibrium import BOX_CERTIFIED, FOUND, certify_box, find_equilibrium
from bufnet.generators import fig1, random_dag, random_multicommodity
from bufnet.model import build_model
from bufnet.network import PER_COMMODITY, SHARED, feasible_box, overloaded_sources, sample_feasible
from bufnet.policies import (buffer_occupancy, constant_rate_policy, shared_buffer_backpressure,
                             smooth_backpressure)
from bufnet.stability import (PASS, check_block_dominance, check_column_dominance, eigen_spectrum,
                              grid_condition_scan, jacobian, lyapunov_certificate, perron_null_vector)

CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"
RESULTS: list[str] = []

N_DAGS = 100
N_STARTS = 20
N_FAMILY = 50


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def dags():
    """The shared random-DAG corpus with a reference equilibrium each."""
    rng = np.random.default_rng(20240601)
    pol = smooth_backpressure()
    out = []
    for k in range(N_DAGS):
        net = random_dag(rng, n_max=12)
        m = build_model(net, pol)
        out.append((net, m, find_equilibrium(m, seed=k)))
    return pol, out


def test_criterion_1_fig1(tmp_path):
    t0 = time.perf_counter()
    cfg = json.loads((CONFIGS / "fig1.json").read_text(encoding="utf-8"))
    path = tmp_path / "fig1.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    assert cli_main(["simulate", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    sim = json.loads((tmp_path / "a" / "simulate.json").read_text(encoding="utf-8"))["result"]
    thr, grow = sim["throughput"]["2"], sim["growth_rates"]["q_2_2"]
    ok_a = abs(thr - 1.5) <= 0.05 and abs(grow - 1.5) <= 0.1

    assert cli_main(["sweep", "--config", str(path), "--out", str(tmp_path / "b"),
                     "--commodity", "2", "--bracket", "0:3"]) == 0
    thr_b = json.loads((tmp_path / "b" / "sweep.json").read_text(encoding="utf-8"))["result"]["threshold"]
    ok_b = abs(thr_b - 1.5) <= 0.01

    net = fig1(1.2)
    cert = find_equilibrium(net, shared_buffer_backpressure(), saturated=overloaded_sources(net))
    ok_c = cert.status == FOUND and cert.residual < 1e-10
    elapsed = time.perf_counter() - t0
    record(1, ok_a and ok_b and ok_c and elapsed < 30.0,
           f"(a) throughput {thr:.4f}, growth {grow:.4f}; (b) threshold {thr_b:.5f}; "
           f"(c) {cert.status} residual {cert.residual:.2e}; {elapsed:.1f} s")


def test_criterion_2_casestudy_family():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    fam = RandomFamily()
    worst, sizes = 0.0, {2: 0, 3: 0, 4: 0}
    for k in range(N_FAMILY):
        cfg = fam.draw(rng)
        sizes[cfg.C] += 1
        rows = sweep_validation(cfg, seed=k)
        worst = max(worst, max(r.error for r in rows))
    elapsed = time.perf_counter() - t0
    record(2, worst <= 0.02 and elapsed < 600.0,
           f"{N_FAMILY} configs (C counts {sizes}), worst |endpoint - threshold| {worst:.2e}, {elapsed:.0f} s")


def test_criterion_3_stability_certificates(dags):
    pol, items = dags
    found, col_fail, lyap_fail = 0, 0, 0
    worst_eig, worst_lyap, worst_res = -np.inf, -np.inf, 0.0
    for net, m, cert in items:
        if cert.status != FOUND:
            continue
        found += 1
        J = jacobian(m, None, cert.q)
        worst_eig = max(worst_eig, float(eigen_spectrum(J).real.max()))
        col_fail += not check_column_dominance(J).passed
        pr = perron_null_vector(J.without_egress)
        worst_res = max(worst_res, pr.residual)
        ly = lyapunov_certificate(J, pr.delta)
        worst_lyap = max(worst_lyap, ly.lambda_max)
        lyap_fail += not ly.passed
    ok = (found == len(items) and worst_eig < -1e-8 and col_fail == 0 and lyap_fail == 0
          and worst_lyap < -1e-9 and worst_res < 1e-9)
    record(3, ok, f"{found}/{len(items)} FOUND; max Re(eig) {worst_eig:.3e}; column dominance failures "
                  f"{col_fail}; max lambda_max(Q) {worst_lyap:.3e}; max Perron residual {worst_res:.2e}")


def test_criterion_4_uniqueness(dags):
    pol, items = dags
    worst, found, tried = 0.0, 0, 0
    for k, (net, m, ref) in enumerate(items):
        starts = sample_feasible(feasible_box(net), N_STARTS, np.random.default_rng(1000 + k), margin=1e-3)
        for q0 in starts:
            cert = find_equilibrium(m, q0=q0, starts=1, seed=k)
            tried += 1
            if cert.status == FOUND:
                found += 1
                worst = max(worst, float(np.abs(cert.q - ref.q).max()))
    record(4, found > 0 and worst <= 1e-6,
           f"{found}/{tried} starts FOUND, max disagreement {worst:.2e}")


def test_criterion_5_box(dags):
    pol, items = dags
    ok_count, grid, lhs, bad = 0, 0, 0, []
    for k, (net, m, _) in enumerate(items):
        cert = certify_box(net, pol, face_samples=7, seed=k)
        faces = cert.face_stats
        grid += faces.sampler == "grid"
        lhs += faces.sampler == "lhs"
        inside = cert.status == BOX_CERTIFIED and cert.q is not None and cert.box.contains(cert.q)
        ok_count += inside
        if not inside:
            bad.append(k)
    record(5, ok_count == len(items),
           f"{ok_count}/{len(items)} BOX_CERTIFIED with the solve from the center inside the box "
           f"(7-point grid on {grid} boxes, LHS budget on {lhs}){'; failing ' + str(bad) if bad else ''}")


def _fd_pairs(rng):
    sbp, shared = smooth_backpressure(), shared_buffer_backpressure()
    for _ in range(70):
        net = random_dag(rng)
        m = build_model(net, sbp)
        for q in sample_feasible(feasible_box(net, 20.0), 10, rng):
            yield m, q
    for _ in range(15):
        net = random_multicommodity(rng, C=int(rng.integers(2, 4)), coupled=True, buffer_mode=PER_COMMODITY)
        m = build_model(net, sbp)
        for q in sample_feasible(feasible_box(net, 20.0), 10, rng):
            yield m, q
    for _ in range(15):
        net = random_multicommodity(rng, C=int(rng.integers(2, 4)), coupled=True, buffer_mode=SHARED)
        m = build_model(net, shared)
        for q in sample_feasible(feasible_box(net, 20.0), 10, rng, margin=1e-3):
            yield m, q


def test_criterion_6_jacobian_fd():
    rng = np.random.default_rng(6)
    worst, pairs = 0.0, 0
    for m, q in _fd_pairs(rng):
        Ja = m.jacobian(q)
        Jf = m.fd_jacobian(q)
        worst = max(worst, float((np.abs(Ja - Jf) / np.maximum(1.0, np.abs(Ja))).max(initial=0.0)))
        pairs += 1
    record(6, pairs >= 1000 and worst < 1e-5,
           f"{pairs} (instance, state) pairs, max relative error {worst:.2e} (unit floor)")


def test_criterion_7_policy_conditions():
    rng = np.random.default_rng(7)
    dag = random_dag(rng, n_max=12, n_min=8)
    finite = random_dag(rng, n_max=12, n_min=8, finite_prob=1.0, extra_source_prob=0.0)
    a = grid_condition_scan(dag, smooth_backpressure(), 10_000, seed=1)
    b = grid_condition_scan(finite, buffer_occupancy(), 10_000, seed=2)
    c = grid_condition_scan(dag, constant_rate_policy(), 10_000, seed=3)
    ok = a.failed == 0 and b.failed == 0 and c.fail_fraction == 1.0 and a.samples == b.samples == 10_000
    record(7, ok, f"smooth backpressure {a.failed}/{a.samples} violations, buffer occupancy "
                  f"{b.failed}/{b.samples}, constant rate fails {100 * c.fail_fraction:.0f}%")


def test_criterion_8_block_dominance():
    rng = np.random.default_rng(8)
    sbp = smooth_backpressure()
    exact, decoupled = 0, 0
    for _ in range(20):
        net = random_multicommodity(rng, C=int(rng.integers(2, 5)), coupled=False)
        m = build_model(net, sbp)
        for q in sample_feasible(feasible_box(net, 20.0), 5, rng):
            r = check_block_dominance(jacobian(m, None, q))
            decoupled += 1
            exact += bool(np.array_equal(r.margins, r.sigma_min) and np.all(r.coupling == 0.0))
    agree, total = 0, 1000
    for _ in range(total):
        n = int(rng.integers(2, 7))
        A = rng.normal(size=(n, n)) * rng.uniform(0.1, 3.0, n)
        A[np.diag_indices(n)] = rng.uniform(-6.0, 6.0, n)
        r = check_block_dominance(A, [(i, i + 1) for i in range(n)])
        d = np.abs(np.diag(A))
        strict = bool(np.all(d > np.abs(A).sum(axis=0) - d))
        agree += (r.status == PASS) == strict
    record(8, exact == decoupled and agree == total,
           f"decoupled margins equal sigma_min on {exact}/{decoupled} states; scalar-block agreement "
           f"{agree}/{total}")


def test_criterion_9_conservation():
    rng = np.random.default_rng(9)
    sbp = smooth_backpressure()
    cases = [(random_dag(rng), sbp) for _ in range(20)]
    cases += [(random_multicommodity(rng, C=3, coupled=True, buffer_mode=PER_COMMODITY), sbp) for _ in range(5)]
    cases += [(fig1(1.2, 1.0), shared_buffer_backpressure())]
    worst = 0.0
    for net, pol in cases:
        m = build_model(net, pol)
        tr = integrate(m, None, np.zeros(m.n), 1000.0, record_every=100)
        out = sum(throughput_estimate(tr, c, 500.0) for c in m.layout.commodities)
        lam = sum(c.total_rate for c in net.commodities)
        worst = max(worst, abs(out - lam) / lam)
    record(9, worst <= 0.01, f"{len(cases)} stable instances, max |egress - arrivals| / arrivals {worst:.2e}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
