"""The certificate chain on one random capacity-feasible DAG.

Condition scan, equilibrium, spectrum, column dominance, the Perron null
vector and the diagonal Lyapunov test built from it, then the backpressure
box and its sampled face certificate.

Run:  python3 demos/dag_certificates.py [seed]
"""

from __future__ import annotations

import sys

import numpy as np

from bufnet.equilibrium import certify_box, find_equilibrium
from bufnet.generators import random_dag
from bufnet.policies import smooth_backpressure
from bufnet.stability import (check_column_dominance, eigen_spectrum, grid_condition_scan, jacobian,
                              lyapunov_certificate, perron_null_vector)

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 3
net = random_dag(np.random.default_rng(seed))
pol = smooth_backpressure()
print(f"{len(net.nodes)} nodes, {len(net.links)} links, arrivals {dict(net.commodities[0].arrivals)}")

scan = grid_condition_scan(net, pol, 2000, seed=seed)
print(f"condition scan: {scan.passed}/{scan.samples} states pass (unbounded coordinates truncated: {scan.truncated})")

cert = find_equilibrium(net, pol, seed=seed)
print(f"equilibrium: {cert.status} via {cert.method}, residual {cert.residual:.2e}")

J = jacobian(net, pol, cert.q)
print(f"max real part of the spectrum: {eigen_spectrum(J).real.max():.4f}")
print(f"column dominance: {check_column_dominance(J).status}")
pr = perron_null_vector(J.without_egress)
ly = lyapunov_certificate(J, pr.delta)
print(f"Perron residual {pr.residual:.1e}; lambda_max(AJ + J^T A) = {ly.lambda_max:.4f} -> "
      f"{'PASS' if ly.passed else 'FAIL'}")

box = certify_box(net, pol, seed=seed)
faces = box.face_stats
print(f"box: {box.status} ({faces.label}, {faces.samples} face samples by {faces.sampler}); "
      f"solve from the center inside the box: {box.box.contains(box.q)}")
