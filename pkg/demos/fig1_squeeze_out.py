"""Two commodities share one finite hub buffer; the overloaded one squeezes the other out.

Commodity 1 arrives at 3 but the hub can only send 2 of it onward, so its
hub queue fills the shared buffer.  Commodity 2 is then admitted only while
the buffer gate is open, which caps its throughput at mu_1 c_2 / c_1 = 1.5
even though its own egress capacity is 3.

Run:  python3 demos/fig1_squeeze_out.py
"""

from __future__ import annotations

import numpy as np

from bufnet.casestudy import OneHopSharedConfig, admissible_range_two_commodity, beta_limit
from bufnet.dynamics import growth_rates, integrate, throughput_estimate
from bufnet.equilibrium import existence_sweep, find_equilibrium
from bufnet.generators import fig1
from bufnet.model import build_model
from bufnet.network import overloaded_sources
from bufnet.policies import shared_buffer_backpressure

pol = shared_buffer_backpressure()

print("closed form")
cfg = OneHopSharedConfig((2.0, 3.0), (6.0, 4.5), (3.0, 3.0), 6.0)
print(f"  admissible lambda_2: {admissible_range_two_commodity(cfg)}")
print(f"  hub gate at saturation: {beta_limit(cfg, 1):.4f}")

print("\nsimulation, lambda_2 = 3")
m = build_model(fig1(3.0), pol)
tr = integrate(m, None, np.zeros(m.n), 1000.0, record_every=100)
g = growth_rates(tr, 500.0)
for c in m.layout.commodities:
    print(f"  commodity {c}: throughput {throughput_estimate(tr, c, 500.0):.4f}")
for lab, rate in zip(m.layout.labels(), g):
    print(f"  d{lab}/dt = {rate:+.4f}")

print("\nthreshold by bisection on lambda_2 in [0, 3]")
res = existence_sweep(fig1(3.0), pol, "2", (0.0, 3.0))
print(f"  threshold {res.threshold:.5f}, bracket {res.bracket[0]:.5f}..{res.bracket[1]:.5f}")

print("\nequilibrium of the subsystem at lambda_2 = 1.2 (commodity 1 source saturated)")
net = fig1(1.2)
cert = find_equilibrium(net, pol, saturated=overloaded_sources(net))
print(f"  {cert.status}, residual {cert.residual:.2e}")
for lab, v in zip(cert.layout.labels(), cert.q):
    print(f"  {lab} = {v:.6f}")
