"""Random and canonical instance families used by the tests and demos."""

from __future__ import annotations

import numpy as np

from .casestudy import OneHopSharedConfig
from .network import PER_COMMODITY, UNBOUNDED, CommoditySpec, Link, NetworkInstance, Node, constant


def chain(n: int = 2, lam: float = 1.0, c: float = 2.0, mu: float = 2.0,
          buffers: list | None = None) -> NetworkInstance:
    """Line ``0 -> 1 -> ... -> n-1`` with egress at the last node."""
    buffers = buffers or [UNBOUNDED] * n
    nodes = [Node(str(i), buffers[i], mu if i == n - 1 else 0.0) for i in range(n)]
    links = [Link(str(i), str(i + 1), c) for i in range(n - 1)]
    return NetworkInstance.build(nodes, links, [CommoditySpec("1", {"0": constant(lam)})])


def fig1(lam2: float = 3.0, lam1: float = 3.0) -> NetworkInstance:
    """The two-commodity shared-buffer example: commodity 2 is squeezed to 1.5."""
    return OneHopSharedConfig((2.0, 3.0), (6.0, 4.5), (lam1, lam2), 6.0).to_network()


def random_dag(rng: np.random.Generator, n_max: int = 12, n_min: int = 2, finite_prob: float = 0.5,
               load: tuple[float, float] = (0.3, 0.8), extra_edge_prob: float = 0.25,
               extra_source_prob: float = 0.2, egress_prob: float = 0.3) -> NetworkInstance:
    """Single-commodity DAG with capacity slack at every node.

    Nodes are labelled in topological order; every node has a parent among
    earlier nodes, so all of them are reachable from node 0.  At each node
    arrivals plus inflow capacity stay at most ``load[1]`` of outflow plus
    egress capacity, and finite buffers leave room for the backpressure box.
    """
    N = int(rng.integers(n_min, n_max + 1))
    parents: dict[int, set[int]] = {j: set() for j in range(N)}
    for j in range(1, N):
        parents[j].add(int(rng.integers(j)))
        for i in range(j):
            if rng.random() < extra_edge_prob:
                parents[j].add(i)
    children = {i: sorted(j for j in range(N) if i in parents[j]) for i in range(N)}
    cap = {(i, j): float(rng.uniform(1.0, 3.0)) for j in range(N) for i in parents[j]}
    lam = np.zeros(N)
    lam[0] = rng.uniform(0.2, 1.5)
    for i in range(1, N):
        if not parents[i] or rng.random() < extra_source_prob:
            lam[i] = rng.uniform(0.1, 0.8)
    mu = np.zeros(N)
    for i in range(N):
        need = lam[i] + sum(cap[(k, i)] for k in parents[i])
        out = sum(cap[(i, j)] for j in children[i])
        target = rng.uniform(*load)
        if not children[i] or rng.random() < egress_prob:
            mu[i] = max(rng.uniform(0.5, 2.0), need / target - out)
        elif need > target * out:
            scale = need / (target * out)
            for j in children[i]:
                cap[(i, j)] *= scale
    height = np.zeros(N, dtype=int)
    for i in reversed(range(N)):
        height[i] = 1 + max((height[j] for j in children[i]), default=-1)
    nodes = []
    for i in range(N):
        finite = lam[i] == 0 and rng.random() < finite_prob
        buf = float(height[i] + rng.uniform(2.0, 8.0)) if finite else UNBOUNDED
        nodes.append(Node(str(i), buf, float(mu[i])))
    links = [Link(str(i), str(j), c) for (i, j), c in sorted(cap.items())]
    arr = {str(i): constant(float(lam[i])) for i in range(N) if lam[i] > 0}
    return NetworkInstance.build(nodes, links, [CommoditySpec("1", arr)])


def random_multicommodity(rng: np.random.Generator, C: int = 2, n_max: int = 6, coupled: bool = False,
                          buffer_mode: str = PER_COMMODITY) -> NetworkInstance:
    """``C`` commodities on random chains.

    With ``coupled=False`` every commodity has its own nodes, so the
    Jacobian is block diagonal; otherwise all chains end in a common egress node.
    """
    nodes, links, coms = [], [], []
    hub = "H"
    for k in range(C):
        n = int(rng.integers(2, n_max + 1))
        ids = [f"{k}.{i}" for i in range(n)]
        for i, nid in enumerate(ids):
            last = i == n - 1
            buf = UNBOUNDED if i == 0 else float(rng.uniform(5.0, 12.0))
            mu = 0.0 if (coupled and last) else (float(rng.uniform(1.5, 3.0)) if last else 0.0)
            nodes.append(Node(nid, buf, mu))
        for a, b in zip(ids, ids[1:]):
            links.append(Link(a, b, float(rng.uniform(1.5, 3.0))))
        if coupled:
            links.append(Link(ids[-1], hub, float(rng.uniform(1.5, 3.0))))
        coms.append(CommoditySpec(str(k + 1), {ids[0]: constant(float(rng.uniform(0.2, 0.6)))},
                                  buffer_mode))
    if coupled:
        nodes.append(Node(hub, float(rng.uniform(8.0, 16.0)), float(rng.uniform(2.0, 4.0))))
    return NetworkInstance.build(nodes, links, coms)
