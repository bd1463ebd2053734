"""Policy bound to a network: flat arrays for the drift and its Jacobian.

Each link carries one term per commodity using it.  A term moves ``g`` packets
per time unit from its upstream state to its downstream state; egress terms
remove packets from a single state.  Finite buffers form *groups* whose
occupancy gates admission: one group per node under shared buffering, one per
(node, commodity) under per-commodity buffering.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .network import (
    PER_COMMODITY,
    InvalidNetworkError,
    NetworkInstance,
    StateLayout,
    is_unbounded,
    require_valid,
    state_upper_bounds,
)
from .policies import FD_STEP, Family, Policy

_I = np.int64


@dataclass(frozen=True, eq=False)
class FlowModel:
    net: NetworkInstance
    policy: Policy
    layout: StateLayout
    family: int
    seg_t: np.ndarray
    seg_lam: np.ndarray
    l_src: np.ndarray
    l_dst: np.ndarray
    l_grp: np.ndarray
    l_cap: np.ndarray
    l_a: np.ndarray
    l_eps: np.ndarray
    l_com: np.ndarray
    link_names: tuple[tuple[str, str], ...]
    g_cap: np.ndarray
    g_ptr: np.ndarray
    g_idx: np.ndarray
    g_names: tuple[str, ...]
    e_idx: np.ndarray
    e_mu: np.ndarray
    e_a: np.ndarray
    e_eps: np.ndarray
    e_com: np.ndarray
    upper: np.ndarray

    @property
    def n(self) -> int:
        return len(self.layout)

    @property
    def ncom(self) -> int:
        return len(self.layout.commodities)

    @property
    def is_custom(self) -> bool:
        return self.policy.family is Family.CUSTOM

    @property
    def partials_method(self) -> str:
        return self.policy.partials_method

    @property
    def unbounded(self) -> np.ndarray:
        return ~np.isfinite(self.upper)

    @property
    def stationary_lam(self) -> np.ndarray:
        return self.seg_lam[-1]

    def lam_at(self, t: float | None) -> np.ndarray:
        if t is None:
            return self.seg_lam[-1]
        k = int(np.searchsorted(self.seg_t, t, side="right")) - 1
        return self.seg_lam[max(k, 0)]

    def _link_args(self):
        return (self.family, self.l_src, self.l_dst, self.l_grp, self.l_cap, self.l_a, self.l_eps,
                self.g_cap, self.g_ptr, self.g_idx)

    def kernel_args(self):
        return (self.family, self.l_src, self.l_dst, self.l_grp, self.l_cap, self.l_a, self.l_eps,
                self.g_cap, self.g_ptr, self.g_idx, self.e_idx, self.e_mu, self.e_a, self.e_eps)

    # -- evaluation -----------------------------------------------------

    def occupancy(self, q: np.ndarray) -> np.ndarray:
        return np.array([q[self.g_idx[self.g_ptr[g]:self.g_ptr[g + 1]]].sum()
                         for g in range(len(self.g_cap))])

    def drift(self, q: np.ndarray, t: float | None = None) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=float)
        lam = self.lam_at(t)
        if self.is_custom:
            return self._custom_drift(q, lam)
        out = np.empty(self.n)
        occ = np.empty(len(self.g_cap))
        K.drift_into(q, lam, *self.kernel_args(), occ, out)
        return out

    def drift_batch(self, Q: np.ndarray, t: float | None = None) -> np.ndarray:
        Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
        if self.is_custom:
            return np.array([self.drift(row, t) for row in Q])
        return K.drift_batch(Q, self.lam_at(t), *self.kernel_args())

    def link_terms(self, q: np.ndarray) -> np.ndarray:
        """``(g, dg/dqi, dg/dqj, dg/docc)`` for every link term."""
        q = np.ascontiguousarray(q, dtype=float)
        if self.is_custom:
            return self._custom_link_terms(q)
        return K.link_terms(q, *self._link_args())

    def egress_terms(self, q: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=float)
        if self.is_custom:
            pol = self.policy
            out = np.empty((len(self.e_idx), 2))
            for t, i in enumerate(self.e_idx):
                out[t] = pol.egress_value_and_partial(q[i], self.e_mu[t])
            return out
        return K.egress_terms(q, self.e_idx, self.e_mu, self.e_a, self.e_eps)

    def egress_by_commodity(self, q: np.ndarray) -> np.ndarray:
        eg = self.egress_terms(q)[:, 0]
        return np.bincount(self.e_com, weights=eg, minlength=self.ncom)

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=float)
        terms = self.link_terms(q)
        e = self.egress_terms(q)
        return K.jacobian_from_terms(self.n, terms, self.l_src, self.l_dst, self.l_grp,
                                     self.g_ptr, self.g_idx, self.e_idx,
                                     np.ascontiguousarray(e[:, 1]))

    def fd_jacobian(self, q: np.ndarray, h: float = FD_STEP) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        E = np.eye(self.n) * h
        plus = self.drift_batch(q + E)
        minus = self.drift_batch(q - E)
        return ((plus - minus) / (2 * h)).T

    def egress_partials(self, q: np.ndarray) -> np.ndarray:
        """Diagonal of ``d g_iT / d q_i`` per state (zero where there is no egress)."""
        e = self.egress_terms(q)
        return np.bincount(self.e_idx, weights=e[:, 1], minlength=self.n)

    def own_partials(self, q: np.ndarray) -> dict:
        """Own-commodity partials per link term plus egress partials, with log-magnitudes."""
        terms = self.link_terms(q)
        # own-commodity downstream partial includes the buffer gate when the
        # downstream state belongs to the gating group (always, for finite buffers)
        dgj = terms[:, 2] + np.where(self.l_grp >= 0, terms[:, 3], 0.0)
        eg = self.egress_terms(q)
        if self.is_custom:
            with np.errstate(divide="ignore"):
                log_dgi = np.where(terms[:, 1] > 0, np.log(np.abs(terms[:, 1])), -np.inf)
                log_ndgj = np.where(-dgj > 0, np.log(np.abs(dgj)), -np.inf)
                log_eg = np.where(eg[:, 1] > 0, np.log(np.abs(eg[:, 1])), -np.inf)
        else:
            lt = K.link_log_terms(np.ascontiguousarray(q, dtype=float), *self._link_args())
            log_dgi, log_ndgj = lt[:, 0], lt[:, 1]
            log_eg = np.array([K.egress_log_partial(q[i], self.e_mu[t], self.e_a[t], self.e_eps[t])
                               for t, i in enumerate(self.e_idx)])
        return {
            "dgi": terms[:, 1], "dgj": dgj, "log_dgi": log_dgi, "log_neg_dgj": log_ndgj,
            "has_src": self.l_src >= 0, "l_com": self.l_com,
            "egress": eg[:, 1], "log_egress": log_eg, "e_com": self.e_com,
        }

    def clamp(self, q: np.ndarray) -> tuple[np.ndarray, float, float]:
        q = np.array(q, dtype=float)
        occ = np.empty(len(self.g_cap))
        worst, over = K.clamp_state(q, self.upper, self.g_cap, self.g_ptr, self.g_idx, occ)
        return q, worst, over

    def leakage_allowance(self) -> np.ndarray:
        """Upper bound on outflow of each state while it is empty.

        Smoothing lets an empty queue leak ``s(-a eps)`` of every outgoing
        capacity; zero for custom policies, whose behaviour is unknown.
        """
        out = np.zeros(self.n)
        if self.is_custom:
            return out
        for t in range(len(self.l_dst)):
            s = self.l_src[t]
            if s >= 0:
                out[s] += self.l_cap[t] * K.sigmoid(-self.l_a[t] * self.l_eps[t])
        for t, i in enumerate(self.e_idx):
            out[i] += self.e_mu[t] * K.sigmoid(-self.e_a[t] * self.e_eps[t])
        return out

    # -- custom policies (pure Python path) -----------------------------

    def _custom_link_terms(self, q):
        pol = self.policy
        out = np.zeros((len(self.l_dst), 4))
        for t in range(len(self.l_dst)):
            s, d = self.l_src[t], self.l_dst[t]
            qi = q[s] if s >= 0 else math.inf
            b = self.g_cap[self.l_grp[t]] if self.l_grp[t] >= 0 else math.inf
            lp = pol.bind(self.l_cap[t], b).partials(qi, q[d])
            out[t, :3] = lp.value, lp.dgi, lp.dgj
        return out

    def _custom_drift(self, q, lam):
        f = lam.copy()
        terms = self._custom_link_terms(q)
        for t in range(len(self.l_dst)):
            f[self.l_dst[t]] += terms[t, 0]
            if self.l_src[t] >= 0:
                f[self.l_src[t]] -= terms[t, 0]
        for t, i in enumerate(self.e_idx):
            f[i] -= float(self.policy.egress(q[i], self.e_mu[t]))
        return f


_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def build_model(net: NetworkInstance, pol: Policy,
                saturated: Sequence[tuple[str, str]] = ()) -> FlowModel:
    """Compile ``(net, pol)`` into a :class:`FlowModel` (memoised per instance)."""
    key = tuple(sorted(tuple(s) for s in saturated))
    per_net = _CACHE.setdefault(net, weakref.WeakKeyDictionary())
    per_pol = per_net.setdefault(pol, {})
    if key not in per_pol:
        per_pol[key] = _compile(net, pol, key)
    return per_pol[key]


def _compile(net: NetworkInstance, pol: Policy, saturated) -> FlowModel:
    require_valid(net)
    pol.check_network(net)
    for n, c in saturated:
        if not is_unbounded(net.node(n).buffer):
            raise InvalidNetworkError(f"only unbounded queues can be saturated, {n} has a finite buffer")
    layout = StateLayout.of(net, saturated)
    idx = layout.index
    sat = set(saturated)
    cpos = {c: k for k, c in enumerate(layout.commodities)}
    per = net.buffer_mode == PER_COMMODITY

    groups: list[tuple[str, list[int], float]] = []
    grp_of: dict[int, int] = {}
    if per:
        for i, (n, c) in enumerate(layout.entries):
            if not is_unbounded(net.node(n).buffer):
                grp_of[i] = len(groups)
                groups.append((f"{n}/{c}", [i], float(net.allocation(n, c))))
    else:
        by_node: dict[str, list[int]] = {}
        for i, (n, _) in enumerate(layout.entries):
            by_node.setdefault(n, []).append(i)
        for n, members in by_node.items():
            if not is_unbounded(net.node(n).buffer):
                for i in members:
                    grp_of[i] = len(groups)
                groups.append((n, members, float(net.node(n).buffer)))

    l_src, l_dst, l_grp, l_cap, l_com, names = [], [], [], [], [], []
    for com in net.commodities:
        for ln in net.commodity_links(com.id):
            if (ln.dst, com.id) in sat:
                continue  # nothing enters an infinitely backlogged queue
            s = -1 if (ln.src, com.id) in sat else idx[(ln.src, com.id)]
            d = idx[(ln.dst, com.id)]
            l_src.append(s)
            l_dst.append(d)
            l_grp.append(grp_of.get(d, -1))
            l_cap.append(net.link_share(ln, com.id))
            l_com.append(cpos[com.id])
            names.append((ln.src, ln.dst))

    e_idx, e_mu, e_a, e_eps, e_com = [], [], [], [], []
    for i, (n, c) in enumerate(layout.entries):
        mu = net.node(n).egress_for(c)
        if mu > 0:
            a, e = pol.egress_params(n)
            e_idx.append(i)
            e_mu.append(mu)
            e_a.append(a)
            e_eps.append(e)
            e_com.append(cpos[c])

    starts = sorted({0.0} | {float(s) for com in net.commodities for sched in com.arrivals.values()
                             for s, _ in sched})
    seg_lam = np.zeros((len(starts), len(layout)))
    for k, t in enumerate(starts):
        for i, (n, c) in enumerate(layout.entries):
            seg_lam[k, i] = net.commodity(c).rate_at(n, t)

    g_ptr = np.zeros(len(groups) + 1, dtype=_I)
    for g, (_, members, _) in enumerate(groups):
        g_ptr[g + 1] = g_ptr[g] + len(members)
    g_idx = np.array([i for _, members, _ in groups for i in members], dtype=_I)

    L = len(l_dst)
    return FlowModel(
        net=net, policy=pol, layout=layout, family=pol.family.kernel_code,
        seg_t=np.array(starts), seg_lam=seg_lam,
        l_src=np.array(l_src, dtype=_I), l_dst=np.array(l_dst, dtype=_I),
        l_grp=np.array(l_grp, dtype=_I), l_cap=np.array(l_cap, dtype=float),
        l_a=np.full(L, pol.a, dtype=float), l_eps=np.full(L, pol.eps, dtype=float),
        l_com=np.array(l_com, dtype=_I), link_names=tuple(names),
        g_cap=np.array([b for _, _, b in groups], dtype=float), g_ptr=g_ptr, g_idx=g_idx,
        g_names=tuple(n for n, _, _ in groups),
        e_idx=np.array(e_idx, dtype=_I), e_mu=np.array(e_mu, dtype=float),
        e_a=np.array(e_a, dtype=float), e_eps=np.array(e_eps, dtype=float),
        e_com=np.array(e_com, dtype=_I),
        upper=state_upper_bounds(net, layout),
    )
