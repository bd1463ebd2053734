"""Local transmission policies and their pointwise stability conditions.

A policy sets the rate on link ``(i, j)`` from the two adjacent queue lengths
only.  The built-in families are smoothed with logistic gates of steepness
``a`` and offset ``eps``:

* smooth backpressure: ``c * s(a(qi - qj - eps)) * s(a(bj - eps - qj))``
* buffer occupancy:    ``c * s(a(qi - eps)) * (1 - qj / bj)``
* shared-buffer backpressure: backpressure per commodity, with the buffer gate
  driven by the total occupancy of the downstream buffer.

Egress towards the destination is ``mu * s(a(qi - eps))`` for every family.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from .network import PER_COMMODITY, NetworkInstance, is_unbounded

DEFAULT_A = 50.0
MARGIN_TOL = 1e-12
FD_STEP = 1e-6


class Family(str, enum.Enum):
    SMOOTH_BACKPRESSURE = "smooth-backpressure"
    BUFFER_OCCUPANCY = "buffer-occupancy"
    SHARED_BUFFER_BACKPRESSURE = "shared-buffer-backpressure"
    CUSTOM = "custom"

    @property
    def kernel_code(self) -> int:
        if self is Family.BUFFER_OCCUPANCY:
            return K.BUFFER_OCCUPANCY
        return K.SMOOTH_BACKPRESSURE


class PolicyError(ValueError):
    pass


def default_eps(a: float) -> float:
    return 1.0 / math.sqrt(a)


@dataclass(frozen=True, eq=False)
class Policy:
    """Family plus smoothing parameters; bound to links through the network.

    For :attr:`Family.CUSTOM`, ``rate(qi, qj, c, b)`` and ``egress(qi, mu)``
    give the rates; ``rate_partials`` / ``egress_partial`` are optional and
    central finite differences are used when absent.
    """

    family: Family
    a: float = DEFAULT_A
    eps: float = field(default=None)
    egress_overrides: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    rate: Callable | None = None
    egress: Callable | None = None
    rate_partials: Callable | None = None
    egress_partial: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.eps is None:
            object.__setattr__(self, "eps", default_eps(self.a) if self.a > 0 else float("nan"))
        if self.family is not Family.CUSTOM:
            if not self.a > 0:
                raise PolicyError(f"smoothing a must be positive, got {self.a}")
            if not self.eps > 0:
                raise PolicyError(f"offset eps must be positive, got {self.eps}")
        elif self.rate is None or self.egress is None:
            raise PolicyError("custom policies need rate and egress callables")
        for node, (a, e) in self.egress_overrides.items():
            if not (a > 0 and e > 0):
                raise PolicyError(f"egress override at {node}: a and eps must be positive")

    @property
    def partials_method(self) -> str:
        if self.family is Family.CUSTOM and self.rate_partials is None:
            return "finite-difference"
        return "analytic"

    def egress_params(self, node: str) -> tuple[float, float]:
        return tuple(self.egress_overrides.get(node, (self.a, self.eps)))

    def check_network(self, net: NetworkInstance) -> None:
        if self.family is Family.SHARED_BUFFER_BACKPRESSURE and net.buffer_mode == PER_COMMODITY:
            raise PolicyError("shared-buffer backpressure needs shared buffers, "
                              "the network allocates per-commodity buffers")
        if self.family is Family.BUFFER_OCCUPANCY:
            for ln in net.links:
                if is_unbounded(net.node(ln.dst).buffer):
                    raise PolicyError(f"buffer-occupancy policy needs a finite buffer at {ln.dst}")

    def bind(self, capacity: float, buffer: float | object = math.inf) -> "LinkPolicy":
        b = math.inf if is_unbounded(buffer) else float(buffer)
        if self.family is Family.BUFFER_OCCUPANCY and not math.isfinite(b):
            raise PolicyError("buffer-occupancy rate needs a finite downstream buffer")
        if not capacity > 0:
            raise PolicyError(f"link capacity must be positive, got {capacity}")
        return LinkPolicy(self, float(capacity), b)

    def egress_rate(self, qi: float, mu: float, node: str | None = None) -> float:
        return self.egress_value_and_partial(qi, mu, node)[0]

    def egress_value_and_partial(self, qi: float, mu: float, node: str | None = None):
        if self.family is Family.CUSTOM:
            g = float(self.egress(qi, mu))
            if self.egress_partial is not None:
                return g, float(self.egress_partial(qi, mu))
            h = FD_STEP
            return g, (float(self.egress(qi + h, mu)) - float(self.egress(qi - h, mu))) / (2 * h)
        a, e = self.egress_params(node) if node else (self.a, self.eps)
        g, dg = K.egress_rate(float(qi), float(mu), a, e)
        return g, dg

    def to_dict(self) -> dict:
        d = {"family": self.family.value, "partials": self.partials_method}
        if self.family is not Family.CUSTOM:
            d.update(a=self.a, epsilon=self.eps)
        if self.name:
            d["name"] = self.name
        if self.egress_overrides:
            d["egress_overrides"] = {n: {"a": a, "epsilon": e} for n, (a, e) in self.egress_overrides.items()}
        return d


def smooth_backpressure(a: float = DEFAULT_A, eps: float | None = None, **kw) -> Policy:
    return Policy(Family.SMOOTH_BACKPRESSURE, a, eps, **kw)


def buffer_occupancy(a: float = DEFAULT_A, eps: float | None = None, **kw) -> Policy:
    return Policy(Family.BUFFER_OCCUPANCY, a, eps, **kw)


def shared_buffer_backpressure(a: float = DEFAULT_A, eps: float | None = None, **kw) -> Policy:
    return Policy(Family.SHARED_BUFFER_BACKPRESSURE, a, eps, **kw)


def custom_policy(rate, egress, rate_partials=None, egress_partial=None, name="custom") -> Policy:
    return Policy(Family.CUSTOM, float("nan"), float("nan"), rate=rate, egress=egress,
                  rate_partials=rate_partials, egress_partial=egress_partial, name=name)


def constant_rate_policy(fraction: float = 0.5) -> Policy:
    """Control policy transmitting a fixed fraction of capacity regardless of state."""
    return custom_policy(
        lambda qi, qj, c, b: fraction * c,
        lambda qi, mu: fraction * mu,
        rate_partials=lambda qi, qj, c, b: (0.0, 0.0),
        egress_partial=lambda qi, mu: 0.0,
        name=f"constant-{fraction:g}",
    )


def policy_from_config(cfg: Mapping | None) -> Policy:
    cfg = dict(cfg or {})
    fam = cfg.get("family", Family.SMOOTH_BACKPRESSURE.value)
    a = float(cfg.get("a", DEFAULT_A))
    eps = cfg.get("epsilon")
    eps = None if eps is None else float(eps)
    over = {}
    for node, o in (cfg.get("overrides", {}) or {}).get("egress", {}).items():
        oa = float(o.get("a", a))
        over[str(node)] = (oa, float(o.get("epsilon", eps if eps is not None else default_eps(oa))))
    if fam == "constant":
        return constant_rate_policy(float(cfg.get("fraction", 0.5)))
    try:
        family = Family(fam)
    except ValueError:
        raise PolicyError(f"unknown policy family {fam!r}") from None
    if family is Family.CUSTOM:
        raise PolicyError("custom policies cannot be built from a configuration file")
    return Policy(family, a, eps, egress_overrides=over)


@dataclass(frozen=True)
class RatePartials:
    value: float
    dgi: float
    dgj: float
    # natural logs of dgi and -dgj; finite exactly when the sign is witnessed
    log_dgi: float = float("nan")
    log_neg_dgj: float = float("nan")
    method: str = "analytic"


@dataclass(frozen=True)
class LinkPolicy:
    """A policy bound to one link's capacity and downstream buffer."""

    policy: Policy
    capacity: float
    buffer: float

    def __call__(self, qi: float, qj: float) -> float:
        return self.partials(qi, qj).value

    def partials(self, qi: float, qj: float) -> RatePartials:
        pol = self.policy
        if pol.family is Family.CUSTOM:
            c, b = self.capacity, self.buffer
            g = float(pol.rate(qi, qj, c, b))
            if pol.rate_partials is not None:
                dgi, dgj = (float(v) for v in pol.rate_partials(qi, qj, c, b))
                method = "analytic"
            else:
                h = FD_STEP
                dgi = (float(pol.rate(qi + h, qj, c, b)) - float(pol.rate(qi - h, qj, c, b))) / (2 * h)
                dgj = (float(pol.rate(qi, qj + h, c, b)) - float(pol.rate(qi, qj - h, c, b))) / (2 * h)
                method = "finite-difference"
            return RatePartials(g, dgi, dgj, _log_pos(dgi), _log_pos(-dgj), method)
        fam = pol.family.kernel_code
        g, dqi, dqj, docc = K.link_rate(fam, float(qi), float(qj), float(qj), self.buffer,
                                        self.capacity, pol.a, pol.eps)
        li, lj = K.link_log_partials(fam, float(qi), float(qj), float(qj), self.buffer,
                                     self.capacity, pol.a, pol.eps)
        return RatePartials(g, dqi, dqj + docc, li, lj, "analytic")

    def hard_rate(self, qi: float, qj: float) -> float:
        """The discontinuous rule this smoothed policy approximates."""
        if self.policy.family is Family.BUFFER_OCCUPANCY:
            return self.capacity * float(qi > 0) * (1.0 - qj / self.buffer)
        return self.capacity * float(qi > qj) * float(qj < self.buffer)


def _log_pos(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def rate_partials(pol: Policy, link: tuple[float, float], q_i: float, q_j: float) -> RatePartials:
    """Rate and partials on a link given as ``(capacity, downstream buffer)``."""
    return pol.bind(*link).partials(q_i, q_j)


def witnessed_positive(value: float, log_value: float, analytic: bool, tol: float = MARGIN_TOL) -> bool:
    """Whether ``value > 0`` is established.

    Closed-form partials of the built-in families are products of strictly
    positive factors, so a finite log-magnitude settles the sign even when the
    value underflows below ``tol``.  Numerical partials must clear ``tol``.
    """
    if value > tol:
        return True
    return analytic and value >= 0 and math.isfinite(log_value)


@dataclass
class ConditionVerdict:
    passed: bool
    min_dgi: float
    min_neg_dgj: float
    max_egress: float
    link_ok: bool
    egress_ok: bool
    per_commodity: dict[str, dict]
    failing_links: list[dict]
    method: str
    tol: float

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "min_dgi": self.min_dgi,
            "min_neg_dgj": self.min_neg_dgj,
            "max_egress_partial": self.max_egress,
            "link_condition": self.link_ok,
            "egress_condition": self.egress_ok,
            "per_commodity": self.per_commodity,
            "failing_links": self.failing_links[:10],
            "partials": self.method,
            "tol": self.tol,
        }


def check_pointwise_condition(pol: Policy, net: NetworkInstance, q: np.ndarray,
                              saturated: Sequence[tuple[str, str]] = (),
                              tol: float = MARGIN_TOL, model=None) -> ConditionVerdict:
    """Sign conditions on the own-commodity partials at state ``q``.

    Every link must have ``dg/dqi > 0`` and ``dg/dqj < 0``; some egress node
    of each commodity must have ``dg_iT/dqi > 0``.
    """
    from .model import build_model

    m = model if model is not None else build_model(net, pol, saturated)
    q = np.asarray(q, dtype=float)
    parts = m.own_partials(q)
    analytic = m.partials_method == "analytic"
    lay = m.layout
    per: dict[str, dict] = {}
    failing = []
    link_ok = True
    for k in range(len(parts["l_com"])):
        cid = lay.commodities[parts["l_com"][k]]
        dgi, dgj = parts["dgi"][k], parts["dgj"][k]
        ok_i = witnessed_positive(dgi, parts["log_dgi"][k], analytic, tol) if parts["has_src"][k] else True
        ok_j = witnessed_positive(-dgj, parts["log_neg_dgj"][k], analytic, tol)
        rec = per.setdefault(cid, {"min_dgi": math.inf, "min_neg_dgj": math.inf,
                                   "max_egress": 0.0, "link_ok": True, "egress_ok": False})
        if parts["has_src"][k]:
            rec["min_dgi"] = min(rec["min_dgi"], dgi)
        rec["min_neg_dgj"] = min(rec["min_neg_dgj"], -dgj)
        if not (ok_i and ok_j):
            link_ok = False
            rec["link_ok"] = False
            failing.append({"link": list(m.link_names[k]), "commodity": cid, "dgi": dgi, "dgj": dgj})
    for k in range(len(parts["e_com"])):
        cid = lay.commodities[parts["e_com"][k]]
        rec = per.setdefault(cid, {"min_dgi": math.inf, "min_neg_dgj": math.inf,
                                   "max_egress": 0.0, "link_ok": True, "egress_ok": False})
        d = parts["egress"][k]
        rec["max_egress"] = max(rec["max_egress"], d)
        if witnessed_positive(d, parts["log_egress"][k], analytic, tol):
            rec["egress_ok"] = True
    for cid in lay.commodities:
        per.setdefault(cid, {"min_dgi": math.inf, "min_neg_dgj": math.inf,
                             "max_egress": 0.0, "link_ok": True, "egress_ok": False})
    egress_ok = all(r["egress_ok"] for r in per.values())
    min_dgi = min((r["min_dgi"] for r in per.values()), default=math.inf)
    min_ndgj = min((r["min_neg_dgj"] for r in per.values()), default=math.inf)
    max_eg = max((r["max_egress"] for r in per.values()), default=0.0)
    return ConditionVerdict(link_ok and egress_ok, min_dgi, min_ndgj, max_eg, link_ok, egress_ok,
                            per, failing, m.partials_method, tol)


@dataclass
class LimitGap:
    a: float
    eps: float
    smooth: float
    hard: float

    @property
    def gap(self) -> float:
        return abs(self.smooth - self.hard)


@dataclass
class LimitGapResult:
    gaps: list[LimitGap]
    switching_surface: bool

    @property
    def monotone(self) -> bool:
        g = [x.gap for x in self.gaps]
        return all(b <= a + 1e-15 for a, b in zip(g, g[1:]))


def discrete_limit_gap(family: Family | str, a_list: Sequence[float], q_i: float, q_j: float,
                       capacity: float = 1.0, buffer: float = math.inf) -> LimitGapResult:
    """Distance between the smoothed rate and its hard-threshold limit.

    Uses ``eps = 1/sqrt(a)`` for each ``a``.  States on the switching surface
    (``q_i == q_j`` for backpressure) are flagged instead of evaluated.
    """
    family = Family(family)
    surface = (q_i == q_j) if family is not Family.BUFFER_OCCUPANCY else (q_i == 0)
    gaps = []
    if not surface:
        for a in sorted(a_list):
            pol = Policy(family, a, default_eps(a))
            lp = pol.bind(capacity, buffer)
            gaps.append(LimitGap(a, pol.eps, lp(q_i, q_j), lp.hard_rate(q_i, q_j)))
    return LimitGapResult(gaps, surface)
