"""Closed forms for the one-hop shared-buffer system.

``C`` source nodes, each holding one commodity, feed a hub ``K`` over links
of capacity ``c_l``.  The hub has one buffer ``b_K`` shared by all
commodities and egress capacity ``mu_l`` per commodity.  When commodity
``l`` is overloaded (``lambda_l > mu_l``) its hub queue fills the buffer
until the gate ``beta_K`` settles at ``mu_l / c_l``.  Every commodity whose
ratio ``c_p / mu_p`` ranks below ``l``'s is then throttled to
``mu_l c_p / c_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import integrate
from .equilibrium import existence_sweep
from .model import build_model
from .network import CommoditySpec, Link, NetworkInstance, Node, constant
from .policies import Policy, shared_buffer_backpressure
from . import _kernels as K

RATIO_TOL = 1e-9
ETA = 1e-3
HUB = "K"


class HypothesisError(ValueError):
    pass


@dataclass(frozen=True)
class OneHopSharedConfig:
    mu: tuple[float, ...]
    c: tuple[float, ...]
    lam: tuple[float, ...]
    b_K: float
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        C = len(self.mu)
        if C < 2 or len(self.c) != C or len(self.lam) != C:
            raise ValueError("mu, c and lam need one entry per commodity (at least two)")
        if not (math.isfinite(self.b_K) and self.b_K > 0):
            raise ValueError("the hub buffer must be finite and positive")
        for k in range(C):
            if not (self.mu[k] > 0 and self.c[k] > 0 and self.lam[k] >= 0):
                raise ValueError(f"commodity {self.names[k]}: rates must be positive")
            if not self.c[k] > self.mu[k]:
                raise HypothesisError(f"commodity {self.names[k]}: c_K = {self.c[k]} > mu = {self.mu[k]} fails")
        if self.ids is not None and len(self.ids) != C:
            raise ValueError("ids need one entry per commodity")

    @property
    def C(self) -> int:
        return len(self.mu)

    @property
    def names(self) -> tuple[str, ...]:
        return self.ids if self.ids is not None else tuple(str(k + 1) for k in range(len(self.mu)))

    @property
    def ratios(self) -> np.ndarray:
        return np.asarray(self.c, dtype=float) / np.asarray(self.mu, dtype=float)

    def index(self, commodity: str | int) -> int:
        """Position of a commodity given by name (``1`` and ``"1"`` are the same)."""
        try:
            return self.names.index(str(commodity))
        except ValueError:
            raise KeyError(f"unknown commodity {commodity!r}") from None

    def overloaded(self) -> list[int]:
        return [k for k in range(self.C) if self.lam[k] > self.mu[k]]

    def with_lam(self, k: int, value: float) -> "OneHopSharedConfig":
        lam = list(self.lam)
        lam[k] = value
        return OneHopSharedConfig(self.mu, self.c, tuple(lam), self.b_K, self.ids)

    def to_network(self) -> NetworkInstance:
        names = self.names
        nodes = [Node(n) for n in names]
        nodes.append(Node(HUB, float(self.b_K), {n: float(m) for n, m in zip(names, self.mu)}))
        links = [Link(n, HUB, float(c)) for n, c in zip(names, self.c)]
        coms = [CommoditySpec(n, {n: constant(float(l))}) for n, l in zip(names, self.lam)]
        return NetworkInstance.build(nodes, links, coms)

    def to_dict(self) -> dict:
        return {"commodities": list(self.names), "mu": list(self.mu), "c": list(self.c),
                "lambda": list(self.lam), "b_K": self.b_K}

    @classmethod
    def from_dict(cls, d: dict) -> "OneHopSharedConfig":
        ids = d.get("commodities")
        return cls(tuple(float(x) for x in d["mu"]), tuple(float(x) for x in d["c"]),
                   tuple(float(x) for x in d["lambda"]), float(d["b_K"]),
                   tuple(str(x) for x in ids) if ids is not None else None)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    closed: bool = True

    def contains(self, x: float) -> bool:
        return self.lo <= x and (x <= self.hi if self.closed else x < self.hi)

    def sweep_hi(self, eta: float = ETA) -> float:
        """Right end used by sweeps: ``hi`` itself, or ``hi - eta`` when open."""
        return self.hi if self.closed else self.hi - eta

    def __str__(self):
        return f"[{self.lo:g}, {self.hi:g}{']' if self.closed else ')'}"

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "closed": self.closed, "text": str(self)}


def admissible_range_two_commodity(cfg: OneHopSharedConfig) -> Interval:
    """Rates of commodity 2 that keep an equilibrium while commodity 1 is overloaded."""
    if cfg.C != 2:
        raise HypothesisError("the two-commodity range needs exactly two commodities")
    (m1, m2), (c1, c2) = cfg.mu, cfg.c
    if not cfg.lam[0] > m1:
        raise HypothesisError(f"lambda_1 > mu_1 fails ({cfg.lam[0]} <= {m1})")
    if not c1 / m1 > c2 / m2 + RATIO_TOL:
        raise HypothesisError(f"c_1K/mu_1 > c_2K/mu_2 fails ({c1 / m1:.6g} <= {c2 / m2:.6g})")
    out = Interval(0.0, m1 * c2 / c1)
    assert out.hi < m2, "range must sit strictly inside [0, mu_2)"
    return out


def beta_limit(cfg: OneHopSharedConfig, overloaded: str | int) -> float:
    """Saturation value ``mu_l / c_l`` of the shared-buffer gate."""
    k = cfg.index(overloaded)
    if not cfg.lam[k] > cfg.mu[k]:
        raise HypothesisError(f"commodity {cfg.names[k]} is not overloaded "
                              f"(lambda = {cfg.lam[k]} <= mu = {cfg.mu[k]})")
    return cfg.mu[k] / cfg.c[k]


@dataclass
class RangeReport:
    overloaded: str
    intervals: dict[str, Interval]
    order: list[str]
    ties: list[tuple[str, str]]
    flags: dict[str, str]
    eta: float = ETA

    def to_dict(self) -> dict:
        return {"overloaded": self.overloaded, "order": self.order,
                "intervals": {k: v.to_dict() for k, v in self.intervals.items()},
                "ties": [list(t) for t in self.ties], "flags": self.flags, "eta": self.eta,
                "note": f"open right ends are swept up to hi - {self.eta:g}"}


def admissible_ranges_c_commodity(cfg: OneHopSharedConfig, overloaded: str | int | None = None) -> RangeReport:
    """Admissible arrival interval for every commodity other than the overloaded one.

    Commodities are ranked by ``c/mu`` (largest first).  Those ranked above
    the overloaded one keep ``[0, mu_p)``; those below get
    ``[0, mu_l c_p / c_l]``.  A ratio tied with the overloaded one's within
    ``1e-9`` is flagged INCONCLUSIVE.
    """
    over = cfg.overloaded()
    if overloaded is None:
        if len(over) != 1:
            raise HypothesisError(f"need exactly one overloaded commodity, found {len(over)}")
        l = over[0]
    else:
        l = cfg.index(overloaded)
        if not cfg.lam[l] > cfg.mu[l]:
            raise HypothesisError(f"commodity {cfg.names[l]} is not overloaded")
        if len(over) > 1:
            raise HypothesisError("more than one overloaded commodity")
    r = cfg.ratios
    order = sorted(range(cfg.C), key=lambda k: (-r[k], k))
    ties = [(cfg.names[i], cfg.names[j]) for a, i in enumerate(order) for j in order[a + 1:]
            if abs(r[i] - r[j]) <= RATIO_TOL * max(r[i], r[j])]
    intervals, flags = {}, {}
    for p in range(cfg.C):
        if p == l:
            continue
        name = cfg.names[p]
        tied = abs(r[p] - r[l]) <= RATIO_TOL * max(r[p], r[l])
        if r[p] > r[l]:
            intervals[name] = Interval(0.0, cfg.mu[p], closed=False)
        else:
            iv = Interval(0.0, cfg.mu[l] * cfg.c[p] / cfg.c[l])
            if not tied:
                assert iv.hi < cfg.mu[p], "range must sit strictly inside [0, mu_p)"
            intervals[name] = iv
        flags[name] = "INCONCLUSIVE" if tied else "OK"
    return RangeReport(cfg.names[l], intervals, [cfg.names[k] for k in order], ties, flags)


# -- cross-checks against the dynamics ---------------------------------------

def _policy(pol: Policy | None) -> Policy:
    return pol if pol is not None else shared_buffer_backpressure()


def beta_trajectory(cfg: OneHopSharedConfig, pol: Policy | None = None, t_end: float = 2000.0,
                    h: float = 0.01) -> float:
    """Time-average of the hub gate over the second half of a run from empty queues."""
    pol = _policy(pol)
    m = build_model(cfg.to_network(), pol)
    traj = integrate(m, None, np.zeros(m.n), t_end, h=h, record_every=10)
    hub = [i for i, (n, _) in enumerate(m.layout.entries) if n == HUB]
    keep = traj.times >= t_end / 2
    occ = traj.states[keep][:, hub].sum(axis=1)
    gate = np.array([K.sigmoid(pol.a * (cfg.b_K - pol.eps - o)) for o in occ])
    return float(gate.mean())


def source_growth(cfg: OneHopSharedConfig, commodity: str | int, pol: Policy | None = None,
                  t_end: float = 2000.0, h: float = 0.01) -> float:
    """Growth rate of a source queue over the second half of a run."""
    pol = _policy(pol)
    k = cfg.index(commodity)
    m = build_model(cfg.to_network(), pol)
    traj = integrate(m, None, np.zeros(m.n), t_end, h=h, record_every=10)
    i = m.layout.index[(cfg.names[k], cfg.names[k])]
    return float((traj.final[i] - traj.at(t_end / 2)[i]) / (t_end / 2))


@dataclass
class ValidationRow:
    commodity: str
    closed_form: float
    threshold: float
    bracket: tuple[float, float]
    flag: str

    @property
    def error(self) -> float:
        return abs(self.threshold - self.closed_form)

    def to_dict(self) -> dict:
        return {"commodity": self.commodity, "closed_form": self.closed_form, "threshold": self.threshold,
                "bracket": list(self.bracket), "abs_error": self.error, "flag": self.flag}


def sweep_validation(cfg: OneHopSharedConfig, pol: Policy | None = None, overloaded: str | int | None = None,
                     commodities: Sequence[str] | None = None, iterations: int = 12,
                     seed: int = 0) -> list[ValidationRow]:
    """Locate each admissible right end on the ODE by bisection.

    Other commodities keep their configured rates, which must lie inside
    their own admissible intervals.
    """
    pol = _policy(pol)
    rep = admissible_ranges_c_commodity(cfg, overloaded)
    for name, iv in rep.intervals.items():
        if not iv.contains(cfg.lam[cfg.index(name)]):
            raise HypothesisError(f"commodity {name}: lambda = {cfg.lam[cfg.index(name)]} outside {iv}")
    net = cfg.to_network()
    rows = []
    for name, iv in rep.intervals.items():
        if commodities is not None and name not in commodities:
            continue
        hi = 1.5 * iv.hi if not iv.closed else 2.0 * iv.hi
        res = existence_sweep(net, pol, name, (0.0, hi), iterations, seed=seed)
        rows.append(ValidationRow(name, iv.hi, res.threshold, res.bracket, rep.flags[name]))
    return rows


@dataclass
class RandomFamily:
    """Log-uniform one-hop configurations that satisfy the closed-form hypotheses."""

    mu_range: tuple[float, float] = (1.0, 4.0)
    ratio_range: tuple[float, float] = (1.25, 5.0)
    buffer_range: tuple[float, float] = (4.0, 12.0)
    min_ratio_gap: float = 0.05
    load: float = 0.5
    overload: float = 1.5
    sizes: tuple[int, ...] = (2, 3, 4)
    extra: dict = field(default_factory=dict)

    def draw(self, rng: np.random.Generator) -> OneHopSharedConfig:
        C = int(rng.choice(self.sizes))
        lo, hi = np.log(self.ratio_range)
        while True:
            r = np.exp(rng.uniform(lo, hi, C))
            s = np.sort(r)
            if np.all(np.diff(s) / s[1:] > self.min_ratio_gap):
                break
        mu = np.exp(rng.uniform(*np.log(self.mu_range), C))
        c = mu * r
        b = float(np.exp(rng.uniform(*np.log(self.buffer_range))))
        l = int(rng.integers(C))
        lam = np.zeros(C)
        lam[l] = self.overload * mu[l]
        for p in range(C):
            if p != l:
                cap = mu[p] if r[p] > r[l] else mu[l] * c[p] / c[l]
                lam[p] = self.load * cap
        return OneHopSharedConfig(tuple(map(float, mu)), tuple(map(float, c)), tuple(map(float, lam)), b)
