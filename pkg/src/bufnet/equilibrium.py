"""Equilibria of the queue drift: Newton search, box certificates, threshold sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import integrate
from .model import FlowModel, build_model
from .network import (SHARED, InvalidNetworkError, NetworkInstance, StateLayout, feasible_box,
                      is_unbounded, overloaded_sources, require_valid, sample_feasible)
from .policies import Policy, default_eps, DEFAULT_A

FOUND = "FOUND"
BOX_CERTIFIED = "BOX_CERTIFIED"
NOT_FOUND = "NOT_FOUND"
DIVERGED = "DIVERGED"
CERTIFIED = "CERTIFIED"
FAILED = "FAILED"

NEWTON_TOL = 1e-10
NEWTON_ITERS = 100
HALVINGS = 30
PROJECT_TOL = 1e-8
FALLBACK_HORIZON = 1000.0
STARTS = 20
GROWTH_TOL = 1e-3
FACE_POINTS = 7
FACE_BUDGET = 100_000
SWEEP_ITERS = 12


class BoxConstructionError(ValueError):
    pass


class BracketError(ValueError):
    pass


# -- Newton -------------------------------------------------------------------

@dataclass
class NewtonResult:
    q: np.ndarray
    residual: float
    iterations: int
    converged: bool
    reason: str


def natural_residual(m: FlowModel, q: np.ndarray, t: float | None = None) -> np.ndarray:
    """``q - clip(q + f(q), 0, upper)``; zero exactly at equilibria of the projected flow.

    Interior coordinates give ``-f_i``; a queue pinned at zero only needs a
    non-positive drift there.
    """
    f = m.drift(q, t)
    z = q + f
    # -f on free coordinates, not q - (q + f), which rounds to zero for huge q
    return np.where(z <= 0.0, q, np.where(z >= m.upper, q - m.upper, -f))


def newton(m: FlowModel, q0: np.ndarray, tol: float = NEWTON_TOL, max_iter: int = NEWTON_ITERS,
           halvings: int = HALVINGS) -> NewtonResult:
    """Damped semismooth Newton on :func:`natural_residual`, iterates kept in the box."""
    q = np.clip(np.asarray(q0, dtype=float), 0.0, m.upper)
    r = natural_residual(m, q)
    nr = float(np.abs(r).max(initial=0.0))
    for it in range(max_iter):
        if nr < tol:
            return NewtonResult(q, nr, it, True, "converged")
        f = m.drift(q)
        free = (q + f > 0.0) & (q + f < m.upper)
        G = np.eye(m.n)
        if free.any():
            G[free] = -m.jacobian(q)[free]
        try:
            dx = np.linalg.solve(G, -r)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(G, -r, rcond=None)[0]
        if not np.all(np.isfinite(dx)):
            return NewtonResult(q, nr, it, False, "non-finite step")
        step = 1.0
        for _ in range(halvings + 1):
            trial = np.clip(q + step * dx, 0.0, m.upper)
            rt = natural_residual(m, trial)
            nt = float(np.abs(rt).max(initial=0.0))
            if nt < nr:
                break
            step *= 0.5
        else:
            return NewtonResult(q, nr, it, False, "line search stalled")
        q, r, nr = trial, rt, nt
    return NewtonResult(q, nr, max_iter, nr < tol, "converged" if nr < tol else "iteration cap")


# -- find_equilibrium ---------------------------------------------------------

@dataclass
class EquilibriumCertificate:
    status: str
    q: np.ndarray | None
    residual: float
    layout: StateLayout
    evidence: str = ""
    method: str = ""
    iterations: int = 0
    starts: int = 0
    box: "BoxRegion | None" = None
    face_stats: "BoxCertificate | None" = None
    notes: list[str] = field(default_factory=list)
    growth: np.ndarray | None = None

    @property
    def found(self) -> bool:
        return self.status == FOUND or (self.status == BOX_CERTIFIED and self.q is not None)

    def to_dict(self) -> dict:
        d = {"status": self.status, "residual": self.residual, "evidence": self.evidence,
             "method": self.method, "newton_iterations": self.iterations, "starts_tried": self.starts,
             "q": None if self.q is None else dict(zip(self.layout.labels(), self.q.tolist())),
             "notes": list(self.notes)}
        if self.box is not None:
            d["box"] = self.box.to_dict()
        if self.face_stats is not None:
            d["faces"] = self.face_stats.to_dict()
        if self.growth is not None:
            d["growth"] = dict(zip(self.layout.labels(), self.growth.tolist()))
        return d


def _model(net, pol, saturated) -> FlowModel:
    return net if isinstance(net, FlowModel) else build_model(net, pol, saturated)


def _finish(m: FlowModel, res: NewtonResult, method: str, starts: int, notes) -> EquilibriumCertificate | None:
    q = res.q.copy()
    occ = m.occupancy(q)
    over = float(np.max(occ - m.g_cap, initial=0.0))
    if over >= PROJECT_TOL:
        notes.append(f"{method}: root overfills a buffer by {over:.3g}")
        return None
    if over > 0:
        q, _, _ = m.clamp(q)
    resid = float(np.abs(natural_residual(m, q)).max(initial=0.0))
    if resid >= NEWTON_TOL:
        return None
    return EquilibriumCertificate(FOUND, q, resid, m.layout, "", method, res.iterations, starts, notes=notes)


def find_equilibrium(net: NetworkInstance | FlowModel, pol: Policy | None = None, q0: np.ndarray | None = None,
                     saturated: Sequence[tuple[str, str]] = (), t_end: float = FALLBACK_HORIZON,
                     h: float = 0.01, starts: int = STARTS, seed: int = 0,
                     start_cap: float = 100.0) -> EquilibriumCertificate:
    """Search for ``q*`` with zero drift.

    Order: Newton from ``q0``; integrate to ``t_end`` and polish with Newton;
    Newton from ``starts - 1`` random feasible points.  If all fail, the
    trajectory decides between ``DIVERGED`` (an unbounded queue keeps
    growing, which is evidence that no equilibrium exists) and ``NOT_FOUND``
    (solver failure).
    """
    m = _model(net, pol, saturated)
    notes: list[str] = []
    q0 = np.zeros(m.n) if q0 is None else np.asarray(q0, dtype=float)
    res = newton(m, q0)
    tried = 1
    if res.converged and (cert := _finish(m, res, "newton", tried, notes)):
        return cert
    cap = max(1e3, 100.0 * float(np.max(np.where(np.isfinite(m.upper), m.upper, 0.0), initial=0.0)),
              100.0 * float(np.max(q0, initial=0.0)))
    traj = integrate(m, None, q0, t_end, h=h, record_every=max(1, int(round(1.0 / h))),
                     divergence_cap=cap, stop_tol=NEWTON_TOL)
    res = newton(m, traj.final)
    tried += 1
    if res.converged and (cert := _finish(m, res, "integration+newton", tried, notes)):
        return cert
    rng = np.random.default_rng(seed)
    region = feasible_box(m.net, start_cap, m.layout.saturated)
    for q in sample_feasible(region, max(starts - 1, 0), rng, margin=1e-3):
        res = newton(m, q)
        tried += 1
        if res.converged and (cert := _finish(m, res, "multistart-newton", tried, notes)):
            return cert
    resid = float(np.abs(natural_residual(m, traj.final)).max(initial=0.0))
    rates = np.zeros(m.n)
    if traj.t_end > 0:
        rates = (traj.final - traj.at(traj.t_end / 2)) / (traj.t_end / 2)
    growth = float(np.max(rates[m.unbounded], initial=0.0))
    if traj.diverged or growth > GROWTH_TOL:
        notes.append(f"unbounded queue growth {growth:.4g} per time unit over the second half of the run")
        return EquilibriumCertificate(DIVERGED, None, resid, m.layout, "no equilibrium (evidence)",
                                      "integration", 0, tried, notes=notes, growth=rates)
    return EquilibriumCertificate(NOT_FOUND, None, resid, m.layout, "solver failure", "all", 0, tried,
                                  notes=notes, growth=rates)


# -- Poincare-Miranda faces ---------------------------------------------------

@dataclass
class BoxRegion:
    lower: np.ndarray
    upper: np.ndarray
    layout: StateLayout | None = None
    slack: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ValueError("box needs lower <= upper in every coordinate")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, q: np.ndarray, tol: float = 1e-9) -> bool:
        q = np.asarray(q)
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def to_dict(self) -> dict:
        d = {"lower": self.lower.tolist(), "upper": self.upper.tolist()}
        if self.layout is not None:
            d["labels"] = self.layout.labels()
        if self.slack:
            d["slack"] = self.slack
        return d


@dataclass
class BoxCertificate:
    status: str
    samples: int
    failures: int
    sampler: str
    points_per_coordinate: int
    witness: dict | None
    worst_upper: float
    worst_lower: float
    tol: float
    label: str = "sampled evidence"

    @property
    def certified(self) -> bool:
        return self.status == CERTIFIED

    def to_dict(self) -> dict:
        return {"status": self.status, "label": self.label, "samples": self.samples,
                "failures": self.failures, "sampler": self.sampler,
                "points_per_coordinate": self.points_per_coordinate, "witness": self.witness,
                "worst_upper_face_drift": self.worst_upper, "worst_lower_face_drift": self.worst_lower,
                "tol": self.tol}


def _batch(drift) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(drift, FlowModel):
        return drift.drift_batch
    if hasattr(drift, "drift_batch"):
        return drift.drift_batch

    def run(Q):
        return np.array([np.atleast_1d(drift(row)) for row in Q], dtype=float)
    return run


def verify_poincare_miranda(drift, box: BoxRegion, face_samples: int = FACE_POINTS, tol: float = 1e-9,
                            max_samples: int = FACE_BUDGET, seed: int = 0,
                            allowance: np.ndarray | None = None) -> BoxCertificate:
    """Sample the faces of ``box`` for the sign conditions of the Poincare-Miranda theorem.

    On ``q_i = upper_i`` every sample needs ``f_i <= tol``; on
    ``q_i = lower_i`` it needs ``f_i >= -tol - allowance_i``.  A flow model
    supplies its smoothing leakage as the default allowance.  Free
    coordinates use a ``face_samples``-point grid while the total stays
    within ``max_samples``; beyond that each face gets a Latin hypercube.
    """
    n = len(box.lower)
    F = _batch(drift)
    if allowance is None:
        allowance = drift.leakage_allowance() if isinstance(drift, FlowModel) else np.zeros(n)
    allowance = np.asarray(allowance, dtype=float)
    rng = np.random.default_rng(seed)
    free = n - 1
    grid_total = 2 * n * face_samples ** free if free < 40 else math.inf
    use_grid = grid_total <= max_samples
    per_face = face_samples ** free if use_grid else max(1, max_samples // (2 * n))
    total, failures = 0, 0
    witness = None
    worst_up, worst_lo = -math.inf, math.inf
    for i in range(n):
        others = [k for k in range(n) if k != i]
        if use_grid:
            axes = [np.linspace(box.lower[k], box.upper[k], face_samples) for k in others]
            pts = np.array(list(itertools.product(*axes))) if others else np.zeros((1, 0))
        else:
            from scipy.stats import qmc

            u = qmc.LatinHypercube(d=free, seed=rng).random(per_face)
            lo, hi = box.lower[others], box.upper[others]
            pts = lo + u * (hi - lo)
        Q = np.empty((len(pts), n))
        Q[:, others] = pts
        for face, value in (("upper", box.upper[i]), ("lower", box.lower[i])):
            Q[:, i] = value
            fi = F(Q)[:, i]
            total += len(Q)
            if face == "upper":
                bad = fi > tol
                worst_up = max(worst_up, float(fi.max()))
            else:
                bad = fi < -tol - allowance[i]
                worst_lo = min(worst_lo, float(fi.min()))
            failures += int(bad.sum())
            if witness is None and bad.any():
                k = int(np.argmax(bad))
                witness = {"coordinate": i, "face": face, "q": Q[k].tolist(), "f_i": float(fi[k])}
    status = CERTIFIED if failures == 0 else FAILED
    return BoxCertificate(status, total, failures, "grid" if use_grid else "lhs",
                          face_samples if use_grid else 0, witness, worst_up, worst_lo, tol)


# -- box construction ---------------------------------------------------------

def default_margin(buffer: float, a: float = DEFAULT_A, eps: float | None = None) -> float:
    """Gap kept between a box face and its buffer so the occupancy gate stays open."""
    eps = default_eps(a) if eps is None else eps
    return max(0.01 * buffer, eps + 20.0 / a)


def _heights(nodes: list[str], links) -> dict[str, int]:
    succ: dict[str, list[str]] = {n: [] for n in nodes}
    for ln in links:
        succ[ln.src].append(ln.dst)
    memo: dict[str, int] = {}

    def h(u):
        if u not in memo:
            memo[u] = 1 + max((h(v) for v in succ[u]), default=-1)
        return memo[u]
    return {n: h(n) for n in nodes}


def _construct(net: NetworkInstance, pol: Policy | None, delta_step: float, margins, saturated) -> BoxRegion:
    require_valid(net)
    a = pol.a if pol is not None else DEFAULT_A
    eps = pol.eps if pol is not None else default_eps(a)
    layout = StateLayout.of(net, saturated)
    idx = layout.index
    per = net.buffer_mode != SHARED
    lower = np.zeros(len(layout))
    upper = np.zeros(len(layout))
    slack = []
    for com in net.commodities:
        nodes = net.commodity_nodes(com.id)
        links = net.commodity_links(com.id)
        heights = _heights(nodes, links)
        for n in nodes:
            if (n, com.id) not in idx:
                continue
            inflow = sum(net.link_share(ln, com.id) for ln in links if ln.dst == n)
            outflow = sum(net.link_share(ln, com.id) for ln in links if ln.src == n)
            mu = net.node(n).egress_for(com.id)
            cap_slack = outflow + mu - com.stationary_rate(n) - inflow
            if cap_slack < -1e-12:
                raise BoxConstructionError(
                    f"capacity feasibility violated at node {n} (commodity {com.id}): arrivals plus "
                    f"inflow capacity exceed outflow plus egress capacity by {-cap_slack:.6g}")
            i = idx[(n, com.id)]
            upper[i] = delta_step * (heights[n] + 1)
            node = net.node(n)
            rec = {"node": n, "commodity": com.id, "upper": upper[i], "capacity_slack": cap_slack}
            if not is_unbounded(node.buffer):
                b = float(net.allocation(n, com.id)) if per else float(node.buffer)
                d = (margins or {}).get(n, default_margin(b, a, eps))
                rec.update(buffer=b, margin=d, buffer_slack=b - d - upper[i])
                if upper[i] > b - d + 1e-12:
                    raise BoxConstructionError(
                        f"box construction infeasible at node {n} (commodity {com.id}): face "
                        f"{upper[i]:.6g} does not fit below buffer {b:.6g} minus margin {d:.6g}")
            slack.append(rec)
    return BoxRegion(lower, upper, layout, slack)


def construct_backpressure_box(net: NetworkInstance, pol: Policy | None = None, delta_step: float = 1.0,
                               margins: dict[str, float] | None = None,
                               saturated: Sequence[tuple[str, str]] = ()) -> BoxRegion:
    """Box ``[0, upper]`` whose faces satisfy the sign conditions under backpressure.

    ``upper`` grows by ``delta_step`` per level of the longest path to a sink,
    so every link points from a higher face to a lower one; finite buffers
    keep ``margins[node]`` (default :func:`default_margin`) of headroom.
    """
    if net.buffer_mode == SHARED:
        for n in net.node_ids:
            users = [c.id for c in net.commodities if n in net.commodity_nodes(c.id)]
            if len(users) > 1 and not is_unbounded(net.node(n).buffer):
                raise BoxConstructionError(
                    f"node {n} holds a buffer shared by several commodities; the product-box "
                    "argument does not apply, see bufnet.casestudy for the one-hop shared system")
    return _construct(net, pol, delta_step, margins, saturated)


def per_commodity_box(net: NetworkInstance, pol: Policy | None = None, delta_step: float = 1.0,
                      margins: dict[str, float] | None = None, face_samples: int = FACE_POINTS,
                      seed: int = 0) -> tuple[BoxRegion, BoxCertificate]:
    """Product of per-commodity boxes against buffer allocations, with its face certificate."""
    multi_shared = any(
        len([c for c in net.commodities if n in net.commodity_nodes(c.id)]) > 1
        and not is_unbounded(net.node(n).buffer) for n in net.node_ids)
    if net.buffer_mode == SHARED and multi_shared:
        raise BoxConstructionError(
            "shared buffers couple the commodities, so the per-commodity box argument is not "
            "applicable; see bufnet.casestudy for the one-hop shared system")
    box = _construct(net, pol, delta_step, margins, ())
    m = build_model(net, pol if pol is not None else _default_policy())
    return box, verify_poincare_miranda(m, box, face_samples, seed=seed)


def _default_policy() -> Policy:
    from .policies import smooth_backpressure

    return smooth_backpressure()


def certify_box(net: NetworkInstance, pol: Policy, delta_step: float = 1.0, face_samples: int = FACE_POINTS,
                seed: int = 0) -> EquilibriumCertificate:
    """Backpressure box, its face certificate, and an equilibrium search started at the box center."""
    box = construct_backpressure_box(net, pol, delta_step)
    m = build_model(net, pol)
    faces = verify_poincare_miranda(m, box, face_samples, seed=seed)
    layout = m.layout
    if not faces.certified:
        return EquilibriumCertificate(NOT_FOUND, None, math.nan, layout, "box faces violated", "box",
                                      box=box, face_stats=faces)
    # Newton alone stalls on the flat parts of the sigmoids; the solver adds the flow fallback
    sol = find_equilibrium(m, None, box.center, starts=1, seed=seed)
    notes = list(sol.notes)
    q, resid = None, math.nan
    if sol.status == FOUND:
        q, resid = sol.q, sol.residual
        if not box.contains(q):
            notes.append("the solver started at the box center converged outside the box")
    else:
        notes.append(f"the solver started at the box center returned {sol.status}")
    return EquilibriumCertificate(BOX_CERTIFIED, q, resid, layout, "sampled evidence", f"box+{sol.method}",
                                  sol.iterations, sol.starts, box, faces, notes)


# -- threshold sweep ----------------------------------------------------------

@dataclass
class SweepRow:
    lam: float
    status: str
    residual: float


@dataclass
class SweepResult:
    commodity: str
    lo: float
    hi: float
    threshold: float
    bracket: tuple[float, float]
    rows: list[SweepRow]
    iterations: int
    saturated: tuple[tuple[str, str], ...]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "status", "residual", "threshold_estimate"])
        for r in self.rows:
            w.writerow([repr(r.lam), r.status, repr(r.residual), repr(self.threshold)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {"commodity": self.commodity, "interval": [self.lo, self.hi], "threshold": self.threshold,
                "bracket": list(self.bracket), "iterations": self.iterations,
                "saturated": [list(s) for s in self.saturated],
                "evaluations": [{"lambda": r.lam, "status": r.status, "residual": r.residual}
                                for r in self.rows]}


def sweep_saturation(net: NetworkInstance, commodity: str) -> tuple[tuple[str, str], ...]:
    """Overloaded sources of every commodity except the swept one."""
    return tuple(s for s in overloaded_sources(net) if s[1] != commodity)


def existence_sweep(net: NetworkInstance, pol: Policy, commodity: str, interval: tuple[float, float],
                    iterations: int = SWEEP_ITERS, saturated: Sequence[tuple[str, str]] | str = "auto",
                    seed: int = 0, **solver) -> SweepResult:
    """Bisect on the total arrival rate of ``commodity`` for the edge of equilibrium existence.

    A rate counts as stable iff :func:`find_equilibrium` returns ``FOUND``.
    With ``saturated="auto"`` the overloaded sources of the other
    commodities are treated as infinitely backlogged.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise ValueError("sweep interval needs lo < hi")
    sat = sweep_saturation(net, commodity) if saturated == "auto" else tuple(tuple(s) for s in saturated)
    rows: list[SweepRow] = []

    def stable(lam):
        cert = find_equilibrium(net.with_arrival_rate(commodity, lam), pol, saturated=sat, seed=seed, **solver)
        rows.append(SweepRow(lam, cert.status, cert.residual))
        return cert.status == FOUND

    if not stable(lo) or stable(hi):
        raise BracketError(f"interval does not bracket transition: lambda={lo} -> {rows[0].status}, "
                           f"lambda={hi} -> {rows[-1].status}")
    a, b = lo, hi
    for _ in range(iterations):
        mid = 0.5 * (a + b)
        if stable(mid):
            a = mid
        else:
            b = mid
    return SweepResult(commodity, lo, hi, 0.5 * (a + b), (a, b), rows, iterations, sat)
