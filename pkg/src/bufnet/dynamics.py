"""Queue dynamics: flow-conservation drift and its numerical integration."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .model import FlowModel, build_model
from .network import NetworkInstance
from .policies import Policy

DEFAULT_STEP = 0.01
DIVERGENCE_CAP = 1e9
CLAMP_REPORT = 1e-6
FEAS_TOL = 1e-9


class InfeasibleStateError(ValueError):
    pass


def _model(net_or_model, pol=None, saturated=()) -> FlowModel:
    if isinstance(net_or_model, FlowModel):
        return net_or_model
    return build_model(net_or_model, pol, saturated)


def check_feasible(m: FlowModel, q: np.ndarray, tol: float = FEAS_TOL) -> None:
    q = np.asarray(q, dtype=float)
    if q.shape != (m.n,):
        raise InfeasibleStateError(f"state has shape {q.shape}, layout needs ({m.n},)")
    if not np.all(np.isfinite(q)):
        raise InfeasibleStateError("state has non-finite entries")
    if np.any(q < -tol):
        raise InfeasibleStateError(f"negative queue length {q.min():.3g}")
    if np.any(q > m.upper + tol):
        raise InfeasibleStateError("queue exceeds its buffer")
    occ = m.occupancy(q)
    if np.any(occ > m.g_cap + tol):
        raise InfeasibleStateError("shared buffer over-full")


def drift(net: NetworkInstance | FlowModel, pol: Policy | None, q: np.ndarray, t: float | None = None,
          saturated: Sequence[tuple[str, str]] = ()) -> np.ndarray:
    """``dq/dt`` at state ``q``: arrivals plus inflow minus outflow minus egress.

    ``t=None`` uses the stationary (final) arrival segment.
    """
    m = _model(net, pol, saturated)
    check_feasible(m, q)
    return m.drift(q, t)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    cum_egress: np.ndarray
    layout: object
    status: str
    h: float
    clamp_events: int
    max_overshoot: float
    steps: int
    method: str = "rk4"
    notes: list[str] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_events / max(self.steps, 1)

    def at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.states[:, i]) for i in range(self.states.shape[1])])

    def cum_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.cum_egress[:, c])
                         for c in range(self.cum_egress.shape[1])])

    def metadata(self) -> dict:
        return {
            "status": self.status,
            "method": self.method,
            "step": self.h,
            "steps": self.steps,
            "t_end": self.t_end,
            "clamp_events": self.clamp_events,
            "clamp_fraction": self.clamp_fraction,
            "max_buffer_overshoot": self.max_overshoot,
            "smoothing_too_loose": self.clamp_fraction > 1e-3,
            "notes": list(self.notes),
        }

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *self.layout.labels(), *(f"cum_egress_{c}" for c in self.layout.commodities)])
        for k in range(len(self.times)):
            w.writerow([repr(float(self.times[k])), *(repr(float(x)) for x in self.states[k]),
                        *(repr(float(x)) for x in self.cum_egress[k])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def integrate(net: NetworkInstance | FlowModel, pol: Policy | None, q0: np.ndarray, t_end: float,
              h: float = DEFAULT_STEP, adaptive: bool = False, rtol: float = 1e-6,
              record_every: int = 1, divergence_cap: float = DIVERGENCE_CAP,
              saturated: Sequence[tuple[str, str]] = (), stop_tol: float | None = None,
              t0: float = 0.0) -> Trajectory:
    """Integrate the queue ODE from ``q0`` up to ``t_end``.

    Fixed-step classical RK4 by default, projected back onto the feasible
    region after every step.  ``adaptive=True`` switches to step doubling with
    relative tolerance ``rtol``.  Divergence of an unbounded queue beyond
    ``divergence_cap`` ends the run with status ``"diverged"``; ``stop_tol``
    ends it early (status ``"converged"``) once the drift sup-norm drops below.
    """
    m = _model(net, pol, saturated)
    if not t_end > t0:
        raise ValueError("t_end must exceed the start time")
    check_feasible(m, q0)
    q0 = np.array(q0, dtype=float)
    if adaptive:
        return _integrate_adaptive(m, q0, t0, t_end, h, rtol, divergence_cap, stop_tol)
    nsteps = int(math.ceil((t_end - t0) / h - 1e-9))
    if m.is_custom:
        return _integrate_python(m, q0, t0, h, nsteps, record_every, divergence_cap, stop_tol)
    times, states, cum, status, clamps, over, done = K.rk4_fixed(
        q0, float(t0), float(h), nsteps, max(int(record_every), 1), m.seg_t, m.seg_lam,
        m.family, m.l_src, m.l_dst, m.l_grp, m.l_cap, m.l_a, m.l_eps,
        m.g_cap, m.g_ptr, m.g_idx, m.e_idx, m.e_mu, m.e_a, m.e_eps, m.e_com, m.ncom,
        m.upper, m.unbounded, float(divergence_cap), float(stop_tol or 0.0), CLAMP_REPORT)
    return Trajectory(times, states, cum, m.layout, _STATUS[status], h, int(clamps), float(over), int(done))


_STATUS = {K.STATUS_OK: "ok", K.STATUS_DIVERGED: "diverged", K.STATUS_CONVERGED: "converged"}


def _rk4_step(m: FlowModel, q, t, h):
    k1 = m.drift(q, t)
    e1 = m.egress_by_commodity(q)
    y = q + 0.5 * h * k1
    k2 = m.drift(y, t + 0.5 * h)
    e2 = m.egress_by_commodity(y)
    y = q + 0.5 * h * k2
    k3 = m.drift(y, t + 0.5 * h)
    e3 = m.egress_by_commodity(y)
    y = q + h * k3
    k4 = m.drift(y, t + h)
    e4 = m.egress_by_commodity(y)
    return q + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6, h * (e1 + 2 * e2 + 2 * e3 + e4) / 6, k1


def _diverged(m, q, cap):
    return (not np.all(np.isfinite(q))) or bool(np.any(np.abs(q[m.unbounded]) > cap))


def _integrate_python(m: FlowModel, q, t0, h, nsteps, record_every, cap, stop_tol) -> Trajectory:
    times, states, cums = [t0], [q.copy()], [np.zeros(m.ncom)]
    acc = np.zeros(m.ncom)
    clamps, over_max, status, t, done = 0, 0.0, "ok", t0, 0
    for step in range(nsteps):
        if stop_tol and np.max(np.abs(m.drift(q, t)), initial=0.0) < stop_tol:
            status = "converged"
            break
        q, de, _ = _rk4_step(m, q, t, h)
        acc = acc + de
        q, worst, over = m.clamp(q)
        clamps += worst > CLAMP_REPORT
        over_max = max(over_max, over)
        t = t0 + (step + 1) * h
        done = step + 1
        bad = _diverged(m, q, cap)
        if (step + 1) % record_every == 0 or bad:
            times.append(t)
            states.append(q.copy())
            cums.append(acc.copy())
        if bad:
            status = "diverged"
            break
    if times[-1] != t:
        times.append(t)
        states.append(q.copy())
        cums.append(acc.copy())
    return Trajectory(np.array(times), np.array(states), np.array(cums), m.layout, status, h,
                      clamps, over_max, done, method="rk4-python")


def _integrate_adaptive(m: FlowModel, q, t0, t_end, h, rtol, cap, stop_tol) -> Trajectory:
    times, states, cums = [t0], [q.copy()], [np.zeros(m.ncom)]
    acc = np.zeros(m.ncom)
    t, clamps, over_max, steps, status = t0, 0, 0.0, 0, "ok"
    h_min = 1e-10
    while t < t_end - 1e-12:
        h = min(h, t_end - t)
        if stop_tol and np.max(np.abs(m.drift(q, t)), initial=0.0) < stop_tol:
            status = "converged"
            break
        full, de_full, _ = _rk4_step(m, q, t, h)
        half, de1, _ = _rk4_step(m, q, t, h / 2)
        half2, de2, _ = _rk4_step(m, half, t + h / 2, h / 2)
        scale = np.maximum(np.abs(half2), 1.0)
        err = np.max(np.abs(half2 - full) / scale) / 15.0
        if err > rtol and h > h_min:
            h *= max(0.2, 0.9 * (rtol / err) ** 0.2)
            continue
        # local extrapolation keeps fifth-order accuracy on accepted steps
        q = half2 + (half2 - full) / 15.0
        acc = acc + de1 + de2
        t += h
        steps += 1
        q, worst, over = m.clamp(q)
        clamps += worst > CLAMP_REPORT
        over_max = max(over_max, over)
        times.append(t)
        states.append(q.copy())
        cums.append(acc.copy())
        if _diverged(m, q, cap):
            status = "diverged"
            break
        grow = 5.0 if err == 0 else min(5.0, 0.9 * (rtol / err) ** 0.2)
        h *= max(grow, 1.0)
    return Trajectory(np.array(times), np.array(states), np.array(cums), m.layout, status, h,
                      clamps, over_max, steps, method="rk4-step-doubling")


def throughput_estimate(traj: Trajectory, commodity: str, window: float) -> float:
    """Average egress rate of ``commodity`` over the final ``window`` time units."""
    span = traj.t_end - float(traj.times[0])
    if not window > 0 or 2 * window > span + 1e-9:
        raise ValueError(f"window {window} needs a trajectory of at least {2 * window}, have {span}")
    c = list(traj.layout.commodities).index(commodity)
    end = traj.cum_egress[-1, c]
    start = np.interp(traj.t_end - window, traj.times, traj.cum_egress[:, c])
    return float((end - start) / window)


def growth_rates(traj: Trajectory, window: float) -> np.ndarray:
    """Average ``dq/dt`` of every coordinate over the final ``window``."""
    window = min(window, traj.t_end - float(traj.times[0]))
    before = traj.at(traj.t_end - window)
    return (traj.final - before) / window


def stationary_arrivals(m: FlowModel) -> np.ndarray:
    """Total stationary arrival rate per commodity (saturated sources excluded)."""
    return np.bincount([m.layout.commodities.index(c) for _, c in m.layout.entries],
                       weights=m.stationary_lam, minlength=m.ncom)
