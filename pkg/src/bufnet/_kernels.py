"""Compiled inner loops shared by the policy, dynamics and equilibrium code.

Everything here works on flat arrays produced by :class:`bufnet.model.FlowModel`.
Link terms are described by ``(src, dst, grp, cap, a, eps)``; ``src == -1``
marks a saturated (infinitely backlogged) upstream queue and ``grp == -1`` an
unbounded downstream buffer.
"""

import math

import numpy as np
from numba import njit

SMOOTH_BACKPRESSURE = 0
BUFFER_OCCUPANCY = 1

STATUS_OK = 0
STATUS_DIVERGED = 1
STATUS_CONVERGED = 2


@njit(cache=True)
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def log_sigmoid(x):
    # log(1/(1+exp(-x))) without overflow in either tail
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True)
def logaddexp(x, y):
    if x == -np.inf:
        return y
    if y == -np.inf:
        return x
    m = max(x, y)
    return m + math.log1p(math.exp(-abs(x - y)))


@njit(cache=True)
def link_rate(family, qi, qj, occ, cap_b, c, a, eps):
    """Rate on one link and its partials.

    Returns ``(g, d/dqi, d/dqj, d/docc)`` where ``occ`` is the occupancy of the
    downstream buffer that gates admission.  For a private buffer ``occ`` is
    ``qj`` itself and the caller adds the last two partials.
    """
    if family == SMOOTH_BACKPRESSURE:
        x = a * (qi - qj - eps)
        al = sigmoid(x)
        dal = a * al * sigmoid(-x)
        if cap_b == np.inf:
            be = 1.0
            dbe = 0.0
        else:
            y = a * (cap_b - eps - occ)
            be = sigmoid(y)
            dbe = -a * be * sigmoid(-y)
        return c * al * be, c * dal * be, -c * dal * be, c * al * dbe
    # buffer occupancy
    z = a * (qi - eps)
    ga = sigmoid(z)
    dga = a * ga * sigmoid(-z)
    room = 1.0 - occ / cap_b
    return c * ga * room, c * dga * room, 0.0, -c * ga / cap_b


@njit(cache=True)
def link_value(family, qi, qj, occ, cap_b, c, a, eps):
    """Rate on one link without partials (the integrator's hot path)."""
    if family == SMOOTH_BACKPRESSURE:
        be = 1.0 if cap_b == np.inf else sigmoid(a * (cap_b - eps - occ))
        return c * sigmoid(a * (qi - qj - eps)) * be
    return c * sigmoid(a * (qi - eps)) * (1.0 - occ / cap_b)


@njit(cache=True)
def link_log_partials(family, qi, qj, occ, cap_b, c, a, eps):
    """Natural logs of ``dg/dqi`` and ``-(dg/dqj + dg/docc)``.

    Both partials are products of strictly positive factors for the built-in
    families, so their logs are finite wherever the partial is positive even
    when the value itself underflows.
    """
    if family == SMOOTH_BACKPRESSURE:
        x = a * (qi - qj - eps)
        log_dal = math.log(a) + log_sigmoid(x) + log_sigmoid(-x)
        if cap_b == np.inf:
            log_be = 0.0
            log_dbe_al = -np.inf
        else:
            y = a * (cap_b - eps - occ)
            log_be = log_sigmoid(y)
            log_dbe_al = math.log(a) + log_be + log_sigmoid(-y) + log_sigmoid(x)
        lc = math.log(c)
        log_dqi = lc + log_dal + log_be
        log_ndqj = lc + logaddexp(log_dal + log_be, log_dbe_al)
        return log_dqi, log_ndqj
    z = a * (qi - eps)
    lc = math.log(c)
    room = 1.0 - occ / cap_b
    if room > 0.0:
        log_dqi = lc + math.log(a) + log_sigmoid(z) + log_sigmoid(-z) + math.log(room)
    else:
        log_dqi = -np.inf
    log_ndqj = lc + log_sigmoid(z) - math.log(cap_b)
    return log_dqi, log_ndqj


@njit(cache=True)
def egress_rate(qi, mu, a, eps):
    w = a * (qi - eps)
    s = sigmoid(w)
    return mu * s, mu * a * s * sigmoid(-w)


@njit(cache=True)
def egress_log_partial(qi, mu, a, eps):
    w = a * (qi - eps)
    return math.log(mu) + math.log(a) + log_sigmoid(w) + log_sigmoid(-w)


@njit(cache=True)
def _occupancy(q, g_ptr, g_idx, out):
    for g in range(g_ptr.shape[0] - 1):
        s = 0.0
        for k in range(g_ptr[g], g_ptr[g + 1]):
            s += q[g_idx[k]]
        out[g] = s


@njit(cache=True)
def _drift_eg(q, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
              g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, e_com, occ, out, eg):
    """Drift into ``out``; egress per commodity into ``eg`` when it is non-empty."""
    _occupancy(q, g_ptr, g_idx, occ)
    for i in range(q.shape[0]):
        out[i] = lam[i]
    for t in range(l_dst.shape[0]):
        s = l_src[t]
        d = l_dst[t]
        qi = q[s] if s >= 0 else np.inf
        gr = l_grp[t]
        if gr >= 0:
            oc = occ[gr]
            bc = g_cap[gr]
        else:
            oc = q[d]
            bc = np.inf
        g = link_value(family, qi, q[d], oc, bc, l_cap[t], l_a[t], l_eps[t])
        out[d] += g
        if s >= 0:
            out[s] -= g
    for c in range(eg.shape[0]):
        eg[c] = 0.0
    for t in range(e_idx.shape[0]):
        g = e_mu[t] * sigmoid(e_a[t] * (q[e_idx[t]] - e_eps[t]))
        out[e_idx[t]] -= g
        if eg.shape[0] > 0:
            eg[e_com[t]] += g


@njit(cache=True)
def drift_into(q, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
               g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, occ, out):
    _drift_eg(q, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
              g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, e_idx, occ, out, np.empty(0))


@njit(cache=True)
def drift_batch(Q, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
                g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps):
    out = np.empty_like(Q)
    occ = np.empty(g_cap.shape[0])
    for r in range(Q.shape[0]):
        drift_into(Q[r], lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
                   g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, occ, out[r])
    return out


@njit(cache=True)
def link_terms(q, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps, g_cap, g_ptr, g_idx):
    """Per-link ``(g, dqi, dqj, docc)`` rows evaluated at ``q``."""
    occ = np.empty(g_cap.shape[0])
    _occupancy(q, g_ptr, g_idx, occ)
    out = np.empty((l_dst.shape[0], 4))
    for t in range(l_dst.shape[0]):
        s = l_src[t]
        d = l_dst[t]
        qi = q[s] if s >= 0 else np.inf
        gr = l_grp[t]
        if gr >= 0:
            oc = occ[gr]
            bc = g_cap[gr]
        else:
            oc = q[d]
            bc = np.inf
        g, dqi, dqj, docc = link_rate(family, qi, q[d], oc, bc, l_cap[t], l_a[t], l_eps[t])
        out[t, 0] = g
        out[t, 1] = dqi
        out[t, 2] = dqj
        out[t, 3] = docc
    return out


@njit(cache=True)
def link_log_terms(q, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps, g_cap, g_ptr, g_idx):
    occ = np.empty(g_cap.shape[0])
    _occupancy(q, g_ptr, g_idx, occ)
    out = np.empty((l_dst.shape[0], 2))
    for t in range(l_dst.shape[0]):
        s = l_src[t]
        d = l_dst[t]
        qi = q[s] if s >= 0 else np.inf
        gr = l_grp[t]
        if gr >= 0:
            oc = occ[gr]
            bc = g_cap[gr]
        else:
            oc = q[d]
            bc = np.inf
        li, lj = link_log_partials(family, qi, q[d], oc, bc, l_cap[t], l_a[t], l_eps[t])
        out[t, 0] = li
        out[t, 1] = lj
    return out


@njit(cache=True)
def jacobian_from_terms(n, terms, l_src, l_dst, l_grp, g_ptr, g_idx, e_idx, e_d):
    J = np.zeros((n, n))
    for t in range(l_dst.shape[0]):
        s = l_src[t]
        d = l_dst[t]
        dqi = terms[t, 1]
        dqj = terms[t, 2]
        docc = terms[t, 3]
        gr = l_grp[t]
        if s >= 0:
            J[d, s] += dqi
            J[s, s] -= dqi
        J[d, d] += dqj
        if s >= 0:
            J[s, d] -= dqj
        if gr >= 0:
            for k in range(g_ptr[gr], g_ptr[gr + 1]):
                m = g_idx[k]
                J[d, m] += docc
                if s >= 0:
                    J[s, m] -= docc
        else:
            # unbounded downstream: occupancy is qj itself (docc is zero here)
            J[d, d] += docc
            if s >= 0:
                J[s, d] -= docc
    for t in range(e_idx.shape[0]):
        J[e_idx[t], e_idx[t]] -= e_d[t]
    return J


@njit(cache=True)
def egress_terms(q, e_idx, e_mu, e_a, e_eps):
    out = np.empty((e_idx.shape[0], 2))
    for t in range(e_idx.shape[0]):
        g, dg = egress_rate(q[e_idx[t]], e_mu[t], e_a[t], e_eps[t])
        out[t, 0] = g
        out[t, 1] = dg
    return out


@njit(cache=True)
def clamp_state(q, upper, g_cap, g_ptr, g_idx, occ):
    """Project onto the feasible region in place.

    Returns ``(largest violation, buffer overshoot)``; the second value only
    counts excess occupancy of finite buffers.
    """
    worst = 0.0
    over = 0.0
    for i in range(q.shape[0]):
        if q[i] < 0.0:
            if -q[i] > worst:
                worst = -q[i]
            q[i] = 0.0
        elif q[i] > upper[i]:
            ex = q[i] - upper[i]
            if ex > worst:
                worst = ex
            if ex > over:
                over = ex
            q[i] = upper[i]
    _occupancy(q, g_ptr, g_idx, occ)
    for g in range(g_cap.shape[0]):
        if occ[g] > g_cap[g]:
            ex = occ[g] - g_cap[g]
            if ex > worst:
                worst = ex
            if ex > over:
                over = ex
            scale = g_cap[g] / occ[g]
            for k in range(g_ptr[g], g_ptr[g + 1]):
                q[g_idx[k]] *= scale
    return worst, over


@njit(cache=True)
def _stage_lam(t, seg_t, seg_lam):
    k = 0
    for s in range(seg_t.shape[0]):
        if seg_t[s] <= t:
            k = s
    return seg_lam[k]


@njit(cache=True)
def rk4_fixed(q0, t0, h, nsteps, record_every, seg_t, seg_lam, family,
              l_src, l_dst, l_grp, l_cap, l_a, l_eps, g_cap, g_ptr, g_idx,
              e_idx, e_mu, e_a, e_eps, e_com, ncom, upper, unbounded,
              divergence_cap, stop_tol, clamp_report):
    """Classical RK4 with post-step projection.

    The cumulative egress of every commodity rides along as extra quadrature
    components so it uses the same stage evaluations as the state.
    """
    n = q0.shape[0]
    nrec = nsteps // record_every + 2
    times = np.empty(nrec)
    states = np.empty((nrec, n))
    cum = np.empty((nrec, ncom))
    occ = np.empty(g_cap.shape[0])
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    e1 = np.empty(ncom)
    e2 = np.empty(ncom)
    e3 = np.empty(ncom)
    e4 = np.empty(ncom)
    tmp = np.empty(n)
    q = q0.copy()
    acc = np.zeros(ncom)
    t = t0
    times[0] = t
    states[0] = q
    cum[0] = acc
    r = 1
    clamps = 0
    max_over = 0.0
    status = STATUS_OK
    done = 0
    for step in range(nsteps):
        lam = _stage_lam(t, seg_t, seg_lam)
        _drift_eg(q, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
                  g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, e_com, occ, k1, e1)
        if stop_tol > 0.0:
            m = 0.0
            for i in range(n):
                if abs(k1[i]) > m:
                    m = abs(k1[i])
            if m < stop_tol:
                status = STATUS_CONVERGED
                break
        lam = _stage_lam(t + 0.5 * h, seg_t, seg_lam)
        for i in range(n):
            tmp[i] = q[i] + 0.5 * h * k1[i]
        _drift_eg(tmp, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
                  g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, e_com, occ, k2, e2)
        for i in range(n):
            tmp[i] = q[i] + 0.5 * h * k2[i]
        _drift_eg(tmp, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
                  g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, e_com, occ, k3, e3)
        lam = _stage_lam(t + h, seg_t, seg_lam)
        for i in range(n):
            tmp[i] = q[i] + h * k3[i]
        _drift_eg(tmp, lam, family, l_src, l_dst, l_grp, l_cap, l_a, l_eps,
                  g_cap, g_ptr, g_idx, e_idx, e_mu, e_a, e_eps, e_com, occ, k4, e4)
        for i in range(n):
            q[i] += h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0
        for c in range(ncom):
            acc[c] += h * (e1[c] + 2.0 * e2[c] + 2.0 * e3[c] + e4[c]) / 6.0
        worst, over = clamp_state(q, upper, g_cap, g_ptr, g_idx, occ)
        if worst > clamp_report:
            clamps += 1
        if over > max_over:
            max_over = over
        t = t0 + (step + 1) * h
        done = step + 1
        bad = False
        for i in range(n):
            if not math.isfinite(q[i]) or (unbounded[i] and abs(q[i]) > divergence_cap):
                bad = True
        if (step + 1) % record_every == 0 or bad:
            times[r] = t
            states[r] = q
            cum[r] = acc
            r += 1
        if bad:
            status = STATUS_DIVERGED
            break
    if times[r - 1] != t:
        times[r] = t
        states[r] = q
        cum[r] = acc
        r += 1
    return times[:r], states[:r], cum[:r], status, clamps, max_over, done
