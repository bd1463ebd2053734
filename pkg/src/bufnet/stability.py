"""Jacobian-based stability checks.

Covers the drift Jacobian (analytic and finite-difference), its spectrum,
column and block diagonal dominance, the M-matrix test on diagonal blocks,
the positive null vector of the egress-free Jacobian and the diagonal
Lyapunov certificate built from it, plus sampled scans of the pointwise
policy conditions over the feasible region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import FlowModel, build_model
from .network import NetworkInstance, feasible_box, sample_feasible
from .policies import Policy, check_pointwise_condition

TOL = 1e-9
FD_STEP = 1e-6

PASS = "PASS"
FAIL = "FAIL"
INCONCLUSIVE = "INCONCLUSIVE"


class SpectrumError(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class PerronError(RuntimeError):
    pass


@dataclass
class JacobianMatrix:
    J: np.ndarray
    blocks: dict[str, slice]
    q: np.ndarray
    method: str
    egress_partials: np.ndarray
    links: list[tuple[int, int]]
    labels: list[str]

    @property
    def without_egress(self) -> np.ndarray:
        """``J`` with the egress contribution removed from the diagonal."""
        return self.J + np.diag(self.egress_partials)

    @property
    def partition(self) -> list[slice]:
        return list(self.blocks.values())

    def to_dict(self) -> dict:
        return {"method": self.method, "matrix": self.J.tolist(), "labels": self.labels,
                "blocks": {c: [s.start, s.stop] for c, s in self.blocks.items()}}


def jacobian(net: NetworkInstance | FlowModel, pol: Policy | None, q: np.ndarray,
             method: str = "analytic", saturated: Sequence[tuple[str, str]] = (),
             h: float = FD_STEP) -> JacobianMatrix:
    m = net if isinstance(net, FlowModel) else build_model(net, pol, saturated)
    q = np.asarray(q, dtype=float)
    if method == "analytic":
        J = m.jacobian(q)
    elif method in ("fd", "finite-difference"):
        J = m.fd_jacobian(q, h)
        method = "finite-difference"
    else:
        raise ValueError(f"unknown Jacobian method {method!r}")
    links = sorted({(int(s), int(d)) for s, d in zip(m.l_src, m.l_dst) if s >= 0})
    return JacobianMatrix(J, m.layout.blocks(), q.copy(), method, m.egress_partials(q), links,
                          m.layout.labels())


def _as_array(J) -> np.ndarray:
    return J.J if isinstance(J, JacobianMatrix) else np.asarray(J, dtype=float)


def eigen_spectrum(J) -> np.ndarray:
    """All eigenvalues, sorted by real part (largest first)."""
    A = _as_array(J)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("eigen_spectrum needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise SpectrumError("matrix has non-finite entries")
    try:
        ev = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise SpectrumError(f"eigenvalue iteration did not converge: {exc}") from exc
    order = np.lexsort((-ev.imag, -ev.real))
    return ev[order]


def max_real_part(J) -> float:
    ev = eigen_spectrum(J)
    return float(ev.real.max()) if ev.size else -math.inf


@dataclass
class ColumnDominance:
    passed: bool
    margins: np.ndarray
    diagonal_negative: bool
    tol: float

    @property
    def status(self) -> str:
        return PASS if self.passed else FAIL

    def to_dict(self) -> dict:
        return {"status": self.status, "margins": self.margins.tolist(),
                "diagonal_negative": self.diagonal_negative, "tol": self.tol}


def check_column_dominance(J, tol: float = TOL) -> ColumnDominance:
    A = _as_array(J)
    d = np.diag(A)
    off = np.abs(A).sum(axis=0) - np.abs(d)
    margins = np.abs(d) - off
    neg = bool(np.all(d < 0))
    return ColumnDominance(neg and bool(np.all(margins >= -tol)), margins, neg, tol)


def _gram_extreme(M: np.ndarray, which: str) -> float:
    """``sqrt`` of the extreme eigenvalue of a Gram matrix of ``M``."""
    if M.size == 0:
        return 0.0
    if which == "min":
        G = M @ M.T
        lam = np.linalg.eigvalsh(G)[0]
    else:
        G = M.T @ M
        lam = np.linalg.eigvalsh(G)[-1]
    return math.sqrt(max(float(lam), 0.0))


@dataclass
class BlockDominance:
    status: str
    margins: np.ndarray
    sigma_min: np.ndarray
    coupling: np.ndarray
    reason: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self) -> dict:
        return {"status": self.status, "margins": self.margins.tolist(), "sigma_min": self.sigma_min.tolist(),
                "coupling": self.coupling.tolist(), "reason": self.reason, "tol": self.tol}


def _partition(J, partition) -> list[slice]:
    if partition is None:
        if isinstance(J, JacobianMatrix):
            return J.partition
        raise ValueError("a partition is required for a bare matrix")
    if isinstance(partition, Mapping):
        return list(partition.values())
    out = []
    for p in partition:
        out.append(p if isinstance(p, slice) else slice(int(p[0]), int(p[1])))
    return out


def check_block_dominance(J, partition=None, tol: float = TOL) -> BlockDominance:
    """Column-block strict diagonal dominance in the spectral norm.

    For each block column ``l``: ``sigma_min(J_ll) - sum_{p != l} sigma_max(J_pl)``,
    with ``sigma_min(M) = sqrt(lambda_min(M M^T))`` and
    ``sigma_max(M) = sqrt(lambda_max(M^T M))``.
    """
    A = _as_array(J)
    parts = _partition(J, partition)
    covered = sorted((s.start, s.stop) for s in parts)
    pos = 0
    for a, b in covered:
        if a != pos or b <= a:
            raise ValueError("partition must tile the matrix exactly")
        pos = b
    if pos != A.shape[0] or A.shape[0] != A.shape[1]:
        raise ValueError("partition must tile the matrix exactly")
    C = len(parts)
    smin = np.zeros(C)
    coup = np.zeros(C)
    for l, sl in enumerate(parts):
        smin[l] = _gram_extreme(A[sl, sl], "min")
        coup[l] = sum(_gram_extreme(A[sp, sl], "max") for p, sp in enumerate(parts) if p != l)
    margins = smin - coup
    if np.any(smin < tol):
        return BlockDominance(FAIL, margins, smin, coup, "nonsingularity violated", tol)
    if np.all(margins > tol):
        return BlockDominance(PASS, margins, smin, coup, "", tol)
    if np.any(margins < -tol):
        return BlockDominance(FAIL, margins, smin, coup, "coupling exceeds diagonal block", tol)
    return BlockDominance(INCONCLUSIVE, margins, smin, coup, "margin within tolerance of zero", tol)


@dataclass
class MMatrixVerdict:
    passed: bool
    max_offdiag: float
    min_real_eig: float
    tol: float

    def to_dict(self) -> dict:
        return {"status": PASS if self.passed else FAIL, "max_offdiag": self.max_offdiag,
                "min_real_eigenvalue": self.min_real_eig, "tol": self.tol}


def check_m_matrix(M, tol: float = TOL) -> MMatrixVerdict:
    A = _as_array(M)
    off = A - np.diag(np.diag(A))
    mo = float(off.max()) if A.shape[0] > 1 else 0.0
    mr = float(np.linalg.eigvals(A).real.min()) if A.size else math.inf
    return MMatrixVerdict(mo <= tol and mr >= -tol, mo, mr, tol)


@dataclass
class PerronResult:
    delta: np.ndarray
    theta: float
    iterations: int
    residual: float

    def to_dict(self) -> dict:
        return {"delta": self.delta.tolist(), "theta": self.theta, "iterations": self.iterations,
                "residual": self.residual}


def perron_null_vector(J0, tol: float = 1e-12, max_iter: int = 100_000,
                       residual_tol: float = 1e-9, retries: int = 2) -> PerronResult:
    """Positive ``delta`` with ``J0 @ delta = 0`` via power iteration on ``J0 + theta I``.

    ``J0`` must have nonnegative off-diagonal entries and zero column sums.
    The shift starts at ``2 max|diag| + 1`` and doubles on failure.
    """
    A = _as_array(J0)
    n = A.shape[0]
    if n == 0:
        raise PerronError("empty matrix")
    off = A - np.diag(np.diag(A))
    if off.min() < -1e-12 * max(1.0, np.abs(A).max()):
        raise PerronError("Perron assumptions violated: negative off-diagonal entry")
    theta = 2.0 * np.abs(np.diag(A)).max() + 1.0
    last = None
    for _ in range(retries + 1):
        M = A + theta * np.eye(n)
        M[M < 0] = 0.0  # rounding-level negatives on the off-diagonal
        v = np.full(n, 1.0 / n)
        it = 0
        for it in range(1, max_iter + 1):
            w = M @ v
            w /= w.sum()
            if np.abs(w - v).max() < tol:
                v = w
                break
            v = w
        res = float(np.abs(A @ v).max())
        last = PerronResult(v, theta, it, res)
        if v.min() > 0 and res < residual_tol:
            return last
        theta *= 2.0
    raise PerronError(f"Perron assumptions violated: residual {last.residual:.3g}, "
                      f"min entry {last.delta.min():.3g} after {last.iterations} iterations")


@dataclass
class LyapunovCertificate:
    delta: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    lambda_max: float
    passed: bool
    alphas: dict[tuple[int, int], float]
    null_residual: float
    tol: float

    @property
    def alphas_negative(self) -> bool:
        return all(v < 0 for v in self.alphas.values())

    def to_dict(self) -> dict:
        return {"status": PASS if self.passed else FAIL, "lambda_max": self.lambda_max,
                "delta": self.delta.tolist(), "null_residual": self.null_residual,
                "alphas": [{"link": list(k), "alpha": v} for k, v in sorted(self.alphas.items())],
                "alphas_negative": self.alphas_negative, "tol": self.tol}


def lyapunov_certificate(J, delta: np.ndarray, links: Sequence[tuple[int, int]] | None = None,
                         tol: float = TOL) -> LyapunovCertificate:
    """Diagonal Lyapunov test ``A J + J^T A`` with ``A = diag(1/delta)``."""
    A_ = _as_array(J)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive")
    if links is None and isinstance(J, JacobianMatrix):
        links = J.links
    Adiag = np.diag(1.0 / delta)
    Q = Adiag @ A_ + A_.T @ Adiag
    lam = float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[-1])
    alphas = {}
    for i, j in links or []:
        # dg_ij/dq_i = J[j, i]; dg_ij/dq_j = -J[i, j]
        alphas[(i, j)] = float(-delta[i] * A_[j, i] - delta[j] * A_[i, j])
    null_res = float("nan")
    if isinstance(J, JacobianMatrix):
        null_res = float(np.abs(J.without_egress @ delta).max())
    return LyapunovCertificate(delta, np.diag(Adiag).copy(), Q, lam, lam < -tol, alphas, null_res, tol)


@dataclass
class GlobalConditionReport:
    samples: int
    passed: int
    failed: int
    worst_dgi: float
    worst_neg_dgj: float
    worst_egress: float
    failing_states: list[list[float]]
    truncated: bool
    method: str
    pointwise_failed: int = 0
    multi: dict = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return self.failed == 0

    @property
    def fail_fraction(self) -> float:
        return self.failed / max(self.samples, 1)

    def to_dict(self) -> dict:
        d = {"samples": self.samples, "passed": self.passed, "failed": self.failed,
             "pointwise_failed": self.pointwise_failed,
             "worst_min_dgi": self.worst_dgi, "worst_min_neg_dgj": self.worst_neg_dgj,
             "worst_max_egress_partial": self.worst_egress,
             "failing_states": self.failing_states[:5], "sampler": self.method,
             "truncated": self.truncated}
        if self.truncated:
            d["caveat"] = ("unbounded queues were sampled only up to the truncation cap; the "
                           "global hypothesis over the whole feasible region is not machine-checked")
        if self.multi:
            d["multi_commodity"] = self.multi
        return d


def grid_condition_scan(net: NetworkInstance, pol: Policy, samples: int = 10_000, sampler: str = "lhs",
                        seed: int = 0, cap: float = 100.0, saturated: Sequence[tuple[str, str]] = (),
                        tol: float = 1e-12, block_checks: bool = True,
                        max_failing: int = 20) -> GlobalConditionReport:
    """Check the pointwise policy conditions at sampled feasible states.

    ``sampler`` is ``"lhs"``, ``"uniform"`` or ``"grid"`` (``samples`` is then
    rounded to a full tensor grid).  With several commodities the M-matrix and
    block-dominance checks of each sample's Jacobian are tallied as well.
    """
    m = build_model(net, pol, saturated)
    region = feasible_box(net, cap, saturated)
    rng = np.random.default_rng(seed)
    if sampler == "grid":
        per = max(int(round(samples ** (1.0 / max(m.n, 1)))), 2)
        axes = [np.linspace(lo, hi, per + 2)[1:-1] for lo, hi in zip(region.lower, region.upper)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, m.n)
        for _, idx, b in region.simplex:
            tot = pts[:, idx].sum(axis=1)
            keep = tot < b
            pts = pts[keep]
    else:
        pts = sample_feasible(region, samples, rng, method=sampler)
    n_pass = 0
    n_point = 0
    wd, wj, we = math.inf, math.inf, math.inf
    failing = []
    multi = m.ncom > 1 and block_checks
    mm_fail = 0
    bd = {PASS: 0, FAIL: 0, INCONCLUSIVE: 0}
    for q in pts:
        v = check_pointwise_condition(pol, net, q, saturated, tol, model=m)
        ok = v.passed
        n_point += not ok
        wd = min(wd, v.min_dgi)
        wj = min(wj, v.min_neg_dgj)
        we = min(we, v.max_egress)
        if multi:
            J = m.jacobian(q)
            blocks = list(m.layout.blocks().values())
            if not all(check_m_matrix(-J[s, s]).passed for s in blocks):
                mm_fail += 1
                ok = False
            b = check_block_dominance(J, blocks)
            bd[b.status] += 1
            ok = ok and b.passed
        if ok:
            n_pass += 1
        elif len(failing) < max_failing:
            failing.append(q.tolist())
    extra = {}
    if multi:
        extra = {"m_matrix_failures": mm_fail, "block_dominance": bd}
    return GlobalConditionReport(len(pts), n_pass, len(pts) - n_pass, wd, wj, we, failing,
                                 region.any_truncated, sampler, n_point, extra)
