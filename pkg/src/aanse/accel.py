"""Depth-m Anderson acceleration for an abstract fixed-point map.

The mixing step minimises ``|| sum_j alpha_j w_j ||_*`` over affine
coefficients (``sum_j alpha_j = 1``) exactly, by a QR factorisation of the
residual differences carried out in the ``*``-inner product.  The driver
records enough per-step data (gains, coefficient partial sums, update norms)
for the recursion audits at the bottom of this module to be run afterwards.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import EmptyHistory, HypothesisViolated, InsufficientTrace, OperatorFailure
from .linalg import InnerProduct, euclidean, ip_norm

FixedPointMap = Callable[[np.ndarray], np.ndarray]

CONVERGED = "Converged"
MAX_ITERS = "MaxIters"
DIVERGED = "Diverged"
FAILED = "Failed"


@dataclass(frozen=True)
class AndersonConfig:
    depth_m: int = 0
    damping_beta: float = 1.0
    max_iters: int = 200
    tol_abs: float = 1e-8
    tol_rel: float = 0.0
    divergence_factor: float = 1e4
    cond_threshold: float = 1e10

    def __post_init__(self):
        if int(self.depth_m) != self.depth_m or self.depth_m < 0:
            raise ValueError(f"depth_m must be a nonnegative integer, got {self.depth_m}")
        if not 0.0 < self.damping_beta <= 1.0:
            raise ValueError(f"damping_beta must lie in (0, 1], got {self.damping_beta}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tol_abs > 0.0:
            raise ValueError("tol_abs must be positive")
        if self.tol_rel < 0.0:
            raise ValueError("tol_rel must be nonnegative")
        if not self.divergence_factor > 1.0:
            raise ValueError("divergence_factor must exceed 1")
        if not self.cond_threshold > 1.0:
            raise ValueError("cond_threshold must exceed 1")


class AndersonHistory:
    """Sliding window of iterates ``u_j`` and images ``G(u_j)``, newest last.

    The head iterate may be pending (pushed without its image); the mixing
    step completes it.
    """

    def __init__(self, depth_m: int, ip: InnerProduct):
        self.depth_m = int(depth_m)
        self.ip = ip
        self.iterates: deque[np.ndarray] = deque(maxlen=self.depth_m + 1)
        self.images: deque[np.ndarray] = deque(maxlen=self.depth_m + 1)
        self.residuals: deque[np.ndarray] = deque(maxlen=self.depth_m + 1)

    def __len__(self) -> int:
        return len(self.residuals)

    @property
    def head(self) -> np.ndarray:
        return self.iterates[-1]

    def push(self, u: np.ndarray, g: np.ndarray | None = None) -> None:
        if self.images and self.images[-1] is None:
            raise ValueError("head iterate has no image yet")
        self.iterates.append(u)
        self.images.append(g)
        if g is not None:
            self.residuals.append(g - u)

    def complete(self, g: np.ndarray) -> None:
        """Attach ``G(u_k)`` to the pending head iterate."""
        if not self.images or self.images[-1] is not None:
            raise ValueError("no pending iterate")
        self.images[-1] = g
        self.residuals.append(g - self.iterates[-1])


@dataclass
class MixingResult:
    alphas: np.ndarray       # oldest first, length m_k + 1
    theta: float
    eta_partial: float
    objective: float
    depth: int               # columns kept after the conditioning check


def _weighted_qr(cols: list[np.ndarray], ip: InnerProduct) -> tuple[list[np.ndarray], np.ndarray]:
    """Modified Gram-Schmidt with one reorthogonalisation pass in the ``ip`` geometry."""
    d = len(cols)
    Q: list[np.ndarray] = []
    R = np.zeros((d, d))
    for j, c in enumerate(cols):
        v = np.array(c, dtype=np.float64)
        for _ in range(2):
            for i, q in enumerate(Q):
                h = ip(q, v)
                R[i, j] += h
                v -= h * q
        nrm = ip_norm(v, ip)
        R[j, j] = nrm
        Q.append(v / nrm if nrm > 0.0 else np.zeros_like(v))
    return Q, R


def _gram_condition(R: np.ndarray) -> float:
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return 1.0
    if diag.min() == 0.0:
        return math.inf
    s = np.linalg.svd(R, compute_uv=False)
    return float((s[0] / s[-1]) ** 2)


def alphas_from_gamma(gamma: np.ndarray, m_k: int) -> np.ndarray:
    """Map difference weights ``gamma`` (newest difference first) to affine ``alpha`` (oldest first)."""
    g = np.zeros(m_k)
    g[:len(gamma)] = gamma
    # newest-first coefficients: w_k -> 1 - g1, w_{k-i} -> g_i - g_{i+1}, oldest -> g_m
    newest_first = np.empty(m_k + 1)
    newest_first[0] = 1.0 - (g[0] if m_k else 0.0)
    for i in range(1, m_k):
        newest_first[i] = g[i - 1] - g[i]
    if m_k:
        newest_first[m_k] = g[m_k - 1]
    return newest_first[::-1].copy()


_NOISE = 1e-13


def solve_mixing(history: AndersonHistory, cond_threshold: float = 1e10) -> MixingResult:
    """Exact affine least-squares mixing over the residual window of ``history``."""
    if len(history) == 0:
        raise EmptyHistory("mixing needs at least one residual")
    ip = history.ip
    ws = list(history.residuals)
    m_k = len(ws) - 1
    wk = ws[-1]
    wnorm = ip_norm(wk, ip)
    if wnorm == 0.0:
        alphas = np.zeros(m_k + 1)
        alphas[-1] = 1.0
        return MixingResult(alphas, 0.0, 0.0, 0.0, 0)

    # column i (0-based) is w_{k-i} - w_{k-i-1}; the last column is the oldest
    cols = [ws[-1 - i] - ws[-2 - i] for i in range(m_k)]
    while cols:
        Q, R = _weighted_qr(cols, ip)
        # a difference that is round-off relative to w_k carries no information
        if _gram_condition(R) <= cond_threshold and np.abs(np.diag(R)).min() > _NOISE * wnorm:
            break
        cols.pop()
    if cols:
        rhs = np.array([ip(q, wk) for q in Q])
        gamma = scipy.linalg.solve_triangular(R, rhs)
    else:
        gamma = np.zeros(0)
    alphas = alphas_from_gamma(gamma, m_k)

    mixed = np.zeros_like(wk)
    for a, w in zip(alphas, ws):
        mixed += a * w
    objective = ip_norm(mixed, ip)
    partial = np.cumsum(alphas)[:-1]
    eta = float(np.abs(partial).max()) if partial.size else 0.0
    return MixingResult(alphas, objective / wnorm, eta, objective, len(cols))


def anderson_step(history: AndersonHistory, g_of_uk: np.ndarray, config: AndersonConfig):
    """Complete the pending head with ``G(u_k)``, mix, and push ``u_{k+1}`` as the new head.

    Returns ``(u_next, mixing)``.
    """
    history.complete(g_of_uk)
    mix = solve_mixing(history, config.cond_threshold)
    beta = config.damping_beta
    u_next = None
    for a, g in zip(mix.alphas, history.images):
        u_next = a * g if u_next is None else u_next + a * g
    if beta != 1.0:
        u_alpha = None
        for a, u in zip(mix.alphas, history.iterates):
            u_alpha = a * u if u_alpha is None else u_alpha + a * u
        u_next = beta * u_next + (1.0 - beta) * u_alpha
    history.push(u_next)
    return u_next, mix


@dataclass
class IterationRecord:
    k: int
    residual_norm: float
    theta: float
    alphas: list[float]
    eta_partial: float
    step_ratio: float
    wall_time: float
    update_norm: float = math.nan   # ||u_k - u_{k-1}||_*, undefined at k = 0
    depth: int = 0
    image_diff_norm: float = math.nan  # ||G(u_k) - G(u_{k-1})||_*


@dataclass
class SolveTrace:
    config: dict
    records: list[IterationRecord] = field(default_factory=list)
    status: str = MAX_ITERS
    timings: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    error: str | None = None
    final: np.ndarray | None = field(default=None, repr=False)
    iterates: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def depth_m(self) -> int:
        return int(self.config.get("depth_m", 0))

    def residual_norms(self) -> np.ndarray:
        return np.array([r.residual_norm for r in self.records])

    def step_ratios(self) -> np.ndarray:
        return np.array([r.step_ratio for r in self.records])

    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])


def run_accelerated(
    op: FixedPointMap,
    u0: np.ndarray,
    config: AndersonConfig,
    ip: InnerProduct | None = None,
    store_iterates: bool = False,
    meta: dict | None = None,
) -> SolveTrace:
    """Iterate ``u <- mix(G(u))`` until the residual tolerance, ``max_iters`` or divergence."""
    u0 = np.array(u0, dtype=np.float64)
    ip = ip if ip is not None else euclidean(len(u0))
    trace = SolveTrace(config=asdict(config), meta=dict(meta or {}))
    if store_iterates:
        trace.iterates = [u0]
    history = AndersonHistory(config.depth_m, ip)
    history.push(u0)
    u_prev = g_prev = None
    w0 = None
    prev = math.nan
    t_start = time.perf_counter()
    for k in range(config.max_iters):
        t0 = time.perf_counter()
        u = history.head
        try:
            g = np.asarray(op(u), dtype=np.float64)
        except OperatorFailure as exc:
            trace.status, trace.error = FAILED, str(exc)
            trace.final = u
            break
        rnorm = ip_norm(g - u, ip)
        unorm = ip_norm(u - u_prev, ip) if u_prev is not None else math.nan
        gnorm = ip_norm(g - g_prev, ip) if g_prev is not None else math.nan
        ratio = rnorm / prev if k > 0 and prev > 0 else math.nan
        if w0 is None:
            w0 = rnorm
        if not np.isfinite(rnorm) or not np.all(np.isfinite(g)):
            trace.records.append(IterationRecord(k, rnorm, math.nan, [], 0.0, ratio,
                                                 time.perf_counter() - t0, unorm, 0, gnorm))
            trace.status, trace.final = DIVERGED, u
            break
        u_next, mix = anderson_step(history, g, config)
        trace.records.append(IterationRecord(
            k, rnorm, mix.theta, [float(a) for a in mix.alphas], mix.eta_partial, ratio,
            time.perf_counter() - t0, unorm, mix.depth, gnorm,
        ))
        trace.final = g
        if rnorm <= config.tol_abs or rnorm <= config.tol_rel * w0:
            trace.status = CONVERGED
            break
        if rnorm > config.divergence_factor * w0:
            trace.status = DIVERGED
            break
        if store_iterates:
            trace.iterates.append(u_next)
        u_prev, g_prev, prev = u, g, rnorm
    else:
        trace.status = MAX_ITERS
    trace.timings["total_s"] = time.perf_counter() - t_start
    return trace


def theta_threshold(r: float, eta: float, m: int, k: int) -> float:
    """Largest optimisation gain that still guarantees r-linear convergence at rate ``r``.

    Step ``k`` uses the transient branch for ``k <= m`` and the steady branch
    for ``k > m``; ``k = 1`` gives ``1 - eta / r``.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"r must lie in (0, 1), got {r}")
    if eta < 0.0 or m < 0 or k < 1:
        raise ValueError("need eta >= 0, m >= 0, k >= 1")
    if m == 0:
        return 1.0
    limit = r ** m * (1.0 - r) / (1.0 - r ** m)
    if not eta < limit:
        raise HypothesisViolated(f"eta={eta} must be below r^m (1-r)/(1-r^m) = {limit}")
    if k == 1:
        if not eta < r:
            raise HypothesisViolated(f"eta={eta} must be below r={r}")
        return 1.0 - eta / r
    if k <= m:
        rk = r ** k
        return (rk - eta * (1.0 - rk) / (1.0 - r)) / (rk + eta * (r - rk) / (1.0 - r))
    rm = r ** m
    s = eta * (1.0 - rm) / (1.0 - r)
    return (rm - s) / (rm + s)


@dataclass
class AuditRow:
    k: int
    lhs: float
    rhs: float
    satisfied: bool

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


@dataclass
class AuditReport:
    name: str
    rows: list[AuditRow]
    notes: list[str] = field(default_factory=list)

    @property
    def satisfied(self) -> int:
        return sum(r.satisfied for r in self.rows)

    @property
    def violated(self) -> int:
        return len(self.rows) - self.satisfied

    @property
    def violations(self) -> list[int]:
        return [r.k for r in self.rows if not r.satisfied]


def _check(lhs: float, rhs: float, rtol: float, atol: float) -> bool:
    return bool(lhs <= rhs + rtol * abs(rhs) + atol)


def audit_recursion(trace: SolveTrace, r_hat: float, rtol: float = 1e-10, atol: float | None = None) -> AuditReport:
    """Evaluate the update-norm recursion bound at every step with the recorded gains.

    Row ``k`` compares ``||e_{k+1}||`` with the bound built from ``theta_k``,
    the running maximum of the coefficient partial sums and ``e_1 .. e_k``.
    Violations are reported, not raised.
    """
    recs = trace.records
    if len(recs) < 3:
        raise InsufficientTrace("recursion audit needs at least three records")
    m = trace.depth_m
    e = [math.nan] + [r.update_norm for r in recs[1:]]  # e[k] = ||u_k - u_{k-1}||
    if atol is None:
        atol = 1e-12 * max(e[1], 0.0)
    rows = []
    eta = 0.0
    for k in range(1, len(recs) - 1):
        eta = max(eta, *(recs[j].eta_partial for j in range(k + 1)))
        th = recs[k].theta
        rt = r_hat * th
        if k <= m:
            rhs = (rt + eta) * e[k] + eta * (rt + 1.0) * sum(e[1:k])
        else:
            rhs = (rt + eta) * e[k] + eta * (rt + 1.0) * sum(e[k - m + 1:k]) + rt * eta * e[k - m]
        lhs = e[k + 1]
        rows.append(AuditRow(k, lhs, rhs, _check(lhs, rhs, rtol, atol)))
    notes = []
    if trace.config.get("damping_beta", 1.0) != 1.0:
        notes.append("bound assumes undamped mixing; damped trace audited anyway")
    return AuditReport("recursion", rows, notes)


def lemma_m2_rows(trace: SolveTrace, r: float, rtol: float = 1e-10) -> AuditReport:
    """The four depth-2 coefficient/update inequalities, checked at every full-depth step ``k > 1``.

    Rows are labelled ``10*k + i`` for inequality ``i`` in 1..4.
    """
    recs = trace.records
    rows = []
    c = 1.0 / (1.0 - r)
    for k in range(2, len(recs)):
        rec = recs[k]
        if len(rec.alphas) != 3 or rec.depth != 2:
            continue
        a_old, _, a_new = rec.alphas
        wk, wk1, wk2 = recs[k].residual_norm, recs[k - 1].residual_norm, recs[k - 2].residual_norm
        ek, ek1 = recs[k].update_norm, recs[k - 1].update_norm
        checks = [
            (abs(a_new) * ek, c * (abs(1 - a_old) * wk1 + abs(a_old) * wk2)),
            (abs(1 - a_new) * ek, c * (abs(1 - a_new) * wk1 + (1 + abs(a_new)) * wk)),
            (abs(a_old) * ek1, c * (abs(1 - a_new) * wk1 + abs(a_new) * wk)),
            (abs(1 - a_old) * ek1, c * (abs(1 - a_old) * wk1 + (1 + abs(a_old)) * wk2)),
        ]
        atol = 1e-12 * max(wk, wk1, wk2)
        for i, (lhs, rhs) in enumerate(checks, start=1):
            rows.append(AuditRow(10 * k + i, lhs, rhs, _check(lhs, rhs, rtol, atol)))
    return AuditReport("lemma-m2", rows)
