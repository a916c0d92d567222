"""Steady Navier-Stokes: the Picard solution operator, Newton baseline and theory audits.

``PicardOperator`` maps an advecting velocity ``w`` (a full coefficient
vector) to the Taylor-Hood solution of the Oseen problem linearised at ``w``.
It is the fixed-point map handed to :func:`aanse.accel.run_accelerated`;
mixing is measured in the H1 seminorm of the velocity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import accel
from .accel import AndersonConfig, AuditReport, AuditRow, SolveTrace
from .errors import InsufficientTrace, LinearSolveFailure, SingularMatrix
from .fem2d import TaylorHoodSpace, build_cavity_mesh
from .linalg import factorize

log = logging.getLogger(__name__)

VectorField = Callable[[np.ndarray, np.ndarray], tuple]


def lid_velocity(x, y):
    """Unit tangential velocity on ``y = 1`` (corners included), no-slip elsewhere."""
    on_lid = np.isclose(y, 1.0)
    return np.where(on_lid, 1.0, 0.0), np.zeros_like(np.asarray(x, dtype=float))


def swirl_forcing(amplitude: float) -> VectorField:
    """A smooth, non-symmetric body force used for the small-data (contractive) problems."""
    def f(x, y):
        return (amplitude * np.sin(np.pi * x) * np.cos(np.pi * y) * (1.0 + y),
                -amplitude * np.cos(np.pi * x) * np.sin(np.pi * y) * (1.0 + x * x))
    return f


@dataclass(frozen=True)
class FlowProblem:
    space: TaylorHoodSpace
    nu: float
    forcing: VectorField | None = None
    boundary: VectorField | None = None
    gamma_gd: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        if not self.nu > 0.0:
            raise ValueError(f"viscosity must be positive, got {self.nu}")
        if self.gamma_gd < 0.0:
            raise ValueError("grad-div parameter must be nonnegative")

    @property
    def reynolds(self) -> float:
        return 1.0 / self.nu


def cavity_problem(n: int, reynolds: float, gamma_gd: float = 0.0) -> FlowProblem:
    if not reynolds > 0:
        raise ValueError(f"Reynolds number must be positive, got {reynolds}")
    space = TaylorHoodSpace(build_cavity_mesh(n))
    return FlowProblem(space, 1.0 / reynolds, None, lid_velocity, gamma_gd, "cavity2d")


def forced_problem(n: int, reynolds: float, amplitude: float, gamma_gd: float = 0.0) -> FlowProblem:
    """Homogeneous Dirichlet data with a scaled body force; small data for modest ``amplitude``."""
    space = TaylorHoodSpace(build_cavity_mesh(n))
    return FlowProblem(space, 1.0 / reynolds, swirl_forcing(amplitude), None, gamma_gd, "forced")


@dataclass
class FlowState:
    coeffs: np.ndarray
    space: TaylorHoodSpace = field(repr=False)
    nu: float = 1.0

    @property
    def reynolds(self) -> float:
        return 1.0 / self.nu

    @property
    def velocity(self) -> np.ndarray:
        return self.coeffs[:self.space.n_velocity]

    @property
    def pressure(self) -> np.ndarray:
        return self.coeffs[self.space.n_velocity:]


class PicardOperator:
    """``G(w)``: solve ``b*(w, u, v) + nu (grad u, grad v) - (p, div v) = <f, v>``, ``(div u, q) = 0``.

    Dirichlet rows are eliminated with the boundary data lifted into the
    right-hand side; pressure is pinned at one vertex during the solve and
    shifted to zero mean afterwards.
    """

    def __init__(self, problem: FlowProblem):
        self.problem = problem
        S = self.space = problem.space
        self.nu = problem.nu
        data = problem.nu * S.stiffness_data + S.divergence_data
        if problem.gamma_gd:
            data = data + problem.gamma_gd * S.graddiv_data
        self._base = data
        self.load = S.load_vector(problem.forcing)
        self.dirichlet_values = S.boundary_values(problem.boundary)
        self.ip = S.h1_inner
        self.solves = 0
        self._free = S.free_dofs
        self._dir = S.dirichlet_dofs

    @property
    def total_dofs(self) -> int:
        return self.space.total_dofs

    def with_boundary(self, u: np.ndarray) -> np.ndarray:
        out = np.array(u, dtype=np.float64)
        out[self._dir[:-1]] = self.dirichlet_values[:-1]
        return out

    def zero_state(self) -> np.ndarray:
        """Zero interior field carrying the Dirichlet data."""
        return self.with_boundary(np.zeros(self.total_dofs))

    def system(self, w: np.ndarray, newton: bool = False) -> tuple[sp.csr_matrix, np.ndarray]:
        """Full (unreduced) matrix and right-hand side of the step linearised at ``w``."""
        S = self.space
        w = np.asarray(w, dtype=np.float64)
        data = self._base + S.trilinear_data(w)
        rhs = self.load.copy()
        if newton:
            data = data + S.reaction_data(w)
        A = S.build(data)
        if newton:
            rhs += S.trilinear(w) @ w
            rhs[S.n_velocity:] = self.load[S.n_velocity:]
        return A, rhs

    def solve_system(self, A: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
        free, dirs = self._free, self._dir
        Af = A[free]
        A_ff = Af[:, free]
        b = rhs[free] - Af[:, dirs] @ self.dirichlet_values
        try:
            x = factorize(A_ff).solve(b)
        except SingularMatrix as exc:
            raise LinearSolveFailure(str(exc)) from exc
        out = np.empty(self.total_dofs)
        out[free] = x
        out[dirs] = self.dirichlet_values
        self.solves += 1
        return self.space.zero_mean_pressure(out)

    def __call__(self, w: np.ndarray) -> np.ndarray:
        return self.solve_system(*self.system(w))

    def newton_step(self, u: np.ndarray) -> np.ndarray:
        """Full next Newton iterate (not the increment)."""
        return self.solve_system(*self.system(u, newton=True))

    def residual_norm(self, u: np.ndarray) -> float:
        """Euclidean norm of the nonlinear residual on the free rows."""
        A, rhs = self.system(u)
        return float(np.linalg.norm((A @ u - rhs)[self._free]))


def apply_G(op: PicardOperator, w):
    if isinstance(w, FlowState):
        return FlowState(op(w.coeffs), op.space, op.nu)
    return op(w)


def solve_stokes(op: PicardOperator) -> np.ndarray:
    """Stokes solution (advecting field zero) with the problem's data; the usual initial guess."""
    return op(np.zeros(op.total_dofs))


def run_picard(op: PicardOperator, u0: np.ndarray, config: AndersonConfig, **kw) -> SolveTrace:
    cfg = replace(config, depth_m=0)
    meta = {"method": "picard", "depth_m": 0, **kw.pop("meta", {})}
    return accel.run_accelerated(op, u0, cfg, ip=op.ip, meta=meta, **kw)


def run_anderson_picard(op: PicardOperator, u0: np.ndarray, config: AndersonConfig, **kw) -> SolveTrace:
    meta = {"method": "anderson-picard", "depth_m": config.depth_m, **kw.pop("meta", {})}
    return accel.run_accelerated(op, u0, config, ip=op.ip, meta=meta, **kw)


def run_newton(op: PicardOperator, u0: np.ndarray, config: AndersonConfig, **kw) -> SolveTrace:
    """Newton iteration driven through the same loop (depth 0), so traces are comparable."""
    cfg = replace(config, depth_m=0)
    meta = {"method": "newton", "depth_m": 0, **kw.pop("meta", {})}
    return accel.run_accelerated(op.newton_step, u0, cfg, ip=op.ip, meta=meta, **kw)


# ---------------------------------------------------------------- estimates
@dataclass
class KappaEstimate:
    pairwise: float
    trace_based: float | None = None
    ratios: list[float] = field(default_factory=list, repr=False)

    @property
    def value(self) -> float:
        """Largest available estimate."""
        if self.trace_based is None or not np.isfinite(self.trace_based):
            return self.pairwise
        return max(self.pairwise, self.trace_based)

    def __float__(self) -> float:
        return float(self.value)


def _random_interior(op: PicardOperator, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Random velocity field vanishing on the boundary, smoothed by one stiffness solve."""
    S = op.space
    h = np.zeros(op.total_dofs)
    interior = _interior_velocity(S)
    K = S.velocity_stiffness[interior][:, interior].tocsc()
    h[interior] = spla.spsolve(K, rng.standard_normal(len(interior)))
    nrm = S.h1_seminorm(h)
    return h * (scale / nrm) if nrm > 0 else h


def _interior_velocity(S: TaylorHoodSpace) -> np.ndarray:
    mask = np.ones(S.n_velocity, dtype=bool)
    mask[S.dirichlet_dofs[:-1]] = False
    return np.flatnonzero(mask)


def estimate_kappa(op: PicardOperator, samples: int = 8, seed: int = 0,
                   trace: SolveTrace | None = None, power_steps: int = 4) -> KappaEstimate:
    """Sampled contraction ratio ``||grad(G(w1) - G(w2))|| / ||grad(w1 - w2)||``.

    Each sample draws a base field ``w`` around the Stokes state and a smooth
    perturbation ``h``; ``power_steps`` further pairs follow ``h <- G(w + h) - G(w)``
    to steer towards the most expansive direction.  A Picard trace, when given,
    contributes its largest step ratio as a second estimate.
    """
    rng = np.random.default_rng(seed)
    S = op.space
    base = solve_stokes(op)
    scale = S.h1_seminorm(base) or 1.0
    ratios = []
    for _ in range(samples):
        w = base + _random_interior(op, rng, 0.5 * scale)
        gw = op(w)
        h = _random_interior(op, rng, 0.1 * scale)
        for _ in range(power_steps + 1):
            hn = S.h1_seminorm(h)
            if hn == 0.0:
                break
            d = op(w + h) - gw
            ratios.append(S.h1_seminorm(d) / hn)
            h = d * (0.1 * scale / max(S.h1_seminorm(d), 1e-300))
    trace_based = None
    if trace is not None:
        r = trace.step_ratios()
        r = r[np.isfinite(r)]
        trace_based = float(r.max()) if r.size else None
    return KappaEstimate(max(ratios) if ratios else 0.0, trace_based, ratios)


def estimate_trilinear_bound(space: TaylorHoodSpace, samples: int = 3, seed: int = 0,
                             iters: int = 25) -> float:
    """Discrete constant ``M_h`` in ``|b*(u,v,w)| <= M_h ||grad u|| ||grad v|| ||grad w||`` on ``X_h``.

    Alternating maximisation: with two arguments fixed the trilinear form is
    a linear functional whose maximiser over the unit stiffness ball is one
    solve away.  The ascent is monotone; restarts guard against poor local maxima.
    """
    S = space
    interior = _interior_velocity(S)
    K = S.velocity_stiffness[interior][:, interior].tocsc()
    lu = spla.splu(K)
    rng = np.random.default_rng(seed)

    def full(x):
        out = np.zeros(S.total_dofs)
        out[interior] = x
        return out

    def maximiser(g):
        y = lu.solve(g)
        val = math.sqrt(max(g @ y, 0.0))
        return (y / val if val > 0 else y), val

    best = 0.0
    for _ in range(samples):
        u, v, w = (lu.solve(rng.standard_normal(len(interior))) for _ in range(3))
        u, v, w = (x / math.sqrt(x @ (K @ x)) for x in (u, v, w))
        val = 0.0
        for _ in range(iters):
            N = S.trilinear(full(u))[interior][:, interior]
            v, _ = maximiser(N.T @ w)
            w, _ = maximiser(N @ v)
            u, val = maximiser(S.trilinear_first_slot(full(v), full(w))[interior])
        best = max(best, val)
    return best


def dual_norm(space: TaylorHoodSpace, forcing) -> float:
    """Discrete ``||f||_{-1,h} = sup_v <f, v> / ||grad v||`` over homogeneous velocity fields."""
    interior = _interior_velocity(space)
    F = space.load_vector(forcing)[interior]
    K = space.velocity_stiffness[interior][:, interior].tocsc()
    return float(math.sqrt(max(F @ spla.spsolve(K, F), 0.0)))


# ------------------------------------------------------------------- audits
@dataclass
class NseAuditReport:
    residual: AuditReport       # improved-contraction bound for depth-1 runs
    error_by_residual: AuditReport
    contraction: AuditReport    # ||G(u_k) - G(u_{k-1})|| <= kappa ||u_k - u_{k-1}||
    c0: float

    @property
    def violated(self) -> int:
        return self.residual.violated + self.error_by_residual.violated + self.contraction.violated

    @property
    def satisfied(self) -> int:
        return self.residual.satisfied + self.error_by_residual.satisfied + self.contraction.satisfied


def audit_nse_m1(trace: SolveTrace, kappa_hat: float, alpha_bar: float | None = None,
                 m_hat: float = 0.0, nu: float | None = None, rtol: float = 1e-10) -> NseAuditReport:
    """Depth-1 residual bound ``||w_k|| <= kappa ||w_{k-1}|| (theta + C0 ||w_{k-2}||)`` step by step.

    ``theta`` is the gain of the mixing that produced ``u_k``; steps where that
    mixing put no weight on the older image are skipped (plain Picard step).
    ``C0 = M alpha_bar / (nu (1 - kappa)^2)``; ``alpha_bar`` defaults to the
    largest recorded newest-image coefficient.
    """
    recs = trace.records
    if len(recs) < 3:
        raise InsufficientTrace("depth-1 audit needs at least three records")
    if nu is None:
        nu = float(trace.meta.get("nu", 1.0))
    if alpha_bar is None:
        alpha_bar = max((abs(r.alphas[-1]) for r in recs if r.alphas), default=1.0)
    if not kappa_hat < 1.0:
        c0 = math.inf
    else:
        c0 = m_hat * alpha_bar / (nu * (1.0 - kappa_hat) ** 2)
    w = [r.residual_norm for r in recs]
    scale = max(w[0], 0.0)
    atol = 1e-12 * scale
    res_rows, err_rows, con_rows = [], [], []
    for k in range(1, len(recs)):
        e_k = recs[k].update_norm
        prev_alphas = recs[k - 1].alphas
        older = prev_alphas[0] if len(prev_alphas) == 2 else 0.0
        if k == 1 or older != 0.0:
            rhs = w[k - 1] / (1.0 - kappa_hat) if kappa_hat < 1.0 else math.inf
            err_rows.append(AuditRow(k, e_k, rhs, accel._check(e_k, rhs, rtol, atol)))
        if k >= 2 and older != 0.0:
            rhs = kappa_hat * w[k - 1] * (recs[k - 1].theta + c0 * w[k - 2])
            res_rows.append(AuditRow(k, w[k], rhs, accel._check(w[k], rhs, rtol, atol)))
        gd = recs[k].image_diff_norm
        if np.isfinite(gd):
            rhs = kappa_hat * e_k
            con_rows.append(AuditRow(k, gd, rhs, accel._check(gd, rhs, rtol, atol)))
    return NseAuditReport(AuditReport("residual-m1", res_rows), AuditReport("error-by-residual", err_rows),
                          AuditReport("contraction", con_rows), c0)


def first_order_m2_rows(trace: SolveTrace, kappa_hat: float, slack: float = 0.1,
                        onset: float = 1e-3) -> AuditReport:
    """Asymptotic depth-2 check: ``||w_{k+1}|| / ||w_k|| <= kappa theta_k + slack`` once ``||w_{k-2}||`` is small."""
    recs = trace.records
    w = [r.residual_norm for r in recs]
    rows = []
    for k in range(2, len(recs) - 1):
        if w[k - 2] > onset * w[0]:
            continue
        ratio = w[k + 1] / w[k] if w[k] > 0 else 0.0
        rhs = kappa_hat * recs[k].theta + slack
        rows.append(AuditRow(k, ratio, rhs, ratio <= rhs))
    return AuditReport("first-order-m2", rows)
