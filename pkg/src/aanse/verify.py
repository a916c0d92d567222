"""Self-checks run by ``aanse verify``: oracles and invariants across all modules."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fem2d
from .accel import AndersonConfig, AndersonHistory, run_accelerated, solve_mixing, theta_threshold
from .fem2d import TaylorHoodSpace, build_cavity_mesh
from .linalg import euclidean
from .mms import convergence_orders
from .nse import PicardOperator, cavity_problem, run_anderson_picard, solve_stokes
from .synthetic import linear_contraction

FAULTS = ("skew-sign",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@contextlib.contextmanager
def inject_fault(name: str | None):
    """Deliberately break one kernel so the suite can prove it notices."""
    if name is None:
        yield
        return
    if name != "skew-sign":
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(FAULTS)}")
    saved = fem2d._SKEW_TERM_SIGN
    fem2d._SKEW_TERM_SIGN = -saved
    try:
        yield
    finally:
        fem2d._SKEW_TERM_SIGN = saved


def kkt_alphas(W: np.ndarray, gram: np.ndarray | None = None) -> np.ndarray:
    """Brute-force oracle: solve the Lagrange system of ``min ||W a||^2`` subject to ``sum(a) = 1``."""
    G = W.T @ (W if gram is None else gram @ W)
    d = W.shape[1]
    K = np.zeros((d + 1, d + 1))
    K[:d, :d] = 2.0 * G
    K[:d, d] = K[d, :d] = 1.0
    rhs = np.zeros(d + 1)
    rhs[d] = 1.0
    return np.linalg.solve(K, rhs)[:d]


def history_from_residuals(W: np.ndarray, rng: np.random.Generator) -> AndersonHistory:
    """History whose residual columns (oldest first) are the columns of ``W``."""
    n, d = W.shape
    h = AndersonHistory(d - 1, euclidean(n))
    for j in range(d):
        u = rng.standard_normal(n)
        h.push(u, u + W[:, j])
    return h


def check_ls_oracle(instances: int = 500, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = worst_sum = 0.0
    for _ in range(instances):
        m = int(rng.integers(0, 5))
        n = int(rng.integers(m + 3, 16))
        W = rng.standard_normal((n, m + 1)) * rng.uniform(0.1, 10.0)
        mix = solve_mixing(history_from_residuals(W, rng))
        ref = kkt_alphas(W)
        worst = max(worst, np.linalg.norm(mix.alphas - ref) / np.linalg.norm(ref))
        worst_sum = max(worst_sum, abs(mix.alphas.sum() - 1.0))
    ok = worst <= 1e-10 and worst_sum <= 1e-12
    return ok, f"max rel err {worst:.2e}, max |sum-1| {worst_sum:.2e} over {instances} instances"


def check_m1_closed_form(instances: int = 200, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 12))
        W = rng.standard_normal((n, 2))
        w_old, w_new = W[:, 0], W[:, 1]
        d = w_new - w_old
        a_old = float(w_new @ d / (d @ d))
        mix = solve_mixing(history_from_residuals(W, rng))
        worst = max(worst, abs(mix.alphas[0] - a_old) / max(1.0, abs(a_old)))
    return worst <= 1e-12, f"max err {worst:.2e} over {instances} instances"


def check_theta_range(instances: int = 300, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m = int(rng.integers(0, 5))
        W = rng.standard_normal((int(rng.integers(m + 1, 12)), m + 1))
        worst = max(worst, solve_mixing(history_from_residuals(W, rng)).theta)
    return worst <= 1.0 + 1e-12, f"max theta {worst:.15f}"


def bare_picard(op, u0: np.ndarray, config: AndersonConfig, ip) -> list[np.ndarray]:
    """Unaccelerated ``u <- G(u)`` with the driver's stopping rules; returns all iterates."""
    us = [np.array(u0, dtype=np.float64)]
    w0 = None
    for _ in range(config.max_iters):
        g = op(us[-1])
        r = ip.norm(g - us[-1])
        w0 = r if w0 is None else w0
        if r <= config.tol_abs or r <= config.tol_rel * w0 or r > config.divergence_factor * w0:
            break
        us.append(g)
    return us


def _same_iterates(trace, bare) -> bool:
    got = trace.iterates
    return len(got) == len(bare) and all(np.array_equal(a, b) for a, b in zip(got, bare))


def check_depth0(seed: int = 3) -> tuple[bool, str]:
    cfg = AndersonConfig(depth_m=0, max_iters=60, tol_abs=1e-10)
    lin = linear_contraction(30, 0.8, seed)
    ip = euclidean(30)
    u0 = np.zeros(30)
    t1 = run_accelerated(lin, u0, cfg, ip=ip, store_iterates=True)
    ok1 = _same_iterates(t1, bare_picard(lin, u0, cfg, ip))

    op = PicardOperator(cavity_problem(8, 100.0))
    u0 = solve_stokes(op)
    cfg = AndersonConfig(depth_m=0, max_iters=40, tol_abs=1e-9)
    t2 = run_anderson_picard(op, u0, cfg, store_iterates=True)
    ok2 = _same_iterates(t2, bare_picard(op, u0, cfg, op.ip))
    return ok1 and ok2, f"linear synthetic {'identical' if ok1 else 'DIFFERS'}, cavity n=8 {'identical' if ok2 else 'DIFFERS'}"


def skew_defect(space: TaylorHoodSpace, pairs: int = 200, seed: int = 4) -> float:
    """Largest ``|v^T N(w) v| / (|v|^T |N(w)| |v|)`` over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        w = rng.standard_normal(space.total_dofs)
        v = rng.standard_normal(space.total_dofs)
        N = space.trilinear(w)
        scale = float(np.abs(v) @ (abs(N) @ np.abs(v)))
        worst = max(worst, abs(v @ (N @ v)) / scale)
    return worst


def check_skew(pairs: int = 200) -> tuple[bool, str]:
    d = skew_defect(TaylorHoodSpace(build_cavity_mesh(6)), pairs)
    return d <= 1e-12, f"max |b*(w,v,v)|/scale {d:.2e} over {pairs} pairs"


def check_stiffness_exact() -> tuple[bool, str]:
    S = TaylorHoodSpace(build_cavity_mesh(4))
    a = S.h1_seminorm(S.interpolate(lambda x, y: (y, 0 * x)))
    b = S.h1_seminorm(S.interpolate(lambda x, y: (x * x, 0 * x)))
    err = max(abs(a - 1.0), abs(b * b - 4.0 / 3.0))
    return err <= 1e-12, f"|grad (y,0)| = {a:.15f}, |grad (x^2,0)|^2 = {b * b:.15f}"


def check_dofs() -> tuple[bool, str]:
    total = TaylorHoodSpace(build_cavity_mesh(64)).total_dofs
    return total == 37507, f"n=64 total dofs {total}"


def check_thresholds() -> tuple[bool, str]:
    got = [theta_threshold(0.9, 0.1, 1, 1), theta_threshold(0.9, 0.1, 1, 2), theta_threshold(0.9, 0.1, 2, 3)]
    want = [8.0 / 9.0, 0.8, 0.62]
    err = max(abs(a - b) for a, b in zip(got, want))
    return err <= 1e-12, "thresholds " + ", ".join(f"{g:.12f}" for g in got)


def check_mms(ns) -> tuple[bool, str]:
    parts, ok = [], True
    for gamma in (0.0, 0.1):
        orders = convergence_orders(ns, gamma_gd=gamma)["h1_velocity"]
        ok &= min(orders) >= 1.8
        parts.append(f"gamma={gamma:g}: " + ", ".join(f"{o:.3f}" for o in orders))
    return ok, "H1 orders " + "; ".join(parts)


def checks(level: str = "full") -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    if level not in ("quick", "full"):
        raise ValueError(f"level must be 'quick' or 'full', got {level!r}")
    ns = (8, 16) if level == "quick" else (8, 16, 32)
    return [
        ("ls-kkt-oracle", check_ls_oracle),
        ("m1-closed-form", check_m1_closed_form),
        ("theta-range", check_theta_range),
        ("depth0-equivalence", check_depth0),
        ("skew-symmetry", check_skew),
        ("stiffness-exact", check_stiffness_exact),
        ("dof-count", check_dofs),
        ("theta-thresholds", check_thresholds),
        ("mms-orders", lambda: check_mms(ns)),
    ]


def run_checks(level: str = "full", fault: str | None = None, report=print) -> list[CheckResult]:
    results = []
    with inject_fault(fault):
        for name, fn in checks(level):
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
            results.append(res)
            if report is not None:
                report(f"[{'PASS' if res.passed else 'FAIL'}] {name}: {detail} ({res.seconds:.1f}s)")
    return results


def first_failure(results: list[CheckResult]) -> str | None:
    return next((r.name for r in results if not r.passed), None)


__all__ = ["CheckResult", "FAULTS", "first_failure", "inject_fault", "kkt_alphas", "run_checks", "skew_defect",
           "history_from_residuals", "bare_picard"]
