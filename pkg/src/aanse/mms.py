"""Manufactured steady Navier-Stokes solution for discretisation-order checks."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy

from .accel import AndersonConfig
from .fem2d import TaylorHoodSpace, build_cavity_mesh
from .nse import FlowProblem, PicardOperator, run_picard, solve_stokes

_x, _y = sympy.symbols("x y")


@dataclass(frozen=True)
class Manufactured:
    velocity: callable
    grad_velocity: callable   # returns ((du/dx, du/dy), (dv/dx, dv/dy))
    pressure: callable
    forcing: callable


@lru_cache(maxsize=None)
def manufactured(nu: float = 1.0, convective: bool = True) -> Manufactured:
    """Divergence-free polynomial velocity from a stream function, cubic zero-mean pressure.

    The velocity is nonzero on the boundary, so the Dirichlet lifting is exercised too.
    """
    psi = _x ** 3 * _y ** 2 + _x * _y ** 4
    u = sympy.diff(psi, _y)
    v = -sympy.diff(psi, _x)
    p = _x ** 3 + _y ** 3 - sympy.Rational(1, 2)
    fx = -nu * (sympy.diff(u, _x, 2) + sympy.diff(u, _y, 2)) + sympy.diff(p, _x)
    fy = -nu * (sympy.diff(v, _x, 2) + sympy.diff(v, _y, 2)) + sympy.diff(p, _y)
    if convective:
        fx += u * sympy.diff(u, _x) + v * sympy.diff(u, _y)
        fy += u * sympy.diff(v, _x) + v * sympy.diff(v, _y)

    def vec(exprs):
        fns = [sympy.lambdify((_x, _y), e, "numpy") for e in exprs]
        return lambda x, y: tuple(np.broadcast_to(f(x, y), np.shape(x)).astype(float) for f in fns)

    grads = [sympy.lambdify((_x, _y), sympy.diff(c, d), "numpy") for c in (u, v) for d in (_x, _y)]

    def grad(x, y):
        g = [np.broadcast_to(f(x, y), np.shape(x)).astype(float) for f in grads]
        return (g[0], g[1]), (g[2], g[3])

    pf = sympy.lambdify((_x, _y), p, "numpy")
    return Manufactured(vec((u, v)), grad, lambda x, y: np.broadcast_to(pf(x, y), np.shape(x)).astype(float),
                        vec((fx, fy)))


def mms_problem(n: int, nu: float = 1.0, gamma_gd: float = 0.0, convective: bool = True) -> FlowProblem:
    sol = manufactured(nu, convective)
    space = TaylorHoodSpace(build_cavity_mesh(n))
    return FlowProblem(space, nu, sol.forcing, sol.velocity, gamma_gd, "mms")


def errors(space: TaylorHoodSpace, coeffs: np.ndarray, sol: Manufactured) -> dict:
    """H1-seminorm and L2 velocity errors and L2 pressure error (both pressures at zero mean)."""
    X, Y = space.qpoints[..., 0], space.qpoints[..., 1]
    uh, duh = space.velocity_at_quad(coeffs)
    ue = np.stack(sol.velocity(X, Y), axis=-1)
    (a, b), (c, d) = sol.grad_velocity(X, Y)
    due = np.stack([np.stack([a, b], -1), np.stack([c, d], -1)], -2)
    ph = space.pressure_at_quad(coeffs)
    pe = sol.pressure(X, Y)
    wq = space.wq
    dp = ph - pe
    dp -= (wq * dp).sum() / wq.sum()
    return {
        "h1_velocity": float(np.sqrt((wq[..., None, None] * (duh - due) ** 2).sum())),
        "l2_velocity": float(np.sqrt((wq[..., None] * (uh - ue) ** 2).sum())),
        "l2_pressure": float(np.sqrt((wq * dp ** 2).sum())),
    }


def solve_mms(n: int, nu: float = 1.0, gamma_gd: float = 0.0, convective: bool = True,
              tol: float = 1e-11) -> tuple[np.ndarray, dict]:
    problem = mms_problem(n, nu, gamma_gd, convective)
    op = PicardOperator(problem)
    u = solve_stokes(op)
    if convective:
        trace = run_picard(op, u, AndersonConfig(tol_abs=tol, max_iters=100))
        u = trace.final
    return u, errors(problem.space, u, manufactured(nu, convective))


def convergence_orders(ns=(8, 16, 32), **kw) -> dict:
    """Observed orders between successive refinements for each error measure."""
    errs = [solve_mms(n, **kw)[1] for n in ns]
    out = {"n": list(ns), "errors": errs}
    for key in errs[0]:
        out[key] = [float(np.log(e0[key] / e1[key]) / np.log(n1 / n0))
                    for (n0, e0), (n1, e1) in zip(zip(ns, errs), zip(ns[1:], errs[1:]))]
    return out
