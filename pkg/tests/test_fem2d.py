import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st

from aanse import fem2d
from aanse.fem2d import (LID, QUAD_POINTS, QUAD_WEIGHTS, TaylorHoodSpace, assemble_stiffness, assemble_trilinear,
                         build_cavity_mesh, h1_seminorm, p2_basis, write_vtk)
from aanse.verify import inject_fault, skew_defect


@pytest.fixture(scope="module")
def space4():
    return TaylorHoodSpace(build_cavity_mesh(4))


def test_smallest_mesh_counts():
    mesh = build_cavity_mesh(2)
    assert len(mesh.triangles) == 8 and len(mesh.nodes) == 9
    assert int((mesh.boundary_tags == LID).sum()) == 3


def test_uniform_areas():
    np.testing.assert_allclose(build_cavity_mesh(4).areas(), 1 / 32, rtol=1e-14)


def test_mesh_too_coarse():
    with pytest.raises(ValueError):
        build_cavity_mesh(1)


def test_benchmark_dof_count():
    S = TaylorHoodSpace(build_cavity_mesh(64))
    assert S.total_dofs == 37507
    assert S.n_velocity == 2 * 129 ** 2 and S.n_p1 == 65 ** 2


@given(st.integers(0, 5), st.integers(0, 5))
def test_quadrature_exact_to_degree_five(a, b):
    if a + b > 5:
        return
    x, y = sympy.symbols("x y")
    exact = float(sympy.integrate(sympy.integrate(x ** a * y ** b, (y, 0, 1 - x)), (x, 0, 1)))
    approx = 0.5 * float((QUAD_WEIGHTS * QUAD_POINTS[:, 0] ** a * QUAD_POINTS[:, 1] ** b).sum())
    assert abs(approx - exact) <= 1e-15


def test_p2_basis_is_nodal():
    nodes = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]])
    vals, grads = p2_basis(nodes)
    np.testing.assert_allclose(vals, np.eye(6), atol=1e-15)
    np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-14)


def test_stiffness_exact_on_polynomials(space4):
    S = space4
    K = assemble_stiffness(S)
    v = S.interpolate(lambda x, y: (x, 0 * x))[:S.n_velocity]
    assert abs(v @ K @ v - 1.0) <= 1e-12
    v = S.interpolate(lambda x, y: (x * x, 0 * x))[:S.n_velocity]
    assert abs(v @ K @ v - 4 / 3) <= 1e-12
    assert abs(K - K.T).max() <= 1e-13
    np.testing.assert_allclose(K @ np.ones(S.n_velocity), 0.0, atol=1e-12)


def test_h1_examples(space4):
    S = space4
    assert h1_seminorm(S, np.zeros(S.total_dofs)) == 0.0
    assert abs(h1_seminorm(S, S.interpolate(lambda x, y: (y, 0 * x))) - 1.0) <= 1e-12


def test_h1_difference_matches_quadrature(space4, rng):
    S = space4
    u1, u2 = rng.standard_normal((2, S.total_dofs))
    _, du = S.velocity_at_quad(u1 - u2)
    direct = np.sqrt((S.wq[..., None, None] * du ** 2).sum())
    assert abs(h1_seminorm(S, u1 - u2) - direct) <= 1e-10 * direct


def test_trilinear_zero_field(space4):
    assert abs(assemble_trilinear(space4, np.zeros(space4.total_dofs))).max() == 0.0


@pytest.mark.parametrize("u_expr,v_expr", [
    (("x*y", "x**2"), ("y**2", "x")),
    (("x", "y"), ("x*y", "1 - x")),
    (("y**2", "0"), ("x**2 - y", "x*y")),
])
def test_trilinear_against_symbolic_integral(space4, u_expr, v_expr):
    """``b*((1,0), u, v) = 1/2 (d_x u, v) - 1/2 (d_x v, u)`` integrated exactly over the unit square."""
    S = space4
    x, y = sympy.symbols("x y")
    us = [sympy.sympify(e) for e in u_expr]
    vs = [sympy.sympify(e) for e in v_expr]
    integrand = sum(sympy.Rational(1, 2) * (sympy.diff(a, x) * b - sympy.diff(b, x) * a) for a, b in zip(us, vs))
    exact = float(sympy.integrate(integrand, (x, 0, 1), (y, 0, 1)))

    def field(exprs):
        fns = [sympy.lambdify((x, y), e, "numpy") for e in exprs]
        return lambda X, Y: tuple(np.broadcast_to(f(X, Y), X.shape).astype(float) for f in fns)

    w = S.interpolate(lambda X, Y: (np.ones_like(X), np.zeros_like(X)))
    nv = S.n_velocity
    uc, vc = S.interpolate(field(us))[:nv], S.interpolate(field(vs))[:nv]
    got = vc @ (assemble_trilinear(S, w) @ uc)
    assert abs(got - exact) <= 1e-12


def test_first_slot_vector_consistent(space4, rng):
    S = space4
    u, v, w = rng.standard_normal((3, S.total_dofs))
    u[S.n_velocity:] = 0.0
    via_matrix = w @ (S.trilinear(u) @ v)
    via_slot = S.trilinear_first_slot(v, w) @ u
    assert abs(via_matrix - via_slot) <= 1e-12 * max(1.0, abs(via_matrix))


@given(st.integers(0, 10_000))
def test_skew_in_last_two_arguments(seed):
    S = TaylorHoodSpace(build_cavity_mesh(3))
    assert skew_defect(S, pairs=2, seed=seed) <= 1e-12


def test_fault_hook_breaks_skew_symmetry():
    S = TaylorHoodSpace(build_cavity_mesh(3))
    with inject_fault("skew-sign"):
        assert skew_defect(S, pairs=5) > 1e-3
    assert fem2d._SKEW_TERM_SIGN == 1.0
    assert skew_defect(S, pairs=5) <= 1e-12


def test_divergence_of_rigid_field_vanishes(space4):
    S = space4
    v = S.interpolate(lambda x, y: (-(y - 0.5), x - 0.5))
    assert np.abs(S.divergence @ v[:S.n_velocity]).max() <= 1e-14


def test_vtk_export(tmp_path, space4):
    S = space4
    c = S.interpolate(lambda x, y: (x, -y), lambda x, y: x + y)
    path = tmp_path / "f.vtk"
    write_vtk(path, S, c, "test")
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    i = lines.index("VECTORS velocity double")
    # velocity sampled at mesh vertices: vertex 1 is (1/4, 0)
    assert [float(t) for t in lines[i + 2].split()] == [0.25, -0.0, 0.0]
