import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from aanse.errors import DimensionMismatch, SingularMatrix
from aanse.fem2d import TaylorHoodSpace, build_cavity_mesh
from aanse.linalg import InnerProduct, check_csr, dump_matrix_market, euclidean, factorize, ip_norm, solve
from aanse.nse import PicardOperator, cavity_problem


def test_identity_solve(rng):
    v = rng.standard_normal(7)
    assert np.array_equal(solve(factorize(sp.identity(7, format="csr")), v), v)


def test_two_by_two():
    x = solve(factorize(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]])), np.array([3.0, 3.0]))
    np.testing.assert_allclose(x, [1.0, 1.0], rtol=1e-14)


def test_singular_matrix_raises():
    with pytest.raises(SingularMatrix):
        factorize(sp.csr_matrix([[1.0, 2.0], [2.0, 4.0]]))


def test_non_square_rejected():
    with pytest.raises(DimensionMismatch):
        factorize(sp.csr_matrix(np.ones((2, 3))))


def test_stokes_saddle_point_residual():
    op = PicardOperator(cavity_problem(4, 1.0))
    A, rhs = op.system(op.zero_state())
    free, dirs = op._free, op._dir
    Aff = A[free][:, free]
    b = rhs[free] - A[free][:, dirs] @ op.dirichlet_values
    x = solve(factorize(Aff), b)
    assert np.linalg.norm(Aff @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_wrong_rhs_length():
    fact = factorize(sp.identity(3, format="csr"))
    with pytest.raises(DimensionMismatch):
        fact.solve(np.ones(4))


def test_ip_norm_examples():
    ip = euclidean(2)
    assert ip_norm(np.zeros(2), ip) == 0.0
    assert ip_norm(np.array([3.0, 4.0]), ip) == 5.0


def test_ip_norm_shear_interpolant():
    S = TaylorHoodSpace(build_cavity_mesh(6))
    v = S.interpolate(lambda x, y: (y, 0 * x))
    assert abs(ip_norm(v, S.h1_inner) - 1.0) <= 1e-10


def test_ip_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        euclidean(3)(np.ones(3), np.ones(4))


def test_check_csr_symmetry():
    check_csr(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), symmetric=True)
    with pytest.raises(ValueError):
        check_csr(sp.csr_matrix([[2.0, 1.0], [0.0, 2.0]]), symmetric=True)


@given(st.integers(2, 8), st.integers(0, 10_000))
def test_parallelogram_law(n, seed):
    """The stiffness Gram matrix induces a genuine inner product on the masked coefficients."""
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    ip = InnerProduct(sp.csr_matrix(B @ B.T + n * np.eye(n)))
    v, w = rng.standard_normal(n), rng.standard_normal(n)
    lhs = ip.norm(v + w) ** 2 + ip.norm(v - w) ** 2
    rhs = 2 * ip.norm(v) ** 2 + 2 * ip.norm(w) ** 2
    assert abs(lhs - rhs) <= 1e-10 * rhs
    assert abs(ip(v, w) - ip(w, v)) <= 1e-12 * (ip.norm(v) * ip.norm(w))


def test_masked_inner_product_ignores_pressure():
    S = TaylorHoodSpace(build_cavity_mesh(3))
    v = np.zeros(S.total_dofs)
    v[S.pressure_dofs] = 1.0
    assert S.h1_inner.norm(v) == 0.0


def test_matrix_market_dump(tmp_path):
    import scipy.io
    A = sp.csr_matrix([[1.0, 0.5], [0.0, 3.0]])
    dump_matrix_market(A, tmp_path / "a.mtx")
    back = scipy.io.mmread(str(tmp_path / "a.mtx"))
    assert np.array_equal(back.toarray(), A.toarray())
    assert (tmp_path / "a.mtx").read_text().startswith("%%MatrixMarket matrix coordinate")
