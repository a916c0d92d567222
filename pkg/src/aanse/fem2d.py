"""Taylor-Hood (P2, P1) finite elements on a structured triangulation of the unit square.

Global coefficient vectors are laid out as ``[u_x (P2 nodes), u_y (P2 nodes),
p (P1 vertices)]``.  P2 nodes live on the once-refined ``(2n+1) x (2n+1)``
grid, so node ``(i, j)`` of that grid has index ``j * (2n + 1) + i`` and the
mesh vertex ``(I, J)`` is P2 node ``(2I, 2J)``.

All operators are assembled on one fixed sparsity pattern covering the full
15x15 element block (6 + 6 velocity, 3 pressure), which keeps the assembly
order, and therefore every solve, bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch
from .linalg import InnerProduct, ip_norm

INTERIOR, WALL, LID = 0, 1, 2

# Sign of the second half of b*; only the verification suite's fault injection changes it.
_SKEW_TERM_SIGN = 1.0

# 7-point rule on the reference triangle, exact for degree 5; weights sum to 1.
_A = (6.0 - np.sqrt(15.0)) / 21.0
_B = (6.0 + np.sqrt(15.0)) / 21.0
_WA = (155.0 - np.sqrt(15.0)) / 1200.0
_WB = (155.0 + np.sqrt(15.0)) / 1200.0
QUAD_POINTS = np.array([
    [1.0 / 3.0, 1.0 / 3.0],
    [_A, _A], [1.0 - 2.0 * _A, _A], [_A, 1.0 - 2.0 * _A],
    [_B, _B], [1.0 - 2.0 * _B, _B], [_B, 1.0 - 2.0 * _B],
])
QUAD_WEIGHTS = np.array([9.0 / 40.0, _WA, _WA, _WA, _WB, _WB, _WB])


def p2_basis(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(q, 6)`` and gradients ``(q, 6, 2)`` of the reference P2 basis.

    Local node order: the three vertices, then midpoints of edges 01, 12, 20.
    """
    x, y = xi[:, 0], xi[:, 1]
    l0, l1, l2 = 1.0 - x - y, x, y
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    lam = np.stack([l0, l1, l2], axis=1)
    vals = np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ], axis=1)
    grads = np.empty((len(x), 6, 2))
    for a in range(3):
        grads[:, a] = (4 * lam[:, a] - 1)[:, None] * dl[a]
    for k, (a, b) in enumerate([(0, 1), (1, 2), (2, 0)]):
        grads[:, 3 + k] = 4 * (lam[:, a, None] * dl[b] + lam[:, b, None] * dl[a])
    return vals, grads


def p1_basis(xi: np.ndarray) -> np.ndarray:
    x, y = xi[:, 0], xi[:, 1]
    return np.stack([1.0 - x - y, x, y], axis=1)


@dataclass(frozen=True)
class Mesh:
    n: int
    nodes: np.ndarray          # (nv, 2)
    triangles: np.ndarray      # (nt, 3), counterclockwise
    boundary_tags: np.ndarray  # (nv,), INTERIOR / WALL / LID

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _tag(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    tags = np.full(x.shape, INTERIOR, dtype=np.int8)
    on_wall = np.isclose(x, 0.0) | np.isclose(x, 1.0) | np.isclose(y, 0.0)
    tags[on_wall] = WALL
    # top corners belong to the lid
    tags[np.isclose(y, 1.0)] = LID
    return tags


def build_cavity_mesh(n: int) -> Mesh:
    """Uniform ``n x n`` grid on the unit square, each cell cut along its lower-left/upper-right diagonal."""
    n = int(n)
    if n < 2:
        raise ValueError(f"mesh count n must be >= 2, got {n}")
    s = np.arange(n + 1) / n
    X, Y = np.meshgrid(s, s)  # row J is y = J/n
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    J, I = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (J * (n + 1) + I).ravel()
    b, c, d = a + 1, a + n + 2, a + n + 1
    tris = np.empty((2 * n * n, 3), dtype=np.intp)
    tris[0::2] = np.column_stack([a, b, c])
    tris[1::2] = np.column_stack([a, c, d])
    return Mesh(n=n, nodes=nodes, triangles=tris, boundary_tags=_tag(nodes[:, 0], nodes[:, 1]))


class _Pattern:
    """Fixed COO -> CSR scatter map, so repeated assemblies only redo a bincount."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        self.shape = shape
        key = rows.astype(np.int64) * shape[1] + cols
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % shape[1]).astype(np.int32)
        r = uniq // shape[1]
        self.indptr = np.zeros(shape[0] + 1, dtype=np.int32)
        np.cumsum(np.bincount(r, minlength=shape[0]), out=self.indptr[1:])
        self.nnz = len(uniq)

    def build(self, data: np.ndarray) -> sp.csr_matrix:
        vals = np.bincount(self.slot, weights=data.ravel(), minlength=self.nnz)
        return sp.csr_matrix((vals, self.indices.copy(), self.indptr.copy()), shape=self.shape)


class TaylorHoodSpace:
    """Dof map, element geometry and assembly kernels for (P2, P1) on a :class:`Mesh`."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        n = mesh.n
        self.n_p2 = (2 * n + 1) ** 2
        self.n_p1 = (n + 1) ** 2
        self.n_velocity = 2 * self.n_p2
        self.total_dofs = self.n_velocity + self.n_p1

        m = 2 * n + 1
        vi = mesh.triangles % (n + 1)
        vj = mesh.triangles // (n + 1)
        ri, rj = 2 * vi, 2 * vj
        mid_i = np.stack([(ri[:, 0] + ri[:, 1]) // 2, (ri[:, 1] + ri[:, 2]) // 2, (ri[:, 2] + ri[:, 0]) // 2], 1)
        mid_j = np.stack([(rj[:, 0] + rj[:, 1]) // 2, (rj[:, 1] + rj[:, 2]) // 2, (rj[:, 2] + rj[:, 0]) // 2], 1)
        self.p2_cells = np.hstack([rj * m + ri, mid_j * m + mid_i])  # (nt, 6)
        self.p1_cells = mesh.triangles.copy()
        gi, gj = np.meshgrid(np.arange(m), np.arange(m))
        self.p2_coords = np.column_stack([gi.ravel(), gj.ravel()]) / (2.0 * n)
        self.p2_tags = _tag(self.p2_coords[:, 0], self.p2_coords[:, 1])

        P = mesh.nodes[mesh.triangles]
        jac = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)  # columns are edge vectors
        self.det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv = np.empty_like(jac)
        inv[:, 0, 0], inv[:, 1, 1] = jac[:, 1, 1], jac[:, 0, 0]
        inv[:, 0, 1], inv[:, 1, 0] = -jac[:, 0, 1], -jac[:, 1, 0]
        inv /= self.det[:, None, None]
        self.origin = P[:, 0]
        self.jac = jac

        self.phi, dphi_ref = p2_basis(QUAD_POINTS)
        self.psi = p1_basis(QUAD_POINTS)
        # physical gradients: grad = J^{-T} grad_ref
        self.dphi = np.einsum("qia,eab->eqib", dphi_ref, inv)  # (nt, q, 6, 2)
        self.wq = 0.5 * np.abs(self.det)[:, None] * QUAD_WEIGHTS[None, :]  # (nt, q)
        self.qpoints = self.origin[:, None, :] + np.einsum("eab,qb->eqa", jac, QUAD_POINTS)

        ux = self.p2_cells
        self.cell_dofs = np.hstack([ux, ux + self.n_p2, self.p1_cells + self.n_velocity])  # (nt, 15)
        rows = np.repeat(self.cell_dofs[:, :, None], 15, axis=2)
        cols = np.repeat(self.cell_dofs[:, None, :], 15, axis=1)
        self._pattern = _Pattern(rows.ravel(), cols.ravel(), (self.total_dofs, self.total_dofs))

    # ------------------------------------------------------------------ dofs
    @property
    def velocity_dofs(self) -> np.ndarray:
        return np.arange(self.n_velocity)

    @property
    def pressure_dofs(self) -> np.ndarray:
        return np.arange(self.n_velocity, self.total_dofs)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.p2_tags != INTERIOR)

    @cached_property
    def dirichlet_dofs(self) -> np.ndarray:
        """Velocity boundary dofs plus the pinned pressure dof (vertex (0, 0))."""
        b = self.boundary_nodes
        return np.concatenate([b, b + self.n_p2, [self.n_velocity]])

    @cached_property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.total_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)

    def split(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = np.asarray(coeffs)
        if c.shape[0] != self.total_dofs:
            raise DimensionMismatch(f"expected {self.total_dofs} coefficients, got {c.shape[0]}")
        return c[:self.n_p2], c[self.n_p2:self.n_velocity], c[self.n_velocity:]

    def interpolate(self, velocity=None, pressure=None) -> np.ndarray:
        """Nodal interpolant of callables ``velocity(x, y) -> (ux, uy)`` and ``pressure(x, y)``."""
        out = np.zeros(self.total_dofs)
        if velocity is not None:
            ux, uy = velocity(self.p2_coords[:, 0], self.p2_coords[:, 1])
            out[:self.n_p2] = ux
            out[self.n_p2:self.n_velocity] = uy
        if pressure is not None:
            out[self.n_velocity:] = pressure(self.mesh.nodes[:, 0], self.mesh.nodes[:, 1])
        return out

    def boundary_values(self, velocity) -> np.ndarray:
        """Values for every entry of :attr:`dirichlet_dofs` (pinned pressure gets 0)."""
        b = self.boundary_nodes
        if velocity is None:
            return np.zeros(2 * len(b) + 1)
        gx, gy = velocity(self.p2_coords[b, 0], self.p2_coords[b, 1])
        return np.concatenate([np.broadcast_to(gx, b.shape), np.broadcast_to(gy, b.shape), [0.0]])

    # ------------------------------------------------------- field evaluation
    def velocity_at_quad(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocity ``(nt, q, 2)`` and its gradient ``(nt, q, 2, 2)`` (``[..., c, d] = d u_c / d x_d``)."""
        ux, uy, _ = self.split(coeffs)
        loc = np.stack([ux[self.p2_cells], uy[self.p2_cells]], axis=2)  # (nt, 6, 2)
        u = np.einsum("qi,eic->eqc", self.phi, loc)
        du = np.einsum("eqid,eic->eqcd", self.dphi, loc)
        return u, du

    def pressure_at_quad(self, coeffs: np.ndarray) -> np.ndarray:
        _, _, p = self.split(coeffs)
        return np.einsum("qa,ea->eq", self.psi, p[self.p1_cells])

    @cached_property
    def pressure_weights(self) -> np.ndarray:
        """``int psi_a`` for every P1 basis function."""
        w = np.zeros(self.n_p1)
        np.add.at(w, self.p1_cells, np.einsum("eq,qa->ea", self.wq, self.psi))
        return w

    def zero_mean_pressure(self, coeffs: np.ndarray) -> np.ndarray:
        out = np.array(coeffs, dtype=np.float64)
        p = out[self.n_velocity:]
        p -= (self.pressure_weights @ p) / self.pressure_weights.sum()
        return out

    # --------------------------------------------------------------- kernels
    def _blocks(self, vv=None, vdiag=None, pv=None) -> np.ndarray:
        """Place element blocks into the (nt, 15, 15) layout.

        ``vdiag`` (nt, 6, 6) is repeated on both velocity components, ``vv``
        (nt, 2, 2, 6, 6) gives the full component coupling ``[c, d]``, ``pv``
        (nt, 2, 3, 6) the pressure/velocity coupling inserted with its transpose.
        """
        E = np.zeros((len(self.p2_cells), 15, 15))
        if vdiag is not None:
            E[:, 0:6, 0:6] += vdiag
            E[:, 6:12, 6:12] += vdiag
        if vv is not None:
            for c in range(2):
                for d in range(2):
                    E[:, 6 * c:6 * c + 6, 6 * d:6 * d + 6] += vv[:, c, d]
        if pv is not None:
            for c in range(2):
                E[:, 12:15, 6 * c:6 * c + 6] += pv[:, c]
                E[:, 6 * c:6 * c + 6, 12:15] += np.swapaxes(pv[:, c], 1, 2)
        return E

    def build(self, element_data: np.ndarray) -> sp.csr_matrix:
        return self._pattern.build(element_data)

    @cached_property
    def stiffness_data(self) -> np.ndarray:
        ks = np.einsum("eq,eqia,eqja->eij", self.wq, self.dphi, self.dphi)
        return self._blocks(vdiag=ks)

    @cached_property
    def divergence_data(self) -> np.ndarray:
        """``-(q, div v)`` in both the momentum and continuity rows."""
        b = -np.einsum("eq,qa,eqjc->ecaj", self.wq, self.psi, self.dphi)
        return self._blocks(pv=b)

    @cached_property
    def graddiv_data(self) -> np.ndarray:
        gd = np.einsum("eq,eqic,eqjd->ecdij", self.wq, self.dphi, self.dphi)
        return self._blocks(vv=gd)

    def trilinear_data(self, w_coeffs: np.ndarray) -> np.ndarray:
        """Element data of ``N(w)`` with ``v^T N(w) u = b*(w, u, v)``."""
        w, _ = self.velocity_at_quad(w_coeffs)
        wg = np.einsum("eqc,eqjc->eqj", w, self.dphi)  # w . grad phi_j
        adv = np.einsum("eq,eqj,qi->eij", self.wq, wg, self.phi)  # (w.grad phi_j, phi_i)
        return self._blocks(vdiag=0.5 * (adv - _SKEW_TERM_SIGN * np.swapaxes(adv, 1, 2)))

    def reaction_data(self, u_coeffs: np.ndarray) -> np.ndarray:
        """Element data of the Newton term ``b*(delta, u, v)`` (trial ``delta``, test ``v``)."""
        u, du = self.velocity_at_quad(u_coeffs)
        mass_w = np.einsum("eq,qi,qj->eqij", self.wq, self.phi, self.phi)
        first = np.einsum("eqij,eqcd->ecdij", mass_w, du)  # (phi_j d_d u_c, phi_i)
        second = np.einsum("eq,qj,eqid,eqc->ecdij", self.wq, self.phi, self.dphi, u)  # (phi_j d_d phi_i, u_c)
        return self._blocks(vv=0.5 * (first - second))

    # ------------------------------------------------------------- operators
    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Full-size velocity stiffness; pressure rows and columns are empty."""
        return self.build(self.stiffness_data)

    @cached_property
    def velocity_stiffness(self) -> sp.csr_matrix:
        v = self.velocity_dofs
        return self.stiffness[v][:, v].tocsr()

    @cached_property
    def h1_inner(self) -> InnerProduct:
        return InnerProduct(self.velocity_stiffness, mask=self.velocity_dofs, size=self.total_dofs)

    @cached_property
    def divergence(self) -> sp.csr_matrix:
        """The ``(n_p1, n_velocity)`` block ``B`` with ``(B u)_a = -(psi_a, div u)``."""
        full = self.build(self.divergence_data)
        return full[self.n_velocity:][:, :self.n_velocity].tocsr()

    def trilinear(self, w_coeffs: np.ndarray) -> sp.csr_matrix:
        return self.build(self.trilinear_data(w_coeffs))

    def load_vector(self, forcing) -> np.ndarray:
        """``<f, v>`` for a callable ``forcing(x, y) -> (fx, fy)`` by the 7-point rule."""
        out = np.zeros(self.total_dofs)
        if forcing is None:
            return out
        fx, fy = forcing(self.qpoints[..., 0], self.qpoints[..., 1])
        for c, fc in enumerate((fx, fy)):
            fc = np.broadcast_to(fc, self.wq.shape)
            np.add.at(out, self.p2_cells + c * self.n_p2, np.einsum("eq,eq,qi->ei", self.wq, fc, self.phi))
        return out

    def trilinear_first_slot(self, v_coeffs: np.ndarray, w_coeffs: np.ndarray) -> np.ndarray:
        """Vector ``g`` with ``g . u = b*(u, v, w)`` for every velocity coefficient vector ``u``."""
        v, dv = self.velocity_at_quad(v_coeffs)
        w, dw = self.velocity_at_quad(w_coeffs)
        # b*(phi e_d, v, w) = 1/2 (phi d_d v_c, w_c) - 1/2 (phi d_d w_c, v_c)
        k = 0.5 * (np.einsum("eqcd,eqc->eqd", dv, w) - np.einsum("eqcd,eqc->eqd", dw, v))
        out = np.zeros(self.total_dofs)
        for d in range(2):
            np.add.at(out, self.p2_cells + d * self.n_p2, np.einsum("eq,eq,qi->ei", self.wq, k[..., d], self.phi))
        return out

    def h1_seminorm(self, coeffs: np.ndarray) -> float:
        """``||grad u||`` of the velocity part; pressure is ignored."""
        return ip_norm(coeffs, self.h1_inner)


def h1_seminorm(space: TaylorHoodSpace, coeffs: np.ndarray) -> float:
    return space.h1_seminorm(coeffs)


def assemble_stiffness(space: TaylorHoodSpace) -> sp.csr_matrix:
    return space.velocity_stiffness


def assemble_trilinear(space: TaylorHoodSpace, w_coeffs: np.ndarray) -> sp.csr_matrix:
    v = space.velocity_dofs
    return space.trilinear(w_coeffs)[v][:, v].tocsr()


def write_vtk(path, space: TaylorHoodSpace, coeffs: np.ndarray, title: str = "flow") -> None:
    """Legacy ASCII VTK of velocity and pressure at the mesh vertices."""
    mesh = space.mesh
    n = mesh.n
    ux, uy, p = space.split(coeffs)
    vert = (2 * (np.arange(n + 1)[:, None]) * (2 * n + 1) + 2 * np.arange(n + 1)[None, :]).ravel()
    lines = [
        "# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(mesh.nodes)} double",
    ]
    lines += [f"{float(x)!r} {float(y)!r} 0.0" for x, y in mesh.nodes]
    nt = len(mesh.triangles)
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    lines += [f"POINT_DATA {len(mesh.nodes)}", "VECTORS velocity double"]
    lines += [f"{float(a)!r} {float(b)!r} 0.0" for a, b in zip(ux[vert], uy[vert])]
    lines += ["SCALARS pressure double 1", "LOOKUP_TABLE default"]
    lines += [repr(float(v)) for v in p]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
