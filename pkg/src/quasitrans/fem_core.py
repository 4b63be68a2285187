"""P1 finite elements on two rectangles glued along x1 = 0.

Each side is a structured grid of right triangles.  Nodes on the shared
edge are duplicated, one copy per side, so the two sides only talk to each
other through explicit coupling blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import ConfigurationError, SingularSystemError

SIDES = ("minus", "plus")

# degree-5 seven-point rule on the reference triangle (barycentric, weight)
_A = (6 - np.sqrt(15)) / 21
_B = (6 + np.sqrt(15)) / 21
_WA = (155 - np.sqrt(15)) / 1200
_WB = (155 + np.sqrt(15)) / 1200
RULE7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A, _A, 1 - 2 * _A], [_A, 1 - 2 * _A, _A], [1 - 2 * _A, _A, _A],
    [_B, _B, 1 - 2 * _B], [_B, 1 - 2 * _B, _B], [1 - 2 * _B, _B, _B],
])
RULE7_WEIGHTS = np.array([9 / 40, _WA, _WA, _WA, _WB, _WB, _WB])


def _cells(length: float, h: float, what: str) -> int:
    n = int(round(length / h))
    if n < 1 or abs(n * h - length) > 1e-9 * max(1.0, abs(length)):
        raise ConfigurationError(f"h={h} does not divide the {what} length {length}")
    return n


@dataclass
class SideMesh:
    """Structured right-triangle mesh of one rectangle.

    Node (i, j) sits at (x_lo + i h, y_lo + j h) with index j (nx+1) + i.
    Cell (i, j) is split into (p00, p10, p01) and (p11, p01, p10), so the
    first vertex of every triangle carries the right angle.
    """

    bounds: tuple
    h: float
    nx: int
    ny: int
    nodes: np.ndarray = field(repr=False)
    tris: np.ndarray = field(repr=False)
    interface: np.ndarray = field(repr=False)
    # boundary edges (E, 2), owning triangle (E,), outward unit normal (E, 2)
    edges: np.ndarray = field(repr=False)
    edge_tri: np.ndarray = field(repr=False)
    edge_normal: np.ndarray = field(repr=False)
    grads: np.ndarray = field(repr=False)
    areas: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tris(self) -> int:
        return len(self.tris)

    def node(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.tris].mean(axis=1)

    def midpoints(self) -> np.ndarray:
        """Edge midpoints (T, 3, 2) in the order 01, 12, 20."""
        p = self.nodes[self.tris]
        return 0.5 * (p + np.roll(p, -1, axis=1))

    def rule7_points(self) -> np.ndarray:
        return np.einsum("qk,tkd->tqd", RULE7_BARY, self.nodes[self.tris])


def _side_mesh(bounds, h, interface_at_right: bool) -> SideMesh:
    x_lo, x_hi, y_lo, y_hi = map(float, bounds)
    nx = _cells(x_hi - x_lo, h, "x1")
    ny = _cells(y_hi - y_lo, h, "x2")
    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    nodes = np.column_stack([x_lo + ii.ravel() * h, y_lo + jj.ravel() * h])
    # snap the interface column onto x1 = 0 exactly
    nodes[np.abs(nodes[:, 0]) < 1e-12 * max(1.0, h), 0] = 0.0

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    ci, cj = ci.ravel(), cj.ravel()
    node = lambda i, j: j * (nx + 1) + i  # noqa: E731
    p00, p10, p01, p11 = node(ci, cj), node(ci + 1, cj), node(ci, cj + 1), node(ci + 1, cj + 1)
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([p00, p10, p01])
    tris[1::2] = np.column_stack([p11, p01, p10])
    cell = lambda i, j: j * nx + i  # noqa: E731

    i = np.arange(nx)
    j = np.arange(ny)
    edges = [
        (np.column_stack([node(i, 0), node(i + 1, 0)]), 2 * cell(i, 0), (0.0, -1.0)),
        (np.column_stack([node(i, ny), node(i + 1, ny)]), 2 * cell(i, ny - 1) + 1, (0.0, 1.0)),
        (np.column_stack([node(0, j), node(0, j + 1)]), 2 * cell(0, j), (-1.0, 0.0)),
        (np.column_stack([node(nx, j), node(nx, j + 1)]), 2 * cell(nx - 1, j) + 1, (1.0, 0.0)),
    ]
    grads, areas = _kernels.p1_gradients(nodes, tris)
    return SideMesh(
        bounds=(x_lo, x_hi, y_lo, y_hi), h=float(h), nx=nx, ny=ny,
        nodes=nodes, tris=tris,
        interface=node(nx if interface_at_right else 0, np.arange(ny + 1)),
        edges=np.concatenate([e[0] for e in edges]),
        edge_tri=np.concatenate([e[1] for e in edges]),
        edge_normal=np.concatenate([np.tile(e[2], (len(e[0]), 1)) for e in edges]),
        grads=grads, areas=areas,
    )


@dataclass
class TransmissionMesh:
    minus: SideMesh
    plus: SideMesh
    h: float

    def side(self, name: str) -> SideMesh:
        if name not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {name!r}")
        return getattr(self, name)

    @property
    def interface_x2(self) -> np.ndarray:
        return self.plus.nodes[self.plus.interface, 1]

    @property
    def n_interface(self) -> int:
        return len(self.plus.interface)


def build_mesh(bounds_minus, bounds_plus, h: float) -> TransmissionMesh:
    """Mesh ``[x_lo, x_hi] x [y_lo, y_hi]`` rectangles on either side of x1 = 0."""
    if not h > 0:
        raise ConfigurationError(f"mesh step must be positive, got {h}")
    bm, bp = tuple(map(float, bounds_minus)), tuple(map(float, bounds_plus))
    if len(bm) != 4 or len(bp) != 4:
        raise ConfigurationError("bounds are (x_lo, x_hi, y_lo, y_hi)")
    if bm[1] != 0.0 or bp[0] != 0.0 or bm[0] >= 0 or bp[1] <= 0:
        raise ConfigurationError("the two rectangles must meet at x1 = 0, minus side on the left")
    if bm[2:] != bp[2:] or bm[2] >= bm[3]:
        raise ConfigurationError("rectangles must share the full segment {0} x [y0, y1]")
    return TransmissionMesh(
        minus=_side_mesh(bm, h, interface_at_right=True),
        plus=_side_mesh(bp, h, interface_at_right=False),
        h=float(h),
    )


# ------------------------------------------------------------------ assembly

def _at(points: np.ndarray, fn) -> np.ndarray:
    if callable(fn):
        return np.asarray(fn(points[..., 0], points[..., 1]), float) * np.ones(points.shape[:-1])
    return np.full(points.shape[:-1], float(fn))


def _coo(side: SideMesh, local: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(side.tris, 3, axis=1).ravel()
    cols = np.tile(side.tris, (1, 3)).ravel()
    n = side.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def element_stiffness(side: SideMesh, coeff) -> np.ndarray:
    c = _at(side.centroids(), coeff)
    return _kernels.element_stiffness(side.grads, side.areas, c)


def assemble_stiffness(mesh: TransmissionMesh, side: str, coeff=1.0) -> sp.csr_matrix:
    """Sum over triangles of coeff(centroid) * int grad(eta_j) . grad(eta_k)."""
    s = mesh.side(side)
    return _coo(s, element_stiffness(s, coeff))


def assemble_mass(mesh: TransmissionMesh, side: str) -> sp.csr_matrix:
    """Consistent P1 mass matrix of one side."""
    s = mesh.side(side)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _coo(s, s.areas[:, None, None] * ref[None])


def assemble_mean(mesh: TransmissionMesh, side: str) -> np.ndarray:
    """Vector of int eta_j, so that m @ phi is the integral of phi."""
    s = mesh.side(side)
    return _kernels.scatter(s.tris, np.repeat(s.areas[:, None] / 3.0, 3, axis=1), s.n_nodes)


def assemble_interface_mass(mesh: TransmissionMesh) -> sp.csr_matrix:
    """1D P1 mass matrix on the shared edge, indexed by interface position."""
    y = mesh.interface_x2
    d = np.diff(y)
    diag = np.zeros(len(y))
    diag[:-1] += d / 3
    diag[1:] += d / 3
    return sp.diags([d / 6, diag, d / 6], [-1, 0, 1], format="csr")


def assemble_flux_load(mesh: TransmissionMesh, side: str, flux) -> np.ndarray:
    """Entries -int flux . grad(eta_j) by the edge-midpoint rule.

    ``flux`` is either a callable (x1, x2) -> (f1, f2) or a pair of arrays
    already sampled at ``side.midpoints()``.
    """
    s = mesh.side(side)
    if callable(flux):
        q = s.midpoints()
        f1, f2 = flux(q[..., 0], q[..., 1])
    else:
        f1, f2 = flux
    f1 = np.ascontiguousarray(np.broadcast_to(np.asarray(f1, float), (s.n_tris, 3)))
    f2 = np.ascontiguousarray(np.broadcast_to(np.asarray(f2, float), (s.n_tris, 3)))
    return _kernels.flux_load(s.tris, s.grads, s.areas, f1, f2, s.n_nodes)


def assemble_source_load(mesh: TransmissionMesh, side: str, source) -> np.ndarray:
    """Entries int f eta_j by the edge-midpoint rule (exact for linear f)."""
    s = mesh.side(side)
    if callable(source):
        f = _at(s.midpoints(), source)
    else:
        f = np.broadcast_to(np.asarray(source, float), (s.n_tris, 3))
    return _kernels.source_load(s.tris, s.areas, np.ascontiguousarray(f), s.n_nodes)


# ------------------------------------------------------------------- solving

@dataclass
class SparseSystem:
    """A x = b, optionally with equality rows C x = d appended."""

    matrix: sp.spmatrix
    rhs: np.ndarray
    constraints: sp.spmatrix | None = None
    constraint_rhs: np.ndarray | None = None
    symmetric: bool = False

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, float)
        if self.matrix.shape[0] != len(self.rhs):
            raise ValueError("matrix rows and rhs length differ")
        if self.constraints is not None:
            if self.constraints.shape[1] != self.matrix.shape[1]:
                raise ValueError("constraint rows have the wrong width")
            if self.constraint_rhs is None:
                self.constraint_rhs = np.zeros(self.constraints.shape[0])
            self.constraint_rhs = np.asarray(self.constraint_rhs, float)
            if len(self.constraint_rhs) != self.constraints.shape[0]:
                raise ValueError("constraint rows and constraint rhs length differ")

    def augmented(self):
        if self.constraints is None:
            return sp.csr_matrix(self.matrix), self.rhs
        return (sp.vstack([self.matrix, self.constraints], format="csr"),
                np.concatenate([self.rhs, self.constraint_rhs]))


class Factorization:
    """Sparse LU of a square matrix, reused across right-hand sides."""

    def __init__(self, matrix: sp.spmatrix, check_tol: float = 1e-8):
        self.matrix = sp.csc_matrix(matrix)
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("Factorization needs a square matrix")
        self.check_tol = check_tol
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SingularSystemError(f"sparse LU failed: {exc}",
                                      {"shape": self.matrix.shape, "nnz": self.matrix.nnz}) from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(np.asarray(rhs, float))
        bnorm = np.linalg.norm(rhs)
        res = np.linalg.norm(self.matrix @ x - rhs)
        if not np.all(np.isfinite(x)) or res > self.check_tol * max(bnorm, 1e-300) and bnorm > 0:
            raise SingularSystemError(
                "linear solve is inaccurate; the system is numerically singular",
                {"residual": float(res), "rhs_norm": float(bnorm), "shape": self.matrix.shape},
            )
        return x


def solve_constrained(system: SparseSystem) -> np.ndarray:
    """Exact solve for square augmented systems, least squares otherwise."""
    A, b = system.augmented()
    m, n = A.shape
    if m == n:
        return Factorization(A).solve(b)
    if m < n:
        raise SingularSystemError("underdetermined system", {"shape": (m, n)})
    out = spla.lsmr(A, b, atol=1e-15, btol=1e-15, conlim=1e14, maxiter=50 * n)
    x, istop = out[0], out[1]
    if not np.all(np.isfinite(x)) or istop == 3:
        raise SingularSystemError("least-squares solve failed",
                                  {"istop": int(istop), "shape": (m, n)})
    # a solution that still leaves a large normal-equation residual means
    # the column space is rank deficient beyond what lsmr could resolve
    normal = np.linalg.norm(A.T @ (A @ x - b))
    scale = spla.norm(A) ** 2 * max(np.linalg.norm(x), 1e-300)
    if normal > 1e-8 * scale:
        raise SingularSystemError("least-squares solve did not converge",
                                  {"normal_residual": float(normal), "shape": (m, n)})
    return x


def dump_triplets(matrix: sp.spmatrix, path) -> None:
    """Write ``row col value`` lines for every stored nonzero."""
    coo = sp.coo_matrix(matrix)
    np.savetxt(path, np.column_stack([coo.row, coo.col, coo.data]),
               fmt=["%d", "%d", "%.17g"])


# -------------------------------------------------------------------- fields

@dataclass
class FemField:
    mesh: TransmissionMesh
    phi_minus: np.ndarray
    phi_plus: np.ndarray

    def __post_init__(self):
        self.phi_minus = np.asarray(self.phi_minus, float)
        self.phi_plus = np.asarray(self.phi_plus, float)
        if len(self.phi_minus) != self.mesh.minus.n_nodes or len(self.phi_plus) != self.mesh.plus.n_nodes:
            raise ValueError("nodal vectors do not match the mesh")
        if not (np.all(np.isfinite(self.phi_minus)) and np.all(np.isfinite(self.phi_plus))):
            raise ValueError("FemField values must be finite")

    @classmethod
    def zeros(cls, mesh: TransmissionMesh) -> "FemField":
        return cls(mesh, np.zeros(mesh.minus.n_nodes), np.zeros(mesh.plus.n_nodes))

    def values(self, side: str) -> np.ndarray:
        return self.phi_minus if side == "minus" else self.phi_plus

    def gradients(self, side: str) -> np.ndarray:
        """Element-constant gradient (T, 2)."""
        s = self.mesh.side(side)
        return np.einsum("tk,tkd->td", self.values(side)[s.tris], s.grads)

    def evaluate(self, x1, x2) -> np.ndarray:
        """Barycentric interpolation; x1 < 0 reads the minus side, x1 >= 0 the plus side."""
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        out = np.full(x1.shape, np.nan)
        for name, mask in (("minus", x1 < 0), ("plus", x1 >= 0)):
            s = self.mesh.side(name)
            x_lo, x_hi, y_lo, y_hi = s.bounds
            inside = mask & (x1 >= x_lo) & (x1 <= x_hi) & (x2 >= y_lo) & (x2 <= y_hi)
            u = (x1[inside] - x_lo) / s.h
            v = (x2[inside] - y_lo) / s.h
            i = np.clip(np.floor(u).astype(int), 0, s.nx - 1)
            j = np.clip(np.floor(v).astype(int), 0, s.ny - 1)
            xi, eta = u - i, v - j
            phi = self.values(name)
            lower = xi + eta <= 1
            val = np.where(
                lower,
                (1 - xi - eta) * phi[s.node(i, j)] + xi * phi[s.node(i + 1, j)] + eta * phi[s.node(i, j + 1)],
                (xi + eta - 1) * phi[s.node(i + 1, j + 1)] + (1 - xi) * phi[s.node(i, j + 1)]
                + (1 - eta) * phi[s.node(i + 1, j)],
            )
            out[inside] = val
        return out


def error_norms(mesh: TransmissionMesh, side: str, values: np.ndarray,
                exact: Callable, exact_grad: Callable) -> tuple[float, float]:
    """L2 and H1-seminorm distance between a P1 function and a smooth one.

    Integrated with a degree-5 rule so quadrature error stays below the
    discretisation error being measured.
    """
    s = mesh.side(side)
    q = s.rule7_points()
    uh = np.einsum("qk,tk->tq", RULE7_BARY, values[s.tris])
    gh = np.einsum("tk,tkd->td", values[s.tris], s.grads)
    e0 = uh - exact(q[..., 0], q[..., 1])
    g1, g2 = exact_grad(q[..., 0], q[..., 1])
    e1 = (gh[:, None, 0] - g1) ** 2 + (gh[:, None, 1] - g2) ** 2
    w = s.areas[:, None] * RULE7_WEIGHTS[None]
    return float(np.sqrt(np.sum(w * e0**2))), float(np.sqrt(np.sum(w * e1)))


def recovered_gradient(field: FemField, side: str) -> np.ndarray:
    """Continuous nodal gradient (N, 2) by averaging over adjacent triangles.

    Averaging is second-order accurate at interior nodes of this mesh; on
    the boundary the values are replaced by linear extrapolation from the
    two nearest interior rows so the whole recovery stays second order.
    Needs at least three cells per direction.
    """
    s = field.mesh.side(side)
    if s.nx < 3 or s.ny < 3:
        raise ConfigurationError("gradient recovery needs at least three cells per direction")
    g = field.gradients(side)
    count = np.bincount(s.tris.ravel(), minlength=s.n_nodes)
    out = np.empty((s.n_nodes, 2))
    for k in range(2):
        out[:, k] = np.bincount(s.tris.ravel(), weights=np.repeat(g[:, k], 3), minlength=s.n_nodes) / count
    grid = out.reshape(s.ny + 1, s.nx + 1, 2)
    grid[:, 0] = 2 * grid[:, 1] - grid[:, 2]
    grid[:, -1] = 2 * grid[:, -2] - grid[:, -3]
    grid[0] = 2 * grid[1] - grid[2]
    grid[-1] = 2 * grid[-2] - grid[-3]
    return grid.reshape(-1, 2)
