"""Picard iteration for the quasilinear transmission problem.

Given the ansatz U0 and its residual b, find phi on each side of x1 = 0 and
the interface flux G with

    a(phi, eta) +- int_G G eta = int b eta - int Q(U0 + grad phi_n) . grad eta

where a(phi, eta) = int eps1 grad phi . grad eta and Q(E) = eps3 |E|^2 E.
Only the tangential derivative of phi is continuous across the interface
and each side carries a zero-mean constraint.  One extra unknown c times
the mean functional closes the system: it is zero when the data are
compatible and otherwise absorbs the truncation defect.

Iterates are advanced in increment form.  With R_n the weak residual of
phi_n, each step solves S dx = -theta R_n and updates

    R_{n+1} = (1 - theta) R_n - (load(phi_{n+1}) - load(phi_n)),

where the load difference is evaluated from the increment directly, so the
residual trace stays meaningful far below the rounding level of the load.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .ansatz import AnsatzField, Envelope
from .errors import ConfigurationError, DivergenceError, IterationError, SingularSystemError
from .fem_core import (
    SIDES, Factorization, FemField, TransmissionMesh, assemble_flux_load, assemble_interface_mass,
    assemble_mass, assemble_mean, assemble_source_load, assemble_stiffness, build_mesh, recovered_gradient,
)
from .mode_solver import DielectricProfile, InterfaceMode

log = logging.getLogger(__name__)

LOAD_FORMS = ("source", "flux")
_GAUSS2 = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)


@dataclass
class SolverConfig:
    eps: float
    mode: InterfaceMode
    profile: DielectricProfile
    envelope: Envelope = field(default_factory=Envelope.gaussian)
    h: float = 0.05
    tol: float = 1e-8
    max_iter: int = 50
    min_iter: int = 1
    p: int = 3
    theta: float = 1.0
    bounds_minus: tuple = (-6.0, 0.0, -6.0, 6.0)
    bounds_plus: tuple = (0.0, 6.0, -6.0, 6.0)
    # "source": linear load int b eta with b the analytic divergence of eps1 U0
    # "flux":   linear load -int eps1 U0 . grad eta
    load_form: str = "source"

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ConfigurationError(f"eps must lie in (0, 1), got {self.eps}")
        if not self.h > 0:
            raise ConfigurationError(f"h must be positive, got {self.h}")
        if not self.tol > 0:
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be a positive integer, got {self.max_iter}")
        if not 1 <= self.min_iter <= self.max_iter:
            raise ConfigurationError("min_iter must lie in [1, max_iter]")
        if self.p != 3:
            raise ConfigurationError("only the Kerr case p = 3 is supported")
        if not 0 < self.theta <= 1:
            raise ConfigurationError(f"theta must lie in (0, 1], got {self.theta}")
        if self.load_form not in LOAD_FORMS:
            raise ConfigurationError(f"load_form must be one of {LOAD_FORMS}")


@dataclass
class _SideData:
    n: int
    offset: int
    stiffness: sp.csr_matrix
    mass: Factorization
    mean: np.ndarray
    qpoints: np.ndarray
    eps1_q: np.ndarray
    eps3_q: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    b_q: np.ndarray
    base_load: np.ndarray


class TransmissionProblem:
    """Everything about a configuration that does not change between iterates."""

    def __init__(self, config: SolverConfig, mesh: TransmissionMesh | None = None):
        self.config = config
        self.mesh = mesh or build_mesh(config.bounds_minus, config.bounds_plus, config.h)
        self.field = AnsatzField(config.mode, config.envelope, config.eps, config.profile)
        self.sides: dict[str, _SideData] = {}
        offset = 0
        for name in ("plus", "minus"):
            self.sides[name] = self._side_data(name, offset)
            offset += self.sides[name].n
        self.n_pde = offset
        self.n_interface = self.mesh.n_interface
        self.interface_mass = assemble_interface_mass(self.mesh)
        self.matrix = self._coupled_matrix()
        self.n_unknowns = self.matrix.shape[0]
        self._factor = None

    def eps_fn(self, side: str, which: str):
        prof = self.config.profile
        fn = getattr(prof, f"{which}_{side}")
        return lambda x: np.asarray(fn(np.asarray(x, float)), float) * np.ones(np.shape(x))

    def _side_data(self, name: str, offset: int) -> _SideData:
        mesh, s = self.mesh, self.mesh.side(name)
        eps1 = self.eps_fn(name, "eps1")
        eps3 = self.eps_fn(name, "eps3")
        q = s.midpoints()
        u1, u2 = self.field.eval_U0(q[..., 0], q[..., 1], side=name)
        e1q = eps1(q[..., 0])
        b_q = self.field.eval_b(q[..., 0], q[..., 1], side=name)
        if self.config.load_form == "source":
            base = assemble_source_load(mesh, name, b_q)
        else:
            base = assemble_flux_load(mesh, name, (e1q * u1, e1q * u2))
        mean = assemble_mean(mesh, name)
        return _SideData(
            n=s.n_nodes, offset=offset,
            stiffness=assemble_stiffness(mesh, name, lambda x1, x2: eps1(x1)),
            mass=Factorization(assemble_mass(mesh, name)),
            mean=mean / mean.sum(),
            qpoints=q, eps1_q=e1q, eps3_q=np.ascontiguousarray(eps3(q[..., 0])),
            u1=np.ascontiguousarray(u1), u2=np.ascontiguousarray(u2),
            b_q=b_q, base_load=base,
        )

    def _coupled_matrix(self) -> sp.csr_matrix:
        P, M = self.sides["plus"], self.sides["minus"]
        m = self.n_interface
        ip = self.mesh.plus.interface
        im = self.mesh.minus.interface
        Np, Nm = P.n, M.n
        sel_p = sp.csr_matrix((np.ones(m), (ip, np.arange(m))), shape=(Np, m))
        sel_m = sp.csr_matrix((np.ones(m), (im, np.arange(m))), shape=(Nm, m))
        diff = sp.diags([-np.ones(m - 1), np.ones(m - 1)], [0, 1], shape=(m - 1, m))
        rows = [
            [P.stiffness, None, sel_p @ self.interface_mass, P.mean[:, None]],
            [None, M.stiffness, -(sel_m @ self.interface_mass), M.mean[:, None]],
            [diff @ sel_p.T, -(diff @ sel_m.T), None, None],
            [P.mean[None, :], None, None, None],
            [None, M.mean[None, :], None, None],
        ]
        # the last block column needs an explicit width for the zero rows
        rows[2][3] = sp.csr_matrix((m - 1, 1))
        return sp.bmat(rows, format="csc")

    @property
    def factor(self) -> Factorization:
        if self._factor is None:
            self._factor = Factorization(self.matrix)
        return self._factor

    # ------------------------------------------------------------- pieces

    def split(self, x: np.ndarray):
        P, M = self.sides["plus"], self.sides["minus"]
        phi_p = x[:P.n]
        phi_m = x[P.n:P.n + M.n]
        G = x[self.n_pde:self.n_pde + self.n_interface]
        c = float(x[-1]) if len(x) > self.n_pde + self.n_interface else 0.0
        return phi_p, phi_m, G, c

    def field_of(self, x: np.ndarray) -> FemField:
        phi_p, phi_m, _, _ = self.split(x)
        return FemField(self.mesh, phi_m.copy(), phi_p.copy())

    def kerr_flux(self, side: str, grad: np.ndarray):
        d = self.sides[side]
        e1 = d.u1 + grad[:, 0:1]
        e2 = d.u2 + grad[:, 1:2]
        return _kernels.kerr_flux(np.ascontiguousarray(e1), np.ascontiguousarray(e2), d.eps3_q)

    def nonlinear_load(self, side: str, grad: np.ndarray) -> np.ndarray:
        return assemble_flux_load(self.mesh, side, self.kerr_flux(side, grad))

    def load(self, phi: FemField) -> np.ndarray:
        """Full right-hand side of the PDE rows, ordered [plus; minus]."""
        return np.concatenate([
            self.sides[s].base_load + self.nonlinear_load(s, phi.gradients(s)) for s in ("plus", "minus")
        ])

    def operator(self, phi: FemField, G: np.ndarray, c: float) -> np.ndarray:
        P, M = self.sides["plus"], self.sides["minus"]
        mg = self.interface_mass @ G
        rp = P.stiffness @ phi.phi_plus + c * P.mean
        rp[self.mesh.plus.interface] += mg
        rm = M.stiffness @ phi.phi_minus + c * M.mean
        rm[self.mesh.minus.interface] -= mg
        return np.concatenate([rp, rm])

    def dual_norm(self, r: np.ndarray) -> float:
        """sqrt(r^T M^-1 r) summed over sides: the L2 norm of the representant."""
        total = 0.0
        for s in ("plus", "minus"):
            d = self.sides[s]
            rs = r[d.offset:d.offset + d.n]
            total += float(rs @ d.mass.solve(rs)) if np.any(rs) else 0.0
        return float(np.sqrt(max(total, 0.0)))


@dataclass
class SolverState:
    n: int
    phi: FemField
    G: np.ndarray
    c: float
    residuals: list
    load_norm: float
    converged: bool = False
    # private iteration data: unknown vector, PDE residual, fields at quadrature
    x: np.ndarray = field(default=None, repr=False)
    R: np.ndarray = field(default=None, repr=False)
    grads: dict = field(default=None, repr=False)

    @property
    def relative_residual(self) -> float:
        if not self.residuals:
            return np.nan
        first = self.residuals[0]
        return 0.0 if first == 0 else self.residuals[-1] / first


def initial_state(problem: TransmissionProblem) -> SolverState:
    phi = FemField.zeros(problem.mesh)
    R = -problem.load(phi)
    grads = {s: np.zeros((problem.mesh.side(s).n_tris, 2)) for s in SIDES}
    return SolverState(
        n=0, phi=phi, G=np.zeros(problem.n_interface), c=0.0, residuals=[],
        load_norm=problem.dual_norm(R), x=np.zeros(problem.n_unknowns), R=R, grads=grads,
    )


def fixed_point_step(state: SolverState, problem: TransmissionProblem) -> SolverState:
    theta = problem.config.theta
    rhs = np.zeros(problem.n_unknowns)
    rhs[:problem.n_pde] = -theta * state.R
    try:
        dx = problem.factor.solve(rhs)
    except SingularSystemError as exc:
        raise IterationError(f"linear solve failed at iteration {state.n + 1}",
                             {"iteration": state.n + 1, **exc.diagnostics}) from exc
    x = state.x + dx
    dfield = problem.field_of(dx)
    dload = []
    grads = {}
    for s in ("plus", "minus"):
        d = problem.sides[s]
        g_old = state.grads[s]
        dg = dfield.gradients(s)
        a1 = np.ascontiguousarray(d.u1 + g_old[:, 0:1])
        a2 = np.ascontiguousarray(d.u2 + g_old[:, 1:2])
        q1, q2 = _kernels.kerr_increment(
            a1, a2, np.ascontiguousarray(np.broadcast_to(dg[:, 0:1], a1.shape)),
            np.ascontiguousarray(np.broadcast_to(dg[:, 1:2], a2.shape)), d.eps3_q)
        if not (np.all(np.isfinite(q1)) and np.all(np.isfinite(q2))):
            raise DivergenceError(f"non-finite Kerr flux at iteration {state.n + 1}",
                                  {"iteration": state.n + 1, "side": s})
        dload.append(assemble_flux_load(problem.mesh, s, (q1, q2)))
        grads[s] = g_old + dg
    dload = np.concatenate(dload)
    R = -dload if theta == 1 else (1 - theta) * state.R - dload
    if not np.all(np.isfinite(R)):
        raise DivergenceError(f"non-finite residual at iteration {state.n + 1}",
                              {"iteration": state.n + 1})
    phi_p, phi_m, G, c = problem.split(x)
    res = problem.dual_norm(R)
    residuals = state.residuals + [res]
    first = residuals[0]
    converged = res <= problem.config.tol * first
    return SolverState(
        n=state.n + 1, phi=FemField(problem.mesh, phi_m.copy(), phi_p.copy()), G=G.copy(), c=c,
        residuals=residuals, load_norm=state.load_norm, converged=converged,
        x=x, R=R, grads=grads,
    )


def solve(config_or_problem, log_path=None) -> SolverState:
    """Iterate from phi_0 = 0 until the relative residual drops below tol.

    The relative residual is measured against the residual of the first
    iterate.  Reaching max_iter returns the state with converged = False.
    """
    problem = (config_or_problem if isinstance(config_or_problem, TransmissionProblem)
               else TransmissionProblem(config_or_problem))
    cfg = problem.config
    state = initial_state(problem)
    out = open(log_path, "w") if log_path is not None else None
    t0 = time.perf_counter()
    try:
        while state.n < cfg.max_iter:
            state = fixed_point_step(state, problem)
            if out:
                out.write(json.dumps({"n": state.n, "residual": state.residuals[-1],
                                      "wall_time": time.perf_counter() - t0}) + "\n")
            log.debug("iteration %d residual %.3e", state.n, state.residuals[-1])
            # an exactly zero residual leaves nothing to iterate on
            if state.converged and (state.n >= cfg.min_iter or state.residuals[-1] == 0):
                break
        if out:
            audit = estimate_audit(state, problem)
            out.write(json.dumps({
                "norm_grad_phi_L2": norm_grad_phi(state.phi),
                "div_D_norm": div_D_norm(state.phi, problem),
                "energy_J_phi": audit["energy_J_phi"],
                "energy_J_0": audit["energy_J_0"],
                "jump_flux": audit["jump_flux"],
            }) + "\n")
    finally:
        if out:
            out.close()
    return state


def solve_linear(problem: TransmissionProblem) -> FemField:
    """One direct solve with the nonlinear flux frozen at phi = 0."""
    rhs = np.zeros(problem.n_unknowns)
    rhs[:problem.n_pde] = problem.load(FemField.zeros(problem.mesh))
    return problem.field_of(Factorization(problem.matrix).solve(rhs))


# ----------------------------------------------------------------- diagnostics

def norm_grad_phi(phi: FemField) -> float:
    total = 0.0
    for s in SIDES:
        g = phi.gradients(s)
        total += float(phi.mesh.side(s).areas @ np.sum(g * g, axis=1))
    return float(np.sqrt(total))


def weak_residual(problem: TransmissionProblem, phi: FemField, G=None, c: float = 0.0) -> np.ndarray:
    G = np.zeros(problem.n_interface) if G is None else G
    return problem.operator(phi, G, c) - problem.load(phi)


def residual_norm(phi, problem: TransmissionProblem) -> float:
    """Mass-weighted norm of the weak residual of a field or a solver state.

    A bare FemField is paired with zero interface flux; a SolverState uses
    its own G and c.  This evaluates the residual from scratch, so it stops
    decreasing at the rounding level of the load.
    """
    if isinstance(phi, SolverState):
        return problem.dual_norm(weak_residual(problem, phi.phi, phi.G, phi.c))
    return problem.dual_norm(weak_residual(problem, phi))


def _edge_points(side_mesh, edges):
    a = side_mesh.nodes[edges[:, 0]]
    b = side_mesh.nodes[edges[:, 1]]
    pts = a[:, None, :] + _GAUSS2[None, :, None] * (b - a)[:, None, :]
    length = np.linalg.norm(b - a, axis=1)
    return pts, length


def _edge_flux(problem: TransmissionProblem, phi: FemField, side: str, edges, edge_tri,
               include_u0: bool):
    """eps1 (U0 + grad phi) + Q at two Gauss points per edge; U0 is dropped from the linear part on request."""
    s = problem.mesh.side(side)
    pts, length = _edge_points(s, edges)
    g = phi.gradients(side)[edge_tri]
    u1, u2 = problem.field.eval_U0(pts[..., 0], pts[..., 1], side=side)
    e1 = problem.eps_fn(side, "eps1")(pts[..., 0])
    e3 = problem.eps_fn(side, "eps3")(pts[..., 0])
    E1 = u1 + g[:, None, 0]
    E2 = u2 + g[:, None, 1]
    q1, q2 = _kernels.np_kerr_flux(E1, E2, e3)
    if include_u0:
        lin1, lin2 = E1, E2
    else:
        lin1, lin2 = np.broadcast_to(g[:, None, 0], E1.shape), np.broadcast_to(g[:, None, 1], E2.shape)
    return e1 * lin1 + q1, e1 * lin2 + q2, length


def div_D_norm(phi: FemField, problem: TransmissionProblem) -> float:
    """L2 norm over both sides of div D for the recovered flux.

    D = eps1 (U0 + grad phi) + Q(U0 + grad phi) with grad phi replaced by
    its continuous nodal recovery.  The linear part of div(eps1 U0) is the
    analytic b; the rest is differentiated elementwise from the P1
    interpolants of the recovered gradient and of Q.  The interface jump of
    D1 is a separate diagnostic (``jump_flux``).
    """
    total = 0.0
    for side in SIDES:
        d = problem.sides[side]
        s = problem.mesh.side(side)
        rg = recovered_gradient(phi, side)
        nodes = s.nodes
        u1, u2 = problem.field.eval_U0(nodes[:, 0], nodes[:, 1], side=side)
        e3 = problem.eps_fn(side, "eps3")(nodes[:, 0])
        q1, q2 = _kernels.np_kerr_flux(u1 + rg[:, 0], u2 + rg[:, 1], e3)
        # elementwise divergence of P1 interpolants
        div = lambda f1, f2: (np.einsum("tk,tk->t", f1[s.tris], s.grads[:, :, 0])  # noqa: E731
                              + np.einsum("tk,tk->t", f2[s.tris], s.grads[:, :, 1]))
        de1 = problem.eps_fn(side, "deps1")(d.qpoints[..., 0])
        bary = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        g1q = np.einsum("qk,tk->tq", bary, rg[s.tris, 0])
        value = (d.b_q + de1 * g1q + d.eps1_q * div(rg[:, 0], rg[:, 1])[:, None]
                 + div(q1, q2)[:, None])
        total += float(s.areas @ np.mean(value**2, axis=1))
    return float(np.sqrt(total))


def _interface_edges(side_mesh):
    idx = side_mesh.interface
    edges = np.column_stack([idx[:-1], idx[1:]])
    lookup = {tuple(e): k for k, e in enumerate(map(tuple, side_mesh.edges))}
    tri = np.array([side_mesh.edge_tri[lookup[tuple(e)]] for e in edges])
    return edges, tri


def jump_flux(phi: FemField, problem: TransmissionProblem) -> float:
    """L2 norm on the interface of the jump of D1, from one-sided triangle values."""
    vals = {}
    for side in SIDES:
        s = problem.mesh.side(side)
        edges, tri = _interface_edges(s)
        f1, _, length = _edge_flux(problem, phi, side, edges, tri, include_u0=True)
        vals[side] = f1
    jump = vals["plus"] - vals["minus"]
    return float(np.sqrt(np.sum(0.5 * length[:, None] * jump**2)))


def jump_tangential(phi: FemField) -> float:
    mesh = phi.mesh
    dp = np.diff(phi.phi_plus[mesh.plus.interface])
    dm = np.diff(phi.phi_minus[mesh.minus.interface])
    if len(dp) == 0:
        return 0.0
    return float(np.max(np.abs(dp - dm)) / mesh.h)


def continuous_representative(phi: FemField) -> FemField:
    """Shift the plus side so phi agrees across the interface (gradients unchanged)."""
    mesh = phi.mesh
    kappa = float(np.mean(phi.phi_plus[mesh.plus.interface] - phi.phi_minus[mesh.minus.interface]))
    return FemField(mesh, phi.phi_minus, phi.phi_plus - kappa)


def energy(phi: FemField, problem: TransmissionProblem) -> float:
    """Discrete functional sum eps3 |U0 + grad phi|^4 / 4 + a(phi, phi)/2 - <load_0, phi>."""
    total = 0.0
    for side in SIDES:
        d = problem.sides[side]
        s = problem.mesh.side(side)
        g = phi.gradients(side)
        v = phi.values(side)
        e2 = (d.u1 + g[:, 0:1]) ** 2 + (d.u2 + g[:, 1:2]) ** 2
        total += float(s.areas @ np.mean(d.eps3_q * e2**2, axis=1)) / 4
        total += 0.5 * float(v @ (d.stiffness @ v)) - float(v @ d.base_load)
    return total


def energy_gradient(phi: FemField, problem: TransmissionProblem) -> np.ndarray:
    """Gradient of ``energy`` in nodal coordinates, ordered [plus; minus]."""
    return np.concatenate([
        problem.sides[s].stiffness @ phi.values(s) - problem.sides[s].base_load
        - problem.nonlinear_load(s, phi.gradients(s)) for s in ("plus", "minus")
    ])


def estimate_audit(state: SolverState, problem: TransmissionProblem) -> dict:
    """Both sides of the a priori estimate with alpha = p = 3, energies and jumps."""
    lhs = u4 = b2 = bl1 = 0.0
    for side in SIDES:
        d = problem.sides[side]
        s = problem.mesh.side(side)
        g = state.phi.gradients(side)
        w = s.areas[:, None] / 3
        g2 = np.sum(g * g, axis=1)[:, None]
        e2 = (d.u1 + g[:, 0:1]) ** 2 + (d.u2 + g[:, 1:2]) ** 2
        lhs += float(np.sum(w * (g2 + e2 * g2)))
        u4 += float(np.sum(w * (d.u1**2 + d.u2**2) ** 2))
        b2 += float(np.sum(w * d.b_q**2))
        r = np.hypot(d.qpoints[..., 0], d.qpoints[..., 1])
        bl1 += float(np.sum(w * np.log(2 + r) * np.abs(d.b_q)))
    terms = {"U0_L4_4": u4, "b_L2_2": b2, "b_L1log_2": bl1**2}
    rhs = sum(terms.values())
    rep = continuous_representative(state.phi)
    return {
        "lhs_22": lhs,
        "rhs_terms": terms,
        "ratio": lhs / rhs if rhs > 0 else float("nan"),
        "energy_J_phi": energy(rep, problem),
        "energy_J_0": energy(FemField.zeros(problem.mesh), problem),
        "jump_tangential": jump_tangential(state.phi),
        "jump_flux": jump_flux(state.phi, problem),
    }
