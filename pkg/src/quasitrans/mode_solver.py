"""TM interface modes of a layered dielectric with a jump at x1 = 0.

The magnetic component w3 solves

    -w3'' + (eps1'/eps1) w3' - eps1 omega^2 w3 = -k^2 w3     on x1 != 0,
    [w3] = [w3'/eps1] = 0                                     at x1 = 0.

The derivative jump is removed by writing w3 = w3r + Lift(w3r) where
``Lift`` is the rank-one operator

    Lift(v)(x) = -sign(nu) v'(0)              for x < 0,
    Lift(v)(x) = -sign(nu) v'(0) exp(-|nu| x)  for x >= 0,

with nu = (eps1(0+) - eps1(0-)) / eps1(0-).  The smooth part w3r is then
discretized by centred finite differences and the generalized eigenproblem
A v = k^2 B v is solved for k^2.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

from .errors import ConfigurationError

log = logging.getLogger(__name__)

ScalarFn = Callable[[np.ndarray], np.ndarray]

DENSE_LIMIT = 400


def _lambdify(expr: str) -> tuple[ScalarFn, ScalarFn]:
    x = sympy.Symbol("x", real=True)
    try:
        e = sympy.sympify(expr, locals={"x": x})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigurationError(f"cannot parse profile expression {expr!r}") from exc
    if e.free_symbols - {x}:
        raise ConfigurationError(f"profile expression {expr!r} may only depend on x")
    f = sympy.lambdify(x, e, "numpy")
    df = sympy.lambdify(x, sympy.diff(e, x), "numpy")

    def value(t, f=f):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(f(t), dtype=float), t.shape).copy()

    def deriv(t, df=df):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(df(t), dtype=float), t.shape).copy()

    return value, deriv


def _piecewise(x, minus: ScalarFn, plus: ScalarFn) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    left = x < 0
    if left.any():
        out[left] = minus(x[left])
    if (~left).any():
        out[~left] = plus(x[~left])
    return out


@dataclass(frozen=True)
class DielectricProfile:
    """Piecewise-smooth linear and cubic permittivities.

    The minus-side functions are used for x1 < 0 and the plus-side ones for
    x1 >= 0; each comes with its first derivative.
    """

    eps1_minus: ScalarFn
    eps1_plus: ScalarFn
    deps1_minus: ScalarFn
    deps1_plus: ScalarFn
    eps3_minus: ScalarFn
    eps3_plus: ScalarFn
    deps3_minus: ScalarFn
    deps3_plus: ScalarFn
    name: str = "custom"

    @classmethod
    def from_expressions(cls, eps1_minus: str, eps1_plus: str,
                         eps3_minus: str = "1", eps3_plus: str = "1",
                         name: str = "custom") -> "DielectricProfile":
        """Build a profile from sympy-parsable expressions in ``x``."""
        e1m, de1m = _lambdify(eps1_minus)
        e1p, de1p = _lambdify(eps1_plus)
        e3m, de3m = _lambdify(eps3_minus)
        e3p, de3p = _lambdify(eps3_plus)
        return cls(e1m, e1p, de1m, de1p, e3m, e3p, de3m, de3p, name=name)

    def eps1(self, x) -> np.ndarray:
        return _piecewise(x, self.eps1_minus, self.eps1_plus)

    def deps1(self, x) -> np.ndarray:
        return _piecewise(x, self.deps1_minus, self.deps1_plus)

    def eps3(self, x) -> np.ndarray:
        return _piecewise(x, self.eps3_minus, self.eps3_plus)

    def deps3(self, x) -> np.ndarray:
        return _piecewise(x, self.deps3_minus, self.deps3_plus)

    @property
    def eps1_at_interface(self) -> tuple[float, float]:
        """One-sided limits ``(eps1(0-), eps1(0+))``."""
        z = np.zeros(1)
        return float(self.eps1_minus(z)[0]), float(self.eps1_plus(z)[0])

    @property
    def nu(self) -> float:
        em, ep = self.eps1_at_interface
        return (ep - em) / em

    def with_eps3(self, eps3_minus: str, eps3_plus: str) -> "DielectricProfile":
        e3m, de3m = _lambdify(eps3_minus)
        e3p, de3p = _lambdify(eps3_plus)
        return dataclasses.replace(self, eps3_minus=e3m, eps3_plus=e3p,
                                   deps3_minus=de3m, deps3_plus=de3p)

    def mirrored(self) -> "DielectricProfile":
        """Profile reflected through x1 -> -x1."""
        def flip(f):
            return lambda t: f(-np.asarray(t, dtype=float))

        def flip_d(df):
            return lambda t: -df(-np.asarray(t, dtype=float))

        return DielectricProfile(
            flip(self.eps1_plus), flip(self.eps1_minus),
            flip_d(self.deps1_plus), flip_d(self.deps1_minus),
            flip(self.eps3_plus), flip(self.eps3_minus),
            flip_d(self.deps3_plus), flip_d(self.deps3_minus),
            name=f"{self.name}_mirrored",
        )

    def check(self, x) -> float:
        """Return the positivity margin ``d`` on the samples ``x``.

        Raises ConfigurationError if a coefficient is not bounded away from
        zero or is not finite.
        """
        vals = [self.eps1(x), self.eps3(x), self.deps1(x), self.deps3(x)]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise ConfigurationError(f"profile {self.name!r} is not bounded on the grid")
        d = float(min(vals[0].min(), vals[1].min()))
        if d <= 0:
            raise ConfigurationError(f"profile {self.name!r} is not positive (min {d:g})")
        return d


BUILTIN_PROFILES = {
    "fig1": ("1", "1 + exp(-x)"),
    "step": ("1", "2"),
    "continuous": ("2", "1 + exp(-x)"),
}


def builtin_profile(name: str, eps3: tuple[str, str] = ("1", "1")) -> DielectricProfile:
    try:
        e1m, e1p = BUILTIN_PROFILES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown built-in profile {name!r}; choose from {sorted(BUILTIN_PROFILES)}"
        ) from None
    return DielectricProfile.from_expressions(e1m, e1p, *eps3, name=name)


@dataclass(frozen=True)
class Grid1D:
    left: float
    right: float
    n_points: int

    @classmethod
    def from_spacing(cls, left: float, right: float, h: float) -> "Grid1D":
        n = int(round((right - left) / h)) + 1
        grid = cls(float(left), float(right), n)
        if abs(grid.spacing - h) > 1e-9 * h:
            raise ConfigurationError(f"spacing {h} does not divide [{left}, {right}]")
        return grid

    @classmethod
    def symmetric(cls, half_width: float, h: float) -> "Grid1D":
        return cls.from_spacing(-half_width, half_width, h)

    @property
    def spacing(self) -> float:
        return (self.right - self.left) / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.left, self.right, self.n_points)

    @property
    def interface_index(self) -> int:
        """Index of the node at x1 = 0; raises if the grid is not aligned."""
        if not (self.left < 0 < self.right):
            raise ConfigurationError("grid must contain x1 = 0 in its interior")
        h = self.spacing
        i0 = int(round(-self.left / h))
        if abs(self.left + i0 * h) > 1e-8 * h:
            raise ConfigurationError("grid is not aligned with the interface x1 = 0")
        if i0 < 1 or i0 > self.n_points - 2:
            raise ConfigurationError("grid needs a node on each side of x1 = 0")
        return i0


@dataclass(frozen=True)
class InterfaceMode:
    """A TM mode sampled on a 1D grid.

    Arrays hold right limits at the interface node; the left limits of the
    discontinuous components are kept in ``w1_left0`` and ``w2_imag_left0``.
    w2 itself is ``1j * w2_imag``.
    """

    omega0: float
    k0: float
    x: np.ndarray
    w1: np.ndarray
    w2_imag: np.ndarray
    w3: np.ndarray
    nu: float
    interface_index: int
    w1_left0: float
    w2_imag_left0: float

    @property
    def spacing(self) -> float:
        return float(self.x[1] - self.x[0])

    def sides(self, values: np.ndarray, left0: float | None = None):
        """Split samples into (x<=0, x>=0) pieces with proper interface limits."""
        i0 = self.interface_index
        left = values[: i0 + 1].copy()
        if left0 is not None:
            left[-1] = left0
        return left, values[i0:].copy()


@dataclass(frozen=True)
class DispersionCandidate:
    k0: float
    w3: np.ndarray
    boundary_ratio: float
    eig_residual: float


def _derivative_stencil(h: float) -> np.ndarray:
    # second-order one-sided difference from the right of x1 = 0
    return np.array([-3.0, 4.0, -1.0]) / (2.0 * h)


def _lift_shape(x: np.ndarray, nu: float) -> np.ndarray:
    return np.where(x < 0, 1.0, np.exp(-abs(nu) * np.maximum(x, 0.0)))


def _lift_operator_image(profile: DielectricProfile, omega0: float, x: np.ndarray,
                         i0: int) -> np.ndarray:
    """Exact value of the ODE operator applied to the lift shape at every node."""
    nu = profile.nu
    a = abs(nu)
    ep = profile.eps1_plus(x)
    dp = profile.deps1_plus(x)
    em = profile.eps1_minus(x)
    plus = (-a * a - (dp / ep) * a - ep * omega0**2) * np.exp(-a * np.maximum(x, 0.0))
    minus = -em * omega0**2
    out = np.where(x < 0, minus, plus)
    out[i0] = 0.5 * (minus[i0] + plus[i0])
    return out


def _coefficients(profile: DielectricProfile, x: np.ndarray, i0: int):
    eps = profile.eps1(x)
    drift = profile.deps1(x) / eps
    z = np.zeros(1)
    em, ep = profile.eps1_minus(z)[0], profile.eps1_plus(z)[0]
    dm, dp = profile.deps1_minus(z)[0], profile.deps1_plus(z)[0]
    # at the interface node the one-sided equations are averaged
    eps[i0] = 0.5 * (em + ep)
    drift[i0] = 0.5 * (dm / em + dp / ep)
    return eps, drift


def assemble_eigenproblem(profile: DielectricProfile, omega0: float, grid: Grid1D):
    """Sparse pair ``(A, B)`` with ``A v = k^2 B v`` over interior samples of w3r.

    The outer values are eliminated: w3r(right) = 0 and
    w3r(left) = sign(nu) w3r'(0), so that w3 vanishes at both ends.
    """
    i0 = grid.interface_index
    x = grid.x
    h = grid.spacing
    n = grid.n_points
    profile.check(x)
    nu = profile.nu
    snu = float(np.sign(nu))

    eps, drift = _coefficients(profile, x, i0)
    m = n - 2
    xi = x[1:-1]
    diag = 2.0 / h**2 - eps[1:-1] * omega0**2
    lower = -1.0 / h**2 - drift[2:-1] / (2 * h)
    upper = -1.0 / h**2 + drift[1:-2] / (2 * h)
    A = sp.diags([lower, diag, upper], [-1, 0, 1], shape=(m, m), format="csr")
    B = -sp.identity(m, format="csr")

    if snu != 0.0:
        if i0 < 2 or i0 + 3 > n - 1:
            raise ConfigurationError("a jump in eps1 needs at least two interior nodes on each side of x1 = 0")
        cols = np.array([i0, i0 + 1, i0 + 2]) - 1
        d0 = _derivative_stencil(h)
        shape = _lift_shape(xi, nu)
        image = _lift_operator_image(profile, omega0, x, i0)[1:-1]
        rows = np.repeat(np.arange(m), 3)
        cc = np.tile(cols, m)
        # (I + Lift) v = v - sign(nu) * shape * (d0 . v)
        A = A + sp.csr_matrix(((-snu * image[:, None] * d0).ravel(), (rows, cc)), shape=(m, m))
        B = B - sp.csr_matrix(((-snu * shape[:, None] * d0).ravel(), (rows, cc)), shape=(m, m))
        # the eliminated value w3r(left) = sign(nu) * (d0 . v) enters the first row
        a0 = -1.0 / h**2 - drift[1] / (2 * h)
        A = A + sp.csr_matrix((a0 * snu * d0, (np.zeros(3, int), cols)), shape=(m, m))
    return A.tocsr(), B.tocsr()


def _expand(v: np.ndarray, grid: Grid1D, nu: float) -> np.ndarray:
    """Full-grid w3 = (I + Lift) w3r from interior samples of w3r."""
    i0 = grid.interface_index
    full = np.zeros(grid.n_points, dtype=v.dtype)
    full[1:-1] = v
    slope = _derivative_stencil(grid.spacing) @ full[i0:i0 + 3]
    snu = np.sign(nu)
    full[0] = snu * slope
    return full - snu * slope * _lift_shape(grid.x, nu)


def boundary_ratio(w3: np.ndarray, window: float = 0.1) -> float:
    """Largest amplitude in the outer ``window`` fraction of the grid, relative to the peak."""
    n = len(w3)
    k = max(2, int(window * n))
    peak = np.max(np.abs(w3))
    if peak == 0:
        return np.inf
    return float(max(np.abs(w3[:k]).max(), np.abs(w3[-k:]).max()) / peak)


def _normalize(w3: np.ndarray, i0: int) -> np.ndarray:
    w3 = w3 / np.max(np.abs(w3))
    if w3[i0] < 0:
        w3 = -w3
    return w3


def _eigs(A, B, n_candidates: int, shift: float):
    m = A.shape[0]
    if m <= DENSE_LIMIT:
        vals, vecs = sla.eig(A.toarray(), B.toarray())
        finite = np.isfinite(vals)
        vals, vecs = vals[finite], vecs[:, finite]
        order = np.argsort(np.abs(vals - shift))[:n_candidates]
        return vals[order], vecs[:, order]
    lu = spla.splu((A - shift * B).tocsc())
    op = spla.LinearOperator((m, m), matvec=lambda y: lu.solve(np.asarray(B @ y)), dtype=float)
    k = min(n_candidates, m - 2)
    mu, vecs = spla.eigs(op, k=k, which="LM", v0=np.ones(m), tol=1e-13)
    return shift + 1.0 / mu, vecs


def solve_dispersion(profile: DielectricProfile, omega0: float, grid: Grid1D,
                     n_candidates: int = 6, shift: float | None = None,
                     decay_tol: float = 1e-6) -> list[DispersionCandidate]:
    """Localized eigenpairs ``(k0, w3)`` sorted by boundary ratio, then by k0 descending.

    An empty list means no localized mode was found near ``shift``.
    """
    A, B = assemble_eigenproblem(profile, omega0, grid)
    if shift is None:
        shift = 1.2 * profile.eps1_at_interface[0] * omega0**2
    vals, vecs = _eigs(A, B, n_candidates, shift)
    i0 = grid.interface_index
    out = []
    for lam, v in zip(vals, vecs.T):
        if abs(lam.imag) > 1e-8 * max(abs(lam), 1.0) or lam.real <= 0:
            continue
        # eigenvectors of real eigenvalues are real up to a global phase
        v = v * np.exp(-1j * np.angle(v[np.argmax(np.abs(v))]))
        v = v.real
        lam = float(lam.real)
        res = float(np.linalg.norm(A @ v - lam * (B @ v)) / np.linalg.norm(v))
        w3 = _normalize(_expand(v, grid, profile.nu), i0)
        ratio = boundary_ratio(w3)
        log.debug("candidate k^2=%.10g ratio=%.3g residual=%.3g", lam, ratio, res)
        if ratio <= decay_tol:
            out.append(DispersionCandidate(float(np.sqrt(lam)), w3, ratio, res))
    out.sort(key=lambda c: (c.boundary_ratio, -c.k0))
    return out


def _one_sided_gradient(values: np.ndarray, h: float, i0: int):
    left = np.gradient(values[: i0 + 1], h, edge_order=2)
    right = np.gradient(values[i0:], h, edge_order=2)
    return left, right


def reconstruct_mode(w3: np.ndarray, profile: DielectricProfile, omega0: float,
                     k0: float, grid: Grid1D) -> InterfaceMode:
    """Recover w1 = -k w3 / (omega eps1) and w2 = -i w3' / (omega eps1)."""
    if omega0 == 0:
        raise ValueError("omega0 must be nonzero")
    i0 = grid.interface_index
    x = grid.x
    h = grid.spacing
    w3 = np.asarray(w3, dtype=float)
    peak = np.max(np.abs(w3))
    if peak > 0:
        w3 = w3 / peak
    eps = profile.eps1(x)
    em0, _ = profile.eps1_at_interface
    w1 = -k0 / (omega0 * eps) * w3
    dl, dr = _one_sided_gradient(w3, h, i0)
    dw3 = np.concatenate([dl[:-1], dr])
    w2 = -dw3 / (omega0 * eps)
    return InterfaceMode(
        omega0=float(omega0), k0=float(k0), x=x, w1=w1, w2_imag=w2, w3=w3,
        nu=profile.nu, interface_index=i0,
        w1_left0=float(-k0 / (omega0 * em0) * w3[i0]),
        w2_imag_left0=float(-dl[-1] / (omega0 * em0)),
    )


def compute_mode(profile: DielectricProfile, omega0: float, grid: Grid1D,
                 **kwargs) -> InterfaceMode:
    """Best localized mode; raises LookupError if there is none."""
    cands = solve_dispersion(profile, omega0, grid, **kwargs)
    if not cands:
        raise LookupError(f"no localized mode for profile {profile.name!r} at omega={omega0}")
    best = cands[0]
    return reconstruct_mode(best.w3, profile, omega0, best.k0, grid)


def _extrapolate(values: np.ndarray, i0: int, side: int) -> float:
    # linear extrapolation to x1 = 0 from the two nearest nodes strictly on one side
    a, b = values[i0 + side], values[i0 + 2 * side]
    return float(2 * a - b)


def operator_residual(mode: InterfaceMode, profile: DielectricProfile,
                      k: float | None = None) -> float:
    """Discrete L2 norm of L(k, omega) w with w2 = i * w2_imag, per side."""
    k = mode.k0 if k is None else k
    om = mode.omega0
    h = mode.spacing
    i0 = mode.interface_index
    eps = profile.eps1(mode.x)
    r1 = eps * om * mode.w1 + k * mode.w3
    dl3, dr3 = _one_sided_gradient(mode.w3, h, i0)
    dw3 = np.concatenate([dl3[:-1], dr3])
    # second row divided by i: eps omega w2_imag + w3'
    r2 = eps * om * mode.w2_imag + dw3
    w2l, w2r = mode.sides(mode.w2_imag, mode.w2_imag_left0)
    dl2 = np.gradient(w2l, h, edge_order=2)
    dr2 = np.gradient(w2r, h, edge_order=2)
    dw2 = np.concatenate([dl2[:-1], dr2])
    r3 = k * mode.w1 - dw2 + om * mode.w3
    total = r1**2 + r2**2 + r3**2
    return float(np.sqrt(h * total.sum()))


def _left_decay_rate(x: np.ndarray, amp: np.ndarray, window: tuple[float, float]) -> float:
    # contiguous stretch left of the interface where window[0] < amp < window[1]
    below_top = np.nonzero(amp[::-1] < window[1])[0]
    if len(below_top) == 0:
        return 0.0
    start = len(amp) - 1 - below_top[0]
    stop = start
    while stop > 0 and amp[stop - 1] > window[0] and amp[stop - 1] < window[1]:
        stop -= 1
    if start - stop < 2:
        return 0.0
    sel = slice(stop, start + 1)
    return float(np.polyfit(x[sel], np.log(amp[sel]), 1)[0])


def verify_mode(mode: InterfaceMode, profile: DielectricProfile,
                fit_window: tuple[float, float] = (1e-8, 1e-2)) -> dict:
    """Interface jumps, decay and residual diagnostics of a mode."""
    i0 = mode.interface_index
    x = mode.x
    h = mode.spacing
    eps = profile.eps1(x)
    peak = float(np.max(np.abs(mode.w3)))
    scale = peak if peak > 0 else 1.0
    e1w1 = eps * mode.w1
    jump_e1w1 = _extrapolate(e1w1, i0, +1) - _extrapolate(e1w1, i0, -1)
    jump_w2 = _extrapolate(mode.w2_imag, i0, +1) - _extrapolate(mode.w2_imag, i0, -1)
    jump_w3 = _extrapolate(mode.w3, i0, +1) - _extrapolate(mode.w3, i0, -1)

    slope = _left_decay_rate(x[: i0 + 1], np.abs(mode.w3[: i0 + 1]) / scale, fit_window)
    k = max(2, int(0.1 * len(x)))
    right_tail = float(np.abs(mode.w3[-k:]).max() / scale) if peak > 0 else 0.0

    dl, dr = _one_sided_gradient(e1w1, h, i0)
    # (eps1 w1)' - eps1 k w2_imag = 0 away from the interface
    d_e1w1 = np.concatenate([dl[:-1], dr])
    div = d_e1w1 - eps * mode.k0 * mode.w2_imag
    div[i0] = 0.0
    return {
        "jump_eps1w1": abs(jump_e1w1) / scale,
        "jump_w2": abs(jump_w2) / scale,
        "jump_w3": abs(jump_w3) / scale,
        "left_decay_rate": float(slope),
        "right_decay_tail": right_tail,
        "residual_L": operator_residual(mode, profile),
        "divergence_residual": float(np.sqrt(h * np.sum(div**2))),
    }
