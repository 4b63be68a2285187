"""Real-valued wavepacket ansatz U0 and its divergence residual b.

For a mode (w1, i*w2, w3) and an envelope A,

    U0_1 = 2 eps A(eps x2) w1(x1) cos(k0 x2)
    U0_2 = -2 eps A(eps x2) w2(x1) sin(k0 x2)
    b    = -2 eps^2 eps1(x1) A'(eps x2) w2(x1) sin(k0 x2)

where w2 denotes the real samples ``mode.w2_imag``.  The O(eps) part of
div(eps1 U0) vanishes identically because the mode satisfies
(eps1 w1)' - eps1 k0 w2 = 0, so b is evaluated from the reduced formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .errors import AccuracyError
from .mode_solver import DielectricProfile, InterfaceMode

GAMMA = 0.25


@dataclass(frozen=True)
class Envelope:
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    # |y| beyond which value and derivative are negligible
    support: float

    @classmethod
    def gaussian(cls, coefficient: float = 5e6) -> "Envelope":
        """A(y) = exp(-coefficient * y^2)."""
        c = float(coefficient)
        if c < 0:
            raise ValueError("gaussian coefficient must be non-negative")
        if c == 0:
            return cls.constant(1.0)
        return cls(
            value=lambda y: np.exp(-c * np.asarray(y, float) ** 2),
            derivative=lambda y: -2 * c * np.asarray(y, float) * np.exp(-c * np.asarray(y, float) ** 2),
            support=float(np.sqrt(45.0 / c)),
        )

    @classmethod
    def constant(cls, level: float = 0.0) -> "Envelope":
        return cls(
            value=lambda y: np.full_like(np.asarray(y, float), level),
            derivative=lambda y: np.zeros_like(np.asarray(y, float)),
            support=np.inf if level else 0.0,
        )


def _side_splines(mode: InterfaceMode, values: np.ndarray, left0: float | None):
    left, right = mode.sides(values, left0)
    i0 = mode.interface_index
    return (CubicSpline(mode.x[: i0 + 1], left, extrapolate=False),
            CubicSpline(mode.x[i0:], right, extrapolate=False))


def _eval_sides(splines, x1: np.ndarray, side: str | None = None) -> np.ndarray:
    left, right = splines
    if side == "minus":
        out = left(x1)
    elif side == "plus":
        out = right(x1)
    elif side is None:
        out = np.where(x1 < 0, left(x1), right(x1))
    else:
        raise ValueError(f"side must be 'minus', 'plus' or None, got {side!r}")
    return np.nan_to_num(out, nan=0.0)


@dataclass(frozen=True)
class AnsatzField:
    """U0 and b for a given mode, envelope and asymptotic parameter eps.

    Mode components are interpolated by cubic splines on each side of the
    interface separately; outside the mode grid they are taken as zero.
    """

    mode: InterfaceMode
    envelope: Envelope
    eps: float
    profile: DielectricProfile
    _w1: tuple = field(init=False, repr=False, compare=False)
    _w2: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        object.__setattr__(self, "_w1", _side_splines(self.mode, self.mode.w1, self.mode.w1_left0))
        object.__setattr__(self, "_w2", _side_splines(self.mode, self.mode.w2_imag,
                                                      self.mode.w2_imag_left0))

    @property
    def k0(self) -> float:
        return self.mode.k0

    # ``side`` pins evaluation to one half plane so that points on x1 = 0
    # get the one-sided limit; by default x1 = 0 reads the plus side.

    def w1(self, x1, side: str | None = None) -> np.ndarray:
        return _eval_sides(self._w1, np.asarray(x1, float), side)

    def w2(self, x1, side: str | None = None) -> np.ndarray:
        return _eval_sides(self._w2, np.asarray(x1, float), side)

    def eps1(self, x1, side: str | None = None) -> np.ndarray:
        x1 = np.asarray(x1, float)
        if side is None:
            return self.profile.eps1(x1)
        fn = self.profile.eps1_minus if side == "minus" else self.profile.eps1_plus
        return np.asarray(fn(x1), float) * np.ones_like(x1)

    def eval_U0(self, x1, x2, side: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        amp = 2 * self.eps * self.envelope.value(self.eps * x2)
        u1 = amp * self.w1(x1, side) * np.cos(self.k0 * x2)
        u2 = -amp * self.w2(x1, side) * np.sin(self.k0 * x2)
        return u1, u2

    def eval_b(self, x1, x2, side: str | None = None) -> np.ndarray:
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        amp = -2 * self.eps**2 * self.envelope.derivative(self.eps * x2)
        return amp * self.eps1(x1, side) * self.w2(x1, side) * np.sin(self.k0 * x2)


def _x1_integral(mode: InterfaceMode, left: np.ndarray, right: np.ndarray) -> float:
    i0 = mode.interface_index
    return float(simpson(left, x=mode.x[: i0 + 1]) + simpson(right, x=mode.x[i0:]))


def _x2_nodes(k0: float, half_width: float, order: int):
    """Gauss-Legendre nodes on sub-intervals of the half periods of sin(k0 x2).

    Zeros of the carrier are always interval edges so |sin| is smooth on
    every panel; panels are at most half_width / 40 long.
    """
    period = np.pi / k0
    m = int(np.ceil(half_width / period))
    nsub = max(1, int(np.ceil(40 * period / half_width)))
    edges = np.arange(-m * nsub, m * nsub + 1) * (period / nsub)
    t, w = np.polynomial.legendre.leggauss(order)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * period / nsub
    nodes = (mid[:, None] + half * t[None, :]).ravel()
    weights = np.tile(half * w, len(mid))
    return nodes, weights


def _norms_once(field: AnsatzField, half_width: float, order: int, x1_stride: int) -> dict:
    mode = field.mode
    eps, k0 = field.eps, field.k0
    w1l, w1r = mode.sides(mode.w1, mode.w1_left0)
    w2l, w2r = mode.sides(mode.w2_imag, mode.w2_imag_left0)
    i0 = mode.interface_index
    e1 = field.profile.eps1(mode.x)
    e1l = e1[: i0 + 1].copy()
    e1l[-1] = field.profile.eps1_at_interface[0]
    e1r = e1[i0:]

    def x1int(fl, fr):
        return _x1_integral(mode, fl, fr)

    y, wy = _x2_nodes(k0, half_width, order)
    A = field.envelope.value(eps * y)
    dA = field.envelope.derivative(eps * y)
    c, s = np.cos(k0 * y), np.sin(k0 * y)

    def x2int(f):
        return float(wy @ f)

    l2 = 4 * eps**2 * (x1int(w1l**2, w1r**2) * x2int(A**2 * c**2)
                       + x1int(w2l**2, w2r**2) * x2int(A**2 * s**2))
    l4 = 16 * eps**4 * (x1int(w1l**4, w1r**4) * x2int(A**4 * c**4)
                        + 2 * x1int(w1l**2 * w2l**2, w1r**2 * w2r**2) * x2int(A**4 * c**2 * s**2)
                        + x1int(w2l**4, w2r**4) * x2int(A**4 * s**4))
    bl2 = 4 * eps**4 * x1int((e1l * w2l) ** 2, (e1r * w2r) ** 2) * x2int(dA**2 * s**2)

    # the log weight couples x1 and x2, so this one is a genuine 2D sum
    gl = np.abs(e1l * w2l)[::-1][::x1_stride][::-1]
    gr = np.abs(e1r * w2r)[::x1_stride]
    xl = mode.x[: i0 + 1][::-1][::x1_stride][::-1]
    xr = mode.x[i0:][::x1_stride]
    keep = np.abs(dA) > 0
    y, g2 = y[keep], (wy * np.abs(dA * s))[keep]
    total = 0.0
    for xs, gs in ((xl, gl), (xr, gr)):
        inner = np.empty(len(xs))
        for lo in range(0, len(xs), 256):
            blk = xs[lo:lo + 256]
            inner[lo:lo + 256] = np.log(2 + np.hypot(blk[:, None], y[None, :])) @ g2
        total += float(simpson(gs * inner, x=xs))
    bl1log = 2 * eps**2 * total
    return {"U0_L2": np.sqrt(l2), "U0_L4": l4 ** 0.25, "b_L2": np.sqrt(bl2), "b_L1log": bl1log}


def norms(field: AnsatzField, half_width: float | None = None, order: int = 12,
          x1_stride: int | None = None, rtol: float = 1e-4) -> dict:
    """L2, L4 norms of U0 and L2, L1(log) norms of b over the plane.

    The x1 integration uses the mode grid; x2 is integrated by Gauss-Legendre
    on each half period of the carrier over the envelope support stretched
    by 1/eps.  The computation is repeated at half the resolution and an
    AccuracyError is raised if any norm differs by more than ``rtol``
    relative.
    """
    if half_width is None:
        half_width = field.envelope.support / field.eps
    if not np.isfinite(half_width):
        raise ValueError("envelope has unbounded support; pass half_width")
    if half_width == 0:
        return {"U0_L2": 0.0, "U0_L4": 0.0, "b_L2": 0.0, "b_L1log": 0.0}
    if x1_stride is None:
        x1_stride = max(1, int(round(0.01 / field.mode.spacing)))
    fine = _norms_once(field, half_width, order, x1_stride)
    coarse = _norms_once(field, half_width, order // 2, 2 * x1_stride)
    for key, val in fine.items():
        if val != 0 and abs(val - coarse[key]) > rtol * abs(val):
            raise AccuracyError(
                f"quadrature self-check failed for {key}: {val:.6e} vs {coarse[key]:.6e}"
            )
    return {k: float(v) for k, v in fine.items()}


def fit_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
