"""Element-loop kernels with a numba and a pure-numpy implementation.

The backend is chosen once at import time from ``QUASITRANS_BACKEND``
(``numba`` or ``numpy``).  When unset, numba is used if it imports.
Both paths must return identical arrays up to rounding; the test suite
runs every kernel through both.
"""

import os

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _requested_backend():
    name = os.environ.get("QUASITRANS_BACKEND", "").strip().lower()
    if name in ("", "auto"):
        return "numba" if HAS_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"QUASITRANS_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ImportError("QUASITRANS_BACKEND=numba but numba is not installed")
    return name


BACKEND = _requested_backend()


# ---------------------------------------------------------------- numpy path

def np_p1_gradients(nodes, tris):
    """Hat-function gradients (T, 3, 2) and triangle areas (T,)."""
    p = nodes[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
    g0 = -g1 - g2
    return np.stack([g0, g1, g2], axis=1), 0.5 * np.abs(det)


def np_element_stiffness(grads, areas, coeff):
    return np.einsum("t,tik,tjk->tij", areas * coeff, grads, grads)


def np_scatter(tris, values, n):
    return np.bincount(tris.ravel(), weights=values.ravel(), minlength=n)


def np_kerr_flux(u1, u2, eps3):
    s = eps3 * (u1 * u1 + u2 * u2)
    return s * u1, s * u2


def np_kerr_increment(a1, a2, d1, d2, eps3):
    """eps3 (|a+d|^2 (a+d) - |a|^2 a) without cancellation for small d."""
    b1 = a1 + d1
    b2 = a2 + d2
    nb = b1 * b1 + b2 * b2
    cross = 2 * (a1 * d1 + a2 * d2) + d1 * d1 + d2 * d2
    return eps3 * (nb * d1 + cross * a1), eps3 * (nb * d2 + cross * a2)


def np_flux_load(tris, grads, areas, f1, f2, n):
    """-sum_T area * mean_q(f) . grad(eta_j) with f given at 3 points per triangle."""
    m1 = f1.mean(axis=1)
    m2 = f2.mean(axis=1)
    vals = -(areas[:, None]) * (grads[:, :, 0] * m1[:, None] + grads[:, :, 1] * m2[:, None])
    return np_scatter(tris, vals, n)


def np_source_load(tris, areas, f, n):
    """int f eta_j with f at the edge midpoints (01, 12, 20) of every triangle."""
    w = areas[:, None] / 6.0
    vals = np.stack([f[:, 0] + f[:, 2], f[:, 0] + f[:, 1], f[:, 1] + f[:, 2]], axis=1) * w
    return np_scatter(tris, vals, n)


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:
    @numba.njit(cache=True)
    def nb_p1_gradients(nodes, tris):
        t = tris.shape[0]
        grads = np.empty((t, 3, 2))
        areas = np.empty(t)
        for e in range(t):
            x0 = nodes[tris[e, 0], 0]
            y0 = nodes[tris[e, 0], 1]
            d1x = nodes[tris[e, 1], 0] - x0
            d1y = nodes[tris[e, 1], 1] - y0
            d2x = nodes[tris[e, 2], 0] - x0
            d2y = nodes[tris[e, 2], 1] - y0
            det = d1x * d2y - d1y * d2x
            grads[e, 1, 0] = d2y / det
            grads[e, 1, 1] = -d2x / det
            grads[e, 2, 0] = -d1y / det
            grads[e, 2, 1] = d1x / det
            grads[e, 0, 0] = -grads[e, 1, 0] - grads[e, 2, 0]
            grads[e, 0, 1] = -grads[e, 1, 1] - grads[e, 2, 1]
            areas[e] = 0.5 * abs(det)
        return grads, areas

    @numba.njit(cache=True)
    def nb_element_stiffness(grads, areas, coeff):
        t = grads.shape[0]
        out = np.empty((t, 3, 3))
        for e in range(t):
            w = areas[e] * coeff[e]
            for i in range(3):
                for j in range(3):
                    out[e, i, j] = w * (grads[e, i, 0] * grads[e, j, 0]
                                        + grads[e, i, 1] * grads[e, j, 1])
        return out

    @numba.njit(cache=True)
    def nb_scatter(tris, values, n):
        out = np.zeros(n)
        for e in range(tris.shape[0]):
            for i in range(3):
                out[tris[e, i]] += values[e, i]
        return out

    @numba.njit(cache=True)
    def nb_kerr_flux(u1, u2, eps3):
        q1 = np.empty_like(u1)
        q2 = np.empty_like(u2)
        a = u1.ravel()
        b = u2.ravel()
        c = eps3.ravel()
        r1 = q1.ravel()
        r2 = q2.ravel()
        for k in range(a.size):
            s = c[k] * (a[k] * a[k] + b[k] * b[k])
            r1[k] = s * a[k]
            r2[k] = s * b[k]
        return q1, q2

    @numba.njit(cache=True)
    def nb_kerr_increment(a1, a2, d1, d2, eps3):
        q1 = np.empty_like(a1)
        q2 = np.empty_like(a2)
        x1 = a1.ravel()
        x2 = a2.ravel()
        y1 = d1.ravel()
        y2 = d2.ravel()
        c = eps3.ravel()
        r1 = q1.ravel()
        r2 = q2.ravel()
        for k in range(x1.size):
            b1 = x1[k] + y1[k]
            b2 = x2[k] + y2[k]
            nb = b1 * b1 + b2 * b2
            cross = 2.0 * (x1[k] * y1[k] + x2[k] * y2[k]) + y1[k] * y1[k] + y2[k] * y2[k]
            r1[k] = c[k] * (nb * y1[k] + cross * x1[k])
            r2[k] = c[k] * (nb * y2[k] + cross * x2[k])
        return q1, q2

    @numba.njit(cache=True)
    def nb_flux_load(tris, grads, areas, f1, f2, n):
        out = np.zeros(n)
        for e in range(tris.shape[0]):
            m1 = (f1[e, 0] + f1[e, 1] + f1[e, 2]) / 3.0
            m2 = (f2[e, 0] + f2[e, 1] + f2[e, 2]) / 3.0
            for i in range(3):
                out[tris[e, i]] -= areas[e] * (grads[e, i, 0] * m1 + grads[e, i, 1] * m2)
        return out

    @numba.njit(cache=True)
    def nb_source_load(tris, areas, f, n):
        out = np.zeros(n)
        for e in range(tris.shape[0]):
            w = areas[e] / 6.0
            out[tris[e, 0]] += w * (f[e, 0] + f[e, 2])
            out[tris[e, 1]] += w * (f[e, 0] + f[e, 1])
            out[tris[e, 2]] += w * (f[e, 1] + f[e, 2])
        return out


NUMPY_KERNELS = {
    "p1_gradients": np_p1_gradients,
    "element_stiffness": np_element_stiffness,
    "scatter": np_scatter,
    "kerr_flux": np_kerr_flux,
    "kerr_increment": np_kerr_increment,
    "flux_load": np_flux_load,
    "source_load": np_source_load,
}

NUMBA_KERNELS = {
    "p1_gradients": nb_p1_gradients,
    "element_stiffness": nb_element_stiffness,
    "scatter": nb_scatter,
    "kerr_flux": nb_kerr_flux,
    "kerr_increment": nb_kerr_increment,
    "flux_load": nb_flux_load,
    "source_load": nb_source_load,
} if HAS_NUMBA else {}


def kernels(backend=None):
    """Kernel table for ``backend`` (defaults to the import-time choice)."""
    backend = backend or BACKEND
    return NUMBA_KERNELS if backend == "numba" else NUMPY_KERNELS


_active = kernels()
p1_gradients = _active["p1_gradients"]
element_stiffness = _active["element_stiffness"]
scatter = _active["scatter"]
kerr_flux = _active["kerr_flux"]
kerr_increment = _active["kerr_increment"]
flux_load = _active["flux_load"]
source_load = _active["source_load"]
