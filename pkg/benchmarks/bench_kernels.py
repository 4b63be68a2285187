"""Time the element kernels under both backends.

    python benchmarks/bench_kernels.py [--h 0.02] [--repeat 5]

Runs every kernel on one side of the default [-6, 0] x [-6, 6] mesh and
prints best-of-N wall times and the numpy/numba ratio.  numba timings
exclude the first (compiling) call.
"""

import argparse
import timeit

import numpy as np

from quasitrans import _kernels as K
from quasitrans.fem_core import build_mesh


def cases(h):
    mesh = build_mesh((-6.0, 0.0, -6.0, 6.0), (0.0, 6.0, -6.0, 6.0), h)
    s = mesh.minus
    rng = np.random.default_rng(0)
    t = s.n_tris
    coeff = rng.uniform(1, 2, t)
    f1, f2, f = (rng.normal(size=(t, 3)) for _ in range(3))
    d1, d2 = 1e-3 * f1, 1e-3 * f2
    e3 = np.ones((t, 3))
    return s, {
        "p1_gradients": (s.nodes, s.tris),
        "element_stiffness": (s.grads, s.areas, coeff),
        "scatter": (s.tris, f, s.n_nodes),
        "kerr_flux": (f1, f2, e3),
        "kerr_increment": (f1, f2, d1, d2, e3),
        "flux_load": (s.tris, s.grads, s.areas, f1, f2, s.n_nodes),
        "source_load": (s.tris, s.areas, f, s.n_nodes),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--h", type=float, default=0.02)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    side, table = cases(args.h)
    print(f"{side.n_tris} triangles, {side.n_nodes} nodes")
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'ratio':>7}")
    for name, call_args in table.items():
        np_fn = K.NUMPY_KERNELS[name]
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeat))
        if K.HAS_NUMBA:
            nb_fn = K.NUMBA_KERNELS[name]
            nb_fn(*call_args)
            t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=1, repeat=args.repeat))
            print(f"{name:<18} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}")
        else:
            print(f"{name:<18} {1e3 * t_np:>10.2f} {'-':>10} {'-':>7}")


if __name__ == "__main__":
    main()
