#!/usr/bin/env python3
"""Wall time of the light-cone windowed force path against the full memory sum.

The two paths must agree to the last bit; the windowed one visits only the
O(eps/dt) history nodes inside the kernel shell.
"""

import argparse
import time

import numpy as np

from vmmf.dynamics import PhaseEnsemble, integrate
from vmmf.kernels import build_kernel_tables, build_mollifier


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, nargs="+", default=[16, 64, 128])
    ap.add_argument("--dt", type=float, default=0.025)
    ap.add_argument("--t-end", type=float, default=1.0)
    a = ap.parse_args()
    k = build_kernel_tables(build_mollifier(0.2), a.t_end)
    steps = int(round(a.t_end / a.dt))
    integrate(PhaseEnsemble.standard_cloud(2, 0), k, a.dt, 2, windowed=False)  # JIT warm-up
    print(f"{'N':>5} {'windowed s':>11} {'brute s':>9} {'speedup':>8} {'max diff':>9}")
    for n in a.n:
        ens = PhaseEnsemble.standard_cloud(n, 0)
        t0 = time.perf_counter()
        w = integrate(ens, k, a.dt, steps, windowed=True)
        t1 = time.perf_counter()
        b = integrate(ens, k, a.dt, steps, windowed=False)
        t2 = time.perf_counter()
        diff = max(np.abs(w.x - b.x).max(), np.abs(w.xi - b.xi).max())
        print(f"{n:5d} {t1 - t0:11.2f} {t2 - t1:9.2f} {(t2 - t1) / (t1 - t0):8.1f} "
              f"{diff:9.1e}")


if __name__ == "__main__":
    main()
