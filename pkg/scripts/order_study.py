#!/usr/bin/env python3
"""Observed convergence orders of the time discretization.

Two ladders at eps = 0.2, halving dt from eps/4:
  * memory quadrature: force on frozen charges vs the exact Coulomb force
  * RK4 integrator: terminal-state self-convergence of a 16-particle cloud
"""

import argparse
import math

import numpy as np

from vmmf.dynamics import PhaseEnsemble, SimConfig, TrajectoryHistory, force_on_particle
from vmmf.dynamics import integrate
from vmmf.kernels import build_kernel_tables, build_mollifier


def frozen(x, dt):
    steps = int(round(1.0 / dt))
    K = steps + 1
    N = len(x)
    return TrajectoryHistory(dt, np.full(N, 1 / N), np.repeat(x[:, None], K, 1),
                             np.zeros((N, K, 3)), np.zeros((N, K, 3)), steps, K)


def coulomb(x, i):
    d = x[i] - np.delete(x, i, axis=0)
    return (d / (4 * np.pi * np.linalg.norm(d, axis=1, keepdims=True) ** 3)).sum(0) / len(x)


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epsilon", type=float, default=0.2)
    ap.add_argument("--levels", type=int, default=4)
    a = ap.parse_args()
    eps = a.epsilon
    k = build_kernel_tables(build_mollifier(eps), 1.0)
    dts = [eps / 4 / 2**j for j in range(a.levels)]

    x = np.array([[-0.3, 0.0, 0.0], [0.3, 0.1, 0.0], [0.0, 0.5, 0.2]])
    print("memory quadrature (frozen charges, t = 1)")
    prev = None
    for dt in dts:
        h = frozen(x, dt)
        cfg = SimConfig(epsilon=eps, dt=dt, n_particles=3)
        err = max(np.abs(force_on_particle(i, 1.0, h, k, cfg) - coulomb(x, i)).max()
                  for i in range(3))
        order = "" if prev is None else f"  order {math.log2(prev / err):.2f}"
        print(f"  dt = eps/{eps / dt:4.0f}  error {err:.3e}{order}")
        prev = err

    print("RK4 self-convergence (N = 16, T = 1)")
    ens = PhaseEnsemble.standard_cloud(16, 3)
    runs = [integrate(ens, k, dt, int(round(1 / dt))) for dt in dts]
    diffs = [np.abs(runs[j].x[:, -1] - runs[j + 1].x[:, -1]).max()
             + np.abs(runs[j].xi[:, -1] - runs[j + 1].xi[:, -1]).max()
             for j in range(len(runs) - 1)]
    for j, d in enumerate(diffs):
        order = "" if j == 0 else f"  order {math.log2(diffs[j - 1] / d):.2f}"
        print(f"  |Z(eps/{eps / dts[j]:.0f}) - Z(eps/{eps / dts[j + 1]:.0f})| = {d:.3e}{order}")


if __name__ == "__main__":
    main()
