"""Mean-field flow on a weighted sample of the initial density.

Two solvers: the RK4 delay integrator of :mod:`vmmf.dynamics` with weights
in the force sums, and a Picard iteration on whole trajectories that
integrates the characteristic equations with a fixed quadrature instead
of a time stepper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _jit
from .dynamics import PhaseEnsemble, SimConfig, TrajectoryHistory, integrate, velocity
from .kernels import RadialKernel


@dataclass
class FlowSolution:
    times: np.ndarray
    x: np.ndarray  # (N, K, 3)
    xi: np.ndarray
    weights: np.ndarray
    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = True
    history: TrajectoryHistory | None = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def ensemble(self, k: int = -1) -> PhaseEnsemble:
        return PhaseEnsemble(self.x[:, k], self.xi[:, k], self.weights.copy())

    def ensemble_at(self, t: float) -> PhaseEnsemble:
        k = int(round(t / self.dt)) if self.dt else 0
        if abs(k * self.dt - t) > 1e-9 or not 0 <= k < self.times.size:
            raise ValueError(f"t={t} is not a node of the solution grid")
        return self.ensemble(k)

    def to_history(self) -> TrajectoryHistory:
        if self.history is not None:
            return self.history
        K = self.times.size
        return TrajectoryHistory(self.dt, self.weights.copy(), self.x.copy(),
                                 self.xi.copy(), np.zeros_like(self.x), K - 1, 0)


def _check_weights(initial: PhaseEnsemble):
    if initial.n == 0:
        raise ValueError("empty ensemble")
    if abs(initial.weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must sum to 1")


def reference_flow(initial: PhaseEnsemble, kernel: RadialKernel,
                   config: SimConfig) -> FlowSolution:
    """Weighted mean-field characteristics by the RK4 delay integrator."""
    _check_weights(initial)
    cfg = SimConfig(**{**config.__dict__, "n_particles": initial.n,
                       "self_interaction": True})
    cfg.validate(kernel)
    hist = integrate(initial, kernel, cfg.dt, cfg.n_steps, True,
                     cfg.force_path == "windowed")
    K = hist.n_nodes
    return FlowSolution(hist.times, hist.x[:, :K], hist.xi[:, :K], initial.weights.copy(),
                        history=hist)


def cumulative_weights(K: int) -> np.ndarray:
    """Row k: weights (in units of dt) of nodes 0..K-1 for the integral over [0, t_k].

    Uses Gregory-type rules of order >= 4 on [0, t_k]; the first interval
    borrows nodes 2 and 3 (a cubic through nodes 0..3) when they exist.
    """
    W = np.zeros((K, K))
    for k in range(1, K):
        if k == 1 and K >= 4:
            W[1, :4] = np.array([9.0, 19.0, -5.0, 1.0]) / 24.0
            continue
        for j in range(k + 1):
            W[k, j] = _gregory(j, k)
    return W


def _gregory(k, n):
    return _jit.gregory.py_func(k, n)


def _node_forces(kernel, X, V, w, dt, windowed):
    N, K, _ = X.shape
    F = np.zeros_like(X)
    skip = np.full(N, -1, dtype=np.int64)
    empty = np.zeros((N, 2, 3))
    x0 = np.ascontiguousarray(X[:, 0])
    for k in range(K):
        F[:, k] = _jit.forces(kernel.prof, kernel.meta, k * dt, dt, k, 0.0, X, V,
                              empty, empty, x0, w, np.ascontiguousarray(X[:, k]),
                              np.ascontiguousarray(V[:, k]), skip, windowed)
    return F


def picard_solve(initial: PhaseEnsemble, kernel: RadialKernel, config: SimConfig,
                 max_iter: int = 60, tol: float = 1e-12) -> FlowSolution:
    """Fixed point of Z <- z + int_0^t K(Z)(s, Z(s)) ds on the node grid.

    The first iterate is free streaming (x + t v(xi), xi).  Forces at each
    node use the memory rule of the RK4 solver on the current iterate;
    the time integral uses `cumulative_weights`.
    """
    _check_weights(initial)
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    dt = config.dt
    K = config.n_steps + 1
    times = np.arange(K) * dt
    windowed = config.force_path == "windowed"
    x0, p0 = initial.x, initial.xi
    X = x0[:, None, :] + times[None, :, None] * velocity(p0)[:, None, :]
    P = np.repeat(p0[:, None, :], K, axis=1)
    W = cumulative_weights(K) * dt
    residuals = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        V = velocity(P)
        F = _node_forces(kernel, X, V, initial.weights, dt, windowed)
        Xn = x0[:, None, :] + np.einsum("kj,njd->nkd", W, V)
        Pn = p0[:, None, :] + np.einsum("kj,njd->nkd", W, F)
        res = float(np.sqrt(np.sum((Xn - X) ** 2 + (Pn - P) ** 2, axis=2)).max())
        X, P = Xn, Pn
        residuals.append(res)
        if res <= tol:
            converged = True
            break
    return FlowSolution(times, X, P, initial.weights.copy(), it, residuals, converged)


def contraction_threshold(residuals, c_max: float = 0.9) -> int | None:
    """First index n0 from which r_{n+1} <= c_max r_n holds until the end
    (ignoring residuals already at rounding level)."""
    r = np.asarray(residuals, dtype=float)
    floor = 1e-14
    for n0 in range(len(r) - 1):
        ok = True
        for n in range(n0, len(r) - 1):
            if r[n] <= floor:
                break
            if r[n + 1] > c_max * r[n]:
                ok = False
                break
        if ok:
            return n0
    return None
