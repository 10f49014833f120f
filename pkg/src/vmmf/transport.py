"""Truncated-cost optimal transport between weighted phase ensembles."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .dynamics import PhaseEnsemble, velocity

# POT probes every installed array backend on import; none are needed here.
for _b in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_b}", "1")
import ot  # noqa: E402

DEFAULT_BUDGET = 1024


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float
    row_residual: float
    col_residual: float
    mode: str = "exact"
    u: np.ndarray | None = None  # dual potentials, u_i + v_j <= C_ij
    v: np.ndarray | None = None
    gap: float = 0.0
    lower: float | None = None

    def slackness_violation(self, C: np.ndarray) -> float:
        """Max of dual infeasibility and slackness on the support of the plan."""
        if self.u is None:
            raise ValueError("plan carries no dual potentials")
        R = self.u[:, None] + self.v[None, :] - C
        on = self.coupling > 0
        return float(max(R.max(initial=0.0), np.abs(R[on]).max(initial=0.0)))


def truncated_cost(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, cdist(za, zb))


def _points(mu, use: str):
    if use == "phase":
        return mu.z
    if use == "position":
        return mu.x
    raise ValueError(use)


def _residuals(P, a, b):
    return float(np.abs(P.sum(1) - a).max()), float(np.abs(P.sum(0) - b).max())


def _exact(a, b, C, duals):
    n, m = C.shape
    uniform = n == m and np.all(a == a[0]) and np.all(b == b[0])
    if uniform and not duals:
        rows, cols = linear_sum_assignment(C)
        P = np.zeros_like(C)
        P[rows, cols] = 1.0 / n
        cost = min(float(C[rows, cols].sum() / n), 1.0)
        return TransportPlan(P, cost, *_residuals(P, a, b), mode="exact")
    P, log = ot.emd(a, b, C, numItermax=50_000_000, log=True)
    if log.get("warning"):
        raise RuntimeError(f"network simplex did not finish: {log['warning']}")
    cost = min(float(np.sum(P * C)), 1.0)  # C <= 1; drop summation round-off
    return TransportPlan(P, cost, *_residuals(P, a, b), mode="exact",
                         u=np.asarray(log["u"]), v=np.asarray(log["v"]))


def sinkhorn(a, b, C, reg: float = 1e-3, inner_iter: int = 1000, tol: float = 1e-6):
    """Entropic plan by POT's epsilon-scaling Sinkhorn, with certified bounds.

    Returns (plan, upper, lower, g): the plan is rounded onto the exact
    marginals, so its cost is an upper bound; the c-transform of the column
    potential g gives a lower bound.
    """
    with warnings.catch_warnings():
        # early annealing stages may stop short; only the final marginals matter
        warnings.simplefilter("ignore", UserWarning)
        P, log = ot.bregman.sinkhorn_epsilon_scaling(a, b, C, reg, numItermax=1000,
                                                     numInnerItermax=inner_iter,
                                                     stopThr=tol, log=True)
    err = max(np.abs(P.sum(1) - a).max(), np.abs(P.sum(0) - b).max())
    if not np.all(np.isfinite(P)) or err > 10 * tol:
        raise RuntimeError(f"entropic solver did not converge (marginal error {err:.2e})")
    P = _round(P, a, b)
    upper = min(float(np.sum(P * C)), 1.0)
    g = np.asarray(log["beta"], dtype=float)
    fc = (C - g[None, :]).min(axis=1)
    lower = float(a @ fc + b @ g)
    return P, upper, lower, g


def _round(P, a, b):
    """Project a near-feasible plan onto the transport polytope."""
    x = np.minimum(a / np.maximum(P.sum(1), 1e-300), 1.0)
    P = P * x[:, None]
    y = np.minimum(b / np.maximum(P.sum(0), 1e-300), 1.0)
    P = P * y[None, :]
    ea = a - P.sum(1)
    eb = b - P.sum(0)
    if ea.sum() > 0:
        P = P + np.outer(ea, eb) / ea.sum()
    return P


def mkr_distance(mu: PhaseEnsemble, nu: PhaseEnsemble, mode: str = "exact",
                 budget: int = DEFAULT_BUDGET, duals: bool = False, use: str = "phase",
                 reg: float = 1e-3):
    """MKR distance with cost 1 ^ |z - z'| (Euclidean in R^6 by default)."""
    for e in (mu, nu):
        if e.n == 0 or abs(e.weights.sum() - 1.0) > 1e-12:
            raise ValueError("both ensembles must be nonempty and normalized")
    C = truncated_cost(_points(mu, use), _points(nu, use))
    a, b = mu.weights, nu.weights
    if mode == "exact":
        if mu.n + nu.n > budget:
            raise ValueError(f"{mu.n + nu.n} atoms exceed the exact-mode budget {budget}")
        plan = _exact(a, b, C, duals)
        return plan.cost, plan
    if mode == "entropic":
        P, upper, lower, _ = sinkhorn(a, b, C, reg=reg)
        plan = TransportPlan(P, upper, *_residuals(P, a, b), mode="entropic",
                             gap=upper - lower, lower=lower)
        return upper, plan
    raise ValueError(f"unknown mode {mode!r}")


def sample_test_fields(n_fields: int = 512, seed: int = 0, k_max: float = 8.0):
    """Random vector fields e cos(k.x + phase)/max(1,|k|); each has sup norm
    and Lipschitz constant at most 1."""
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n_fields, 3))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    k = rng.standard_normal((n_fields, 3))
    k *= (k_max * rng.random(n_fields) / np.linalg.norm(k, axis=1))[:, None]
    phase = rng.uniform(0, 2 * np.pi, n_fields)
    scale = 1.0 / np.maximum(1.0, np.linalg.norm(k, axis=1))
    return e, k, phase, scale


def current_pairing(ens: PhaseEnsemble, fields) -> np.ndarray:
    """int j . psi for each sampled test field psi."""
    e, k, phase, scale = fields
    v = velocity(ens.xi)
    c = np.cos(ens.x @ k.T + phase[None, :]) * scale[None, :]
    return np.einsum("n,nf,nf->f", ens.weights, v @ e.T, c)


def marginal_distance(mu: PhaseEnsemble, nu: PhaseEnsemble, n_fields: int = 512,
                      seed: int = 0, budget: int = DEFAULT_BUDGET):
    """(MKR distance of position marginals, sampled dual bound on the current gap)."""
    pos, _ = mkr_distance(mu, nu, use="position", budget=budget)
    fl = sample_test_fields(n_fields, seed)
    gap = float(np.abs(current_pairing(mu, fl) - current_pairing(nu, fl)).max())
    return pos, gap


def dobrushin_bound(T: float, L: float) -> float:
    if T < 0 or L < 0:
        raise ValueError("T and L must be nonnegative")
    try:
        return (1.0 + T * L) * math.exp(T * T * L)
    except OverflowError:
        return math.inf


def log_dobrushin_bound(T: float, L: float) -> float:
    if T < 0 or L < 0:
        raise ValueError("T and L must be nonnegative")
    return math.log1p(T * L) + T * T * L
