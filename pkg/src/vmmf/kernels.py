"""Mollifier profiles, retarded kernel tables and the initial-layer kernel.

Everything reduces to one-dimensional radial profiles.  For a radial
density p supported in [0, S] with unit 3-D mass we tabulate

    p(s),   P(s) = int_0^s u p(u) du,   Phi(s) = int_0^s P(u) du

with cubic Hermite interpolation.  The mollified retarded kernel and the
initial-layer potential are exact algebraic combinations of these, so
support and mass properties hold up to rounding of the 1-D tables.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, special

from . import _jit

PROFILE_NODES = 2049
FAMILIES = ("double", "single")


# --------------------------------------------------------------------------
# bump shapes on the unit ball (unnormalized)


class _Bump:
    """exp(-1/(1-u^2)) on [0, 1)."""

    name = "bump"

    @staticmethod
    def chi(u):
        u = np.asarray(u, dtype=float)
        w = 1.0 - u * u
        out = np.zeros_like(u)
        inside = w > 0
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            out[inside] = np.exp(-1.0 / w[inside])
        return out

    @staticmethod
    def dchi(u):
        u = np.asarray(u, dtype=float)
        w = 1.0 - u * u
        out = np.zeros_like(u)
        inside = w > 0
        with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
            wi = w[inside]
            out[inside] = np.exp(-1.0 / wi) * (-2.0 * u[inside] / (wi * wi))
        out[~np.isfinite(out)] = 0.0
        return out

    @staticmethod
    def X(a):
        # int_0^a u chi(u) du = (F(1) - F(1 - a^2)) / 2, F(w) = w e^{-1/w} - E1(1/w)
        a = np.minimum(np.abs(np.asarray(a, dtype=float)), 1.0)

        def F(w):
            out = np.zeros_like(w)
            pos = w > 0
            with np.errstate(divide="ignore", over="ignore", under="ignore"):
                iw = 1.0 / w[pos]
                out[pos] = w[pos] * np.exp(-iw) - special.exp1(iw)
            return out

        return 0.5 * (F(np.ones_like(a)) - F(1.0 - a * a))


class _Quartic:
    """(1-u^2)^4 on [0, 1]; a C^3 alternative."""

    name = "quartic"

    @staticmethod
    def chi(u):
        u = np.asarray(u, dtype=float)
        return np.where(u < 1.0, np.clip(1.0 - u * u, 0.0, None) ** 4, 0.0)

    @staticmethod
    def dchi(u):
        u = np.asarray(u, dtype=float)
        return np.where(u < 1.0, -8.0 * u * np.clip(1.0 - u * u, 0.0, None) ** 3, 0.0)

    @staticmethod
    def X(a):
        a = np.minimum(np.abs(np.asarray(a, dtype=float)), 1.0)
        return (1.0 - (1.0 - a * a) ** 5) / 10.0


CHI_FAMILIES = {"bump": _Bump, "quartic": _Quartic}


def _hermite_segments(g, dg, h):
    """Exact integrals of the cubic Hermite interpolant over each cell."""
    return h * (g[:-1] + g[1:]) / 2.0 + h * h * (dg[:-1] - dg[1:]) / 12.0


def _cumulative(g, dg, h):
    return np.concatenate([[0.0], np.cumsum(_hermite_segments(g, dg, h))])


def _complete(s, f, df, F=None):
    """Stack (f, f', P, P', Phi, Phi') for a radial density on grid s."""
    h = s[1] - s[0]
    dP = s * f
    if F is None:
        F = _cumulative(dP, f + s * df, h)
    Phi = _cumulative(F, dP, h)
    return np.vstack([f, df, F, dP, Phi, F])


def _mass(tab, s):
    h = s[1] - s[0]
    f, df = tab[0], tab[1]
    q = s * s * f
    dq = 2.0 * s * f + s * s * df
    return 4.0 * np.pi * _hermite_segments(q, dq, h).sum()


@lru_cache(maxsize=None)
def _unit_tables(chi_family: str, n: int):
    """Unit-scale tables for the single (chi) and double (chi*chi) profiles."""
    fam = CHI_FAMILIES[chi_family]
    norm, _ = integrate.quad(lambda u: u * u * fam.chi(np.array([u]))[0], 0.0, 1.0,
                             epsabs=1e-15, epsrel=1e-13, limit=200)
    c = 1.0 / (4.0 * np.pi * norm)

    s1 = np.linspace(0.0, 1.0, n)
    single = _complete(s1, c * fam.chi(s1), c * fam.dchi(s1), c * fam.X(s1))
    single /= _mass(single, s1)

    s2 = np.linspace(0.0, 2.0, n)
    r = s2[1:]

    def integrand(s):
        cs = s * fam.chi(np.array([s]))[0]
        if cs == 0.0:
            return np.zeros(2 * r.size)
        a = r + s
        b = np.abs(r - s)
        I = cs * (fam.X(a) - fam.X(b))
        Ip = cs * (a * fam.chi(a) - (r - s) * fam.chi(b))
        return np.concatenate([I, Ip])

    vals, _ = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=1e-15, epsrel=1e-12,
                                 limit=2000)
    I, Ip = vals[: r.size], vals[r.size:]
    psi = np.empty(n)
    dpsi = np.empty(n)
    psi[1:] = c * c * 2.0 * np.pi * I / r
    dpsi[1:] = c * c * 2.0 * np.pi * (Ip - I / r) / r
    chi_sq, _ = integrate.quad(lambda u: (u * fam.chi(np.array([u]))[0]) ** 2, 0.0, 1.0,
                               epsabs=1e-15, epsrel=1e-13, limit=200)
    psi[0] = c * c * 4.0 * np.pi * chi_sq
    dpsi[0] = 0.0
    psi[-1] = 0.0
    dpsi[-1] = 0.0
    psi = np.clip(psi, 0.0, None)
    double = _complete(s2, psi, dpsi)
    raw_mass = _mass(double, s2)
    double /= raw_mass
    return single, double, raw_mass


@dataclass(frozen=True)
class RadialProfile:
    """Tabulated radial density with its two cumulative integrals."""

    support: float
    table: np.ndarray  # (6, n)

    @property
    def n(self) -> int:
        return self.table.shape[1]

    @property
    def h(self) -> float:
        return self.support / (self.n - 1)

    @property
    def meta(self) -> np.ndarray:
        P_tot = self.table[2, -1]
        Phi_S = self.table[4, -1]
        q_out = 2.0 * self.support * P_tot - 2.0 * Phi_S
        return np.array([self.h, self.support, P_tot, Phi_S, q_out,
                         1e-3 * self.support, float(self.n)])

    def _interp(self, row, s):
        s = np.abs(np.asarray(s, dtype=float))
        grid = np.linspace(0.0, self.support, self.n)
        out = np.empty_like(s)
        flat = s.ravel()
        res = out.ravel()
        k = np.minimum((flat / self.h).astype(int), self.n - 2)
        th = flat / self.h - k
        f0, f1 = self.table[row, k], self.table[row, k + 1]
        d0, d1 = self.table[row + 1, k] * self.h, self.table[row + 1, k + 1] * self.h
        res[:] = ((2 * th**3 - 3 * th**2 + 1) * f0 + (th**3 - 2 * th**2 + th) * d0
                  + (-2 * th**3 + 3 * th**2) * f1 + (th**3 - th**2) * d1)
        beyond = flat >= grid[-1]
        res[beyond] = self.table[row, -1]
        return res.reshape(s.shape)

    def density(self, s):
        return self._interp(0, s)

    def cumulative(self, s):
        return self._interp(2, s)

    def mass(self) -> float:
        return _mass(self.table, np.linspace(0.0, self.support, self.n))

    def scaled(self, eps: float) -> "RadialProfile":
        f = np.array([eps**-3, eps**-4, eps**-1, eps**-2, 1.0, eps**-1])
        return RadialProfile(self.support * eps, self.table * f[:, None])


@dataclass(frozen=True)
class MollifierProfile:
    epsilon: float
    chi_family: str
    single: RadialProfile  # chi_eps, support eps
    double: RadialProfile  # psi_eps = chi_eps * chi_eps, support 2 eps
    raw_mass: float = 1.0  # mass of psi before renormalization

    def chi(self, r):
        return self.single.density(r)

    def psi(self, r):
        return self.double.density(r)

    def psi_cumulative(self, s):
        return self.double.cumulative(s)

    def chi_cumulative(self, s):
        return self.single.cumulative(s)

    def family(self, name: str) -> RadialProfile:
        if name not in FAMILIES:
            raise ValueError(f"unknown kernel family {name!r}; expected one of {FAMILIES}")
        return self.double if name == "double" else self.single


def build_mollifier(epsilon: float, chi_family: str = "bump",
                    n_nodes: int = PROFILE_NODES) -> MollifierProfile:
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if chi_family not in CHI_FAMILIES:
        raise ValueError(f"unknown chi_family {chi_family!r}; "
                         f"available: {sorted(CHI_FAMILIES)}")
    single, double, raw = _unit_tables(chi_family, int(n_nodes))
    return MollifierProfile(
        epsilon=float(epsilon),
        chi_family=chi_family,
        single=RadialProfile(1.0, single).scaled(epsilon),
        double=RadialProfile(2.0, double).scaled(epsilon),
        raw_mass=raw,
    )


# --------------------------------------------------------------------------
# kernel tables


@dataclass
class RadialKernel:
    """Kernel of one mollifier family plus (t, r) tables and their suprema.

    tables[0..4] = Y, dY/dt, dY/dr, m, dm/dr on the grid ts x rs.
    """

    epsilon: float
    family: str
    chi_family: str
    profile: RadialProfile
    t_max: float
    dt: float
    dr: float
    tables: np.ndarray
    supnorms: dict = field(default_factory=dict)

    def __post_init__(self):
        self._prof = np.ascontiguousarray(self.profile.table)
        self._meta = self.profile.meta

    @property
    def prof(self):
        return self._prof

    @property
    def meta(self):
        return self._meta

    @property
    def support(self) -> float:
        return self.profile.support

    @property
    def ts(self):
        return np.arange(self.tables.shape[1]) * self.dt

    @property
    def rs(self):
        return np.arange(self.tables.shape[2]) * self.dr

    def radial(self, tau, r):
        """Vectorized (Y, dY/dt, dY/dr) at matching arrays tau, r."""
        tau, r = np.broadcast_arrays(np.asarray(tau, float), np.asarray(r, float))
        out = _jit.kernel_points(self.prof, self.meta, tau.ravel().copy(),
                                 r.ravel().copy())
        return tuple(o.reshape(tau.shape) for o in out)

    def layer(self, t, r):
        """Vectorized (m, dm/dr) of the initial-layer potential."""
        t, r = np.broadcast_arrays(np.asarray(t, float), np.asarray(r, float))
        out = _jit.layer_points(self.prof, self.meta, t.ravel().copy(), r.ravel().copy())
        return tuple(o.reshape(t.shape) for o in out)


def _grid(extent: float, spacing: float) -> tuple[int, float]:
    n = int(np.ceil(extent / spacing - 1e-9)) + 1
    return n, extent / (n - 1)


def _supnorms(tables, ts, rs):
    Y, Yt, Yr, m, mr = tables
    dt = ts[1] - ts[0] if ts.size > 1 else 1.0
    dr = rs[1] - rs[0]
    Ytt = np.gradient(Yt, dt, axis=0) if ts.size > 1 else np.zeros_like(Yt)
    Ytr = np.gradient(Yt, dr, axis=1)
    Yrr = np.gradient(Yr, dr, axis=1)
    mrr = np.gradient(mr, dr, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        Yr_r = np.where(rs[None, :] > 0, Yr / rs[None, :], Yrr)
        mr_r = np.where(rs[None, :] > 0, mr / rs[None, :], mrr)
    hess = np.sqrt(Ytt**2 + 2 * Ytr**2 + Yrr**2 + 2 * Yr_r**2)
    grad = np.sqrt(Yt**2 + Yr**2)
    grad_m2 = np.sqrt(mrr**2 + 2 * mr_r**2)
    return {
        "Y": np.abs(Y).max(axis=1),
        "grad_Y": grad.max(axis=1),
        "grad_x_Y": np.abs(Yr).max(axis=1),
        "hess_Y": hess.max(axis=1),
        "hess_x_Y": np.sqrt(Yrr**2 + 2 * Yr_r**2).max(axis=1),
        "m2": np.abs(mr).max(axis=1),
        "grad_m2": grad_m2.max(axis=1),
    }


def build_kernel_tables(profile: MollifierProfile, t_max: float, dt: float | None = None,
                        dr: float | None = None, family: str = "double") -> RadialKernel:
    if not t_max > 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    eps = profile.epsilon
    dt = eps / 8 if dt is None else dt
    dr = eps / 8 if dr is None else dr
    for name, sp in (("dt", dt), ("dr", dr)):
        if not sp > 0:
            raise ValueError(f"{name} must be positive")
        if sp > eps / 2:
            raise ValueError(f"{name}={sp} is coarser than epsilon/2={eps / 2}; "
                             f"the kernel shell would be unresolved")
    prof = profile.family(family)
    nt, dt = _grid(t_max, dt)
    nr, dr = _grid(t_max + prof.support, dr)
    ts = np.arange(nt) * dt
    rs = np.arange(nr) * dr
    tables = _jit.kernel_grid(np.ascontiguousarray(prof.table), prof.meta, ts, rs)
    per_row = _supnorms(tables, ts, rs)
    kern = RadialKernel(eps, family, profile.chi_family, prof, float(t_max), dt, dr,
                        tables, {})
    kern.supnorms = {k: float(v.max()) for k, v in per_row.items()}
    kern.supnorms["rows"] = {k: v.tolist() for k, v in per_row.items()}
    return kern


def zero_kernel(like: RadialKernel) -> RadialKernel:
    """A kernel with identical grids and every profile set to zero."""
    prof = RadialProfile(like.profile.support, np.zeros_like(like.profile.table))
    tables = np.zeros_like(like.tables)
    per_row = _supnorms(tables, like.ts, like.rs)
    k = RadialKernel(like.epsilon, like.family, like.chi_family, prof, like.t_max,
                     like.dt, like.dr, tables, {})
    k.supnorms = {key: float(v.max()) for key, v in per_row.items()}
    k.supnorms["rows"] = {key: v.tolist() for key, v in per_row.items()}
    return k


def _check_time(kernel: RadialKernel, t: float, what: str):
    if not (0.0 <= t <= kernel.t_max * (1 + 1e-12)):
        raise ValueError(f"{what}={t} outside kernel range [0, {kernel.t_max}]")


def eval_kernel(kernel: RadialKernel, tau: float, displacement):
    """Y, dY/dt and grad_x Y at time lag tau and displacement d."""
    _check_time(kernel, tau, "tau")
    d = np.asarray(displacement, dtype=float)
    r = float(np.linalg.norm(d))
    Y, Yt, Yr = _jit.kernel_eval(kernel.prof, kernel.meta, float(tau), r)
    grad = d * (Yr / r) if r > 0 else np.zeros(3)
    return Y, Yt, grad


def eval_initial_layer(kernel: RadialKernel, t: float, displacement) -> np.ndarray:
    """Force kernel of the initial electrostatic layer, -grad(psi * P(t))."""
    _check_time(kernel, t, "t")
    d = np.asarray(displacement, dtype=float)
    r = float(np.linalg.norm(d))
    if r == 0.0:
        return np.zeros(3)
    _, mr = _jit.layer_eval(kernel.prof, kernel.meta, float(t), r)
    return -mr * d / r


def lipschitz_estimate(kernel: RadialKernel, T: float, streaming: bool = False) -> float:
    """Grid-supremum upper-bound estimator for the Lipschitz constant of the
    force field in the truncated metric.

    Combines 3 sup|D^2 Y| + 3 sup|DY| + sup|grad m2| (Lipschitz part) with
    twice the sup of the force kernel (truncation part).  With
    ``streaming`` the free-streaming component v(xi) is included too.
    """
    if T > kernel.t_max * (1 + 1e-12):
        raise ValueError(f"T={T} exceeds kernel t_max={kernel.t_max}")
    rows = kernel.supnorms["rows"]
    sel = kernel.ts <= T + 1e-12
    pick = {k: float(np.max(np.asarray(v)[sel])) for k, v in rows.items()}
    lip = 3 * pick["hess_Y"] + 3 * pick["grad_Y"] + pick["grad_m2"]
    bound = 6 * pick["grad_Y"] + 2 * pick["m2"]
    if streaming:
        lip += 1.0
        bound += 2.0
    return float(max(lip, bound))


# --------------------------------------------------------------------------
# serialization

_KMAGIC = b"VMKR"
_KVERSION = 1
_KHEAD = "<4sIIdddddIIIQ"


def save_kernel(kernel: RadialKernel, path) -> Path:
    path = Path(path)
    nt, nr = kernel.tables.shape[1:]
    head = struct.pack(_KHEAD, _KMAGIC, _KVERSION, FAMILIES.index(kernel.family),
                       kernel.epsilon, kernel.dt, kernel.dr, kernel.t_max,
                       kernel.profile.support, nt, nr, kernel.profile.n,
                       len(kernel.chi_family))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(kernel.chi_family.encode("ascii"))
        fh.write(np.ascontiguousarray(kernel.profile.table, "<f8").tobytes())
        fh.write(np.ascontiguousarray(kernel.tables, "<f8").tobytes())
    side = {
        "format": "VMKR", "version": _KVERSION, "epsilon": kernel.epsilon,
        "family": kernel.family, "chi_family": kernel.chi_family,
        "t_max": kernel.t_max, "dt": kernel.dt, "dr": kernel.dr,
        "shape": [nt, nr], "supnorms": {k: v for k, v in kernel.supnorms.items()
                                         if k != "rows"},
    }
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2))
    return path


def load_kernel(path) -> RadialKernel:
    path = Path(path)
    raw = path.read_bytes()
    size = struct.calcsize(_KHEAD)
    if len(raw) < size or raw[:4] != _KMAGIC:
        raise ValueError(f"{path} is not a kernel file")
    (_, version, fam, eps, dt, dr, t_max, support, nt, nr, npf,
     nchi) = struct.unpack(_KHEAD, raw[:size])
    if version != _KVERSION:
        raise ValueError(f"unsupported kernel format version {version}")
    off = size
    chi = raw[off:off + nchi].decode("ascii")
    off += nchi
    prof = np.frombuffer(raw, "<f8", 6 * npf, off).reshape(6, npf).copy()
    off += 48 * npf
    tables = np.frombuffer(raw, "<f8", 5 * nt * nr, off).reshape(5, nt, nr).copy()
    kern = RadialKernel(eps, FAMILIES[fam], chi, RadialProfile(support, prof), t_max,
                        dt, dr, tables, {})
    per_row = _supnorms(tables, kern.ts, kern.rs)
    kern.supnorms = {k: float(v.max()) for k, v in per_row.items()}
    kern.supnorms["rows"] = {k: v.tolist() for k, v in per_row.items()}
    return kern
