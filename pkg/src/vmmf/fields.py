"""Potentials and fields of particle histories, with conservation diagnostics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _jit
from .dynamics import TrajectoryHistory, energy, velocity
from .kernels import RadialKernel


@dataclass
class FieldGrid:
    """Cell-centred lattice over the box [lo, hi] with spacing h."""

    lo: np.ndarray
    hi: np.ndarray
    h: float
    t: float | None = None
    samples: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        if not self.h > 0 or np.any(self.hi <= self.lo):
            raise ValueError("invalid grid geometry")

    @classmethod
    def cube(cls, half_width: float, h: float) -> "FieldGrid":
        """Origin-centred cube whose width is a whole number of cells."""
        n = int(np.ceil(2 * half_width / h - 1e-9))
        L = n * h / 2
        return cls(np.full(3, -L), np.full(3, L), h)

    @property
    def shape(self) -> tuple:
        return tuple(int(round(v)) for v in (self.hi - self.lo) / self.h)

    def axes(self):
        return [self.lo[a] + (np.arange(n) + 0.5) * self.h for a, n in enumerate(self.shape)]

    def points(self) -> np.ndarray:
        X = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([x.ravel() for x in X], axis=1)

    def contains_ball(self, radius: float) -> bool:
        return bool(np.all(self.lo <= -radius) and np.all(self.hi >= radius))

    def _directions(self, n_theta, n_phi):
        z, wz = np.polynomial.legendre.leggauss(n_theta)
        phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
        st = np.sqrt(1 - z * z)
        n = np.stack([st[:, None] * np.cos(phi)[None, :],
                      st[:, None] * np.sin(phi)[None, :],
                      np.broadcast_to(z[:, None], (n_theta, n_phi))], axis=-1)
        with np.errstate(divide="ignore"):
            dist = np.where(n > 0, self.hi / n, np.where(n < 0, self.lo / n, np.inf))
        rho = dist.min(axis=-1)
        w = np.broadcast_to(wz[:, None] * 2 * np.pi / n_phi, rho.shape)
        return n.reshape(-1, 3), rho.ravel(), w.ravel()

    def exterior_inverse_quartic(self, n_theta: int = 400, n_phi: int = 800) -> float:
        """int over the outside of the box of |x|^-4 d^3x (origin inside)."""
        _, rho, w = self._directions(n_theta, n_phi)
        return float(np.sum(w / rho))

    def exterior_coulomb_energy(self, sources, weights, n_theta: int = 160,
                                n_phi: int = 320, n_radial: int = 16) -> float:
        """(1/2) int outside the box of |E|^2 for point charges at `sources`.

        Rays from the origin, with the substitution r = rho/u on u in (0, 1].
        """
        sources = np.asarray(sources, dtype=float).reshape(-1, 3)
        if sources.shape[0] == 0:
            return 0.0
        n, rho, w = self._directions(n_theta, n_phi)
        u, wu = np.polynomial.legendre.leggauss(n_radial)
        u = 0.5 * (u + 1.0)
        wu = 0.5 * wu
        total = 0.0
        for ui, wi in zip(u, wu):
            r = rho / ui
            x = n * r[:, None]
            E = coulomb_field(x, sources, weights)
            # r^2 dr = rho^3 u^-4 du
            total += wi * np.sum(w * rho**3 / ui**4 * np.sum(E * E, axis=1))
        return 0.5 * float(total)


# --------------------------------------------------------------------------
# evaluation


def _x0(history):
    return np.ascontiguousarray(history.x[:, 0])


def field_eval(history: TrajectoryHistory, kernel: RadialKernel, t: float, points,
               substeps: int = 0):
    """E, B, phi, A at the points.

    substeps = 0 uses the memory rule of the particle solver on history
    nodes; substeps = q > 0 integrates each history interval with a q-point
    Gauss rule on the Hermite interpolant of the trajectories (node times only).
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    n, c = history.locate(t)
    w = np.ascontiguousarray(history.weights)
    if substeps:
        if c != 0.0:
            raise ValueError("refined quadrature requires a node time")
        if history.n_force <= n and n > 0:
            raise ValueError("refined quadrature needs node forces")
        gx, gw = np.polynomial.legendre.leggauss(int(substeps))
        gx = 0.5 * (gx + 1.0)
        gw = 0.5 * gw
        fs = np.ascontiguousarray(np.concatenate([history.xi, history.force], axis=2))
        vs = np.ascontiguousarray(history.v)
        out = _jit.fields_refined(kernel.prof, kernel.meta, float(t), history.dt, n,
                                  history.x, vs, fs, _x0(history), w, pts, gx, gw)
    else:
        xp, vp = history.partial_sources(n, c)
        out = _jit.fields(kernel.prof, kernel.meta, float(t), history.dt, n, c,
                          history.x, history.v, xp, vp, _x0(history), w, pts, True)
    return out[:, 0:3], out[:, 3:6], out[:, 6], out[:, 7:10]


def sample_grid(history, kernel, t, grid: FieldGrid, substeps: int = 0) -> FieldGrid:
    E, B, phi, A = field_eval(history, kernel, t, grid.points(), substeps)
    s = grid.shape
    out = FieldGrid(grid.lo, grid.hi, grid.h, t)
    out.samples = {"E": E.reshape(*s, 3), "B": B.reshape(*s, 3),
                   "phi": phi.reshape(s), "A": A.reshape(*s, 3)}
    return out


def coulomb_field(points, sources, weights):
    d = np.asarray(points)[:, None, :] - np.asarray(sources)[None, :, :]
    r = np.linalg.norm(d, axis=2, keepdims=True)
    return np.einsum("j,pjd->pd", weights, d / (4 * np.pi * r**3))


# --------------------------------------------------------------------------
# diagnostics


def _check_box(history, kernel, t, grid):
    R = float(np.linalg.norm(history.x[:, 0], axis=1).max(initial=0.0))
    need = R + t + kernel.support
    if not grid.contains_ball(need):
        raise ValueError(f"grid box must contain the ball of radius {need:.6g}")
    return R


def pseudo_energy(history: TrajectoryHistory, kernel_once_mollified: RadialKernel,
                  t: float, grid: FieldGrid, substeps: int = 0, tail: str = "exact"):
    """(kinetic, field, total) of the once-mollified system at time t.

    Outside the box the field is still the static initial Coulomb field.
    Its energy is integrated along rays ("exact") or taken from the
    monopole term alone ("monopole").
    """
    k = kernel_once_mollified
    if k.family != "single":
        raise ValueError("pseudo-energy needs the once-mollified kernel family")
    _check_box(history, k, t, grid)
    _, xi = history.state_at(t)
    kinetic = float(np.sum(history.weights * energy(xi)))
    E, B, _, _ = field_eval(history, k, t, grid.points(), substeps)
    inside = 0.5 * grid.h**3 * float(np.sum(E * E) + np.sum(B * B))
    if tail == "exact":
        ext = grid.exterior_coulomb_energy(history.x[:, 0], history.weights)
    elif tail == "monopole":
        q = float(history.weights.sum())
        ext = q * q / (32 * np.pi**2) * grid.exterior_inverse_quartic()
    else:
        raise ValueError(f"unknown tail model {tail!r}")
    fld = inside + ext
    return kinetic, fld, kinetic + fld


def _lagrange4(th):
    return np.stack([-th * (th - 1) * (th - 2) / 6, (th + 1) * (th - 1) * (th - 2) / 2,
                     -(th + 1) * th * (th - 2) / 2, (th + 1) * th * (th - 1) / 6], axis=-1)


def deposit_stencil(grid: FieldGrid, x: np.ndarray):
    """Lattice nodes (N, 64, 3) and weights (N, 64) of tricubic deposition."""
    u = (x - grid.lo) / grid.h - 0.5
    k0 = np.floor(u)
    th = u - k0
    W = _lagrange4(th)  # (N, 3, 4)
    offs = np.arange(-1, 3)
    idx = k0[:, :, None] + offs[None, None, :]  # (N, 3, 4)
    pos = grid.lo + (idx.transpose(0, 2, 1) + 0.5) * grid.h  # (N, 4, 3)
    I, J, K = np.meshgrid(range(4), range(4), range(4), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    nodes = np.stack([pos[:, I, 0], pos[:, J, 1], pos[:, K, 2]], axis=-1)
    wts = W[:, 0, I] * W[:, 1, J] * W[:, 2, K]
    return nodes, wts


def power_density(history, kernel, t, grid: FieldGrid) -> float:
    """Grid quadrature of E . j with the current deposited on the lattice."""
    x, xi = history.state_at(t)
    N = x.shape[0]
    if N == 0:
        return 0.0
    nodes, wts = deposit_stencil(grid, x)
    E, _, _, _ = field_eval(history, kernel, t, nodes.reshape(-1, 3))
    E = E.reshape(N, 64, 3)
    Ebar = np.einsum("nk,nkd->nd", wts, E)
    return float(np.sum(history.weights * np.sum(velocity(xi) * Ebar, axis=1)))


def _bracket(history, t):
    n, c = history.locate(t)
    if c != 0.0 or n < 1 or n + 1 > history.steps:
        raise ValueError("need history nodes at t - dt, t and t + dt")
    return n


def energy_exchange_residual(history: TrajectoryHistory, kernel: RadialKernel, t: float,
                             grid: FieldGrid) -> float:
    """|centred d/dt of kinetic energy - Simpson mean of int E.j| over [t-dt, t+dt]."""
    n = _bracket(history, t)
    dt = history.dt
    K = [float(np.sum(history.weights * energy(history.xi[:, k]))) for k in (n - 1, n + 1)]
    P = [power_density(history, kernel, k * dt, grid) for k in (n - 1, n, n + 1)]
    return abs((K[1] - K[0]) / (2 * dt) - (P[0] + 4 * P[1] + P[2]) / 6)


def gauge_residual(history: TrajectoryHistory, kernel: RadialKernel, t: float,
                   grid: FieldGrid, substeps: int = 0) -> float:
    """Normalized sup of d/dt phi + div A on interior nodes."""
    n = _bracket(history, t)
    if history.n_particles == 0:
        return 0.0
    dt, h = history.dt, grid.h
    g = [sample_grid(history, kernel, k * dt, grid, substeps) for k in (n - 1, n, n + 1)]
    phi_t = (g[2].samples["phi"] - g[0].samples["phi"]) / (2 * dt)
    A = g[1].samples["A"]
    phi = g[1].samples["phi"]
    c = (slice(1, -1),) * 3

    def dc(f, ax):
        hi = [slice(1, -1)] * 3
        lo = [slice(1, -1)] * 3
        hi[ax] = slice(2, None)
        lo[ax] = slice(None, -2)
        return (f[tuple(hi)] - f[tuple(lo)]) / (2 * h)

    div = sum(dc(A[..., a], a) for a in range(3))
    grad = np.sqrt(sum(dc(phi, a) ** 2 for a in range(3)))
    scale = float(grad.max() + np.linalg.norm(A[c], axis=-1).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(phi_t[c] + div).max() / scale)


def divergence_B(sample: FieldGrid) -> tuple[float, float]:
    """(max |div B| on interior nodes, max |B|)."""
    B = sample.samples["B"]
    h = sample.h
    div = ((B[2:, 1:-1, 1:-1, 0] - B[:-2, 1:-1, 1:-1, 0])
           + (B[1:-1, 2:, 1:-1, 1] - B[1:-1, :-2, 1:-1, 1])
           + (B[1:-1, 1:-1, 2:, 2] - B[1:-1, 1:-1, :-2, 2])) / (2 * h)
    return float(np.abs(div).max()), float(np.linalg.norm(B, axis=-1).max())


# --------------------------------------------------------------------------
# grid files

_GMAGIC = b"VMFG"


def save_field_grid(sample: FieldGrid, path, csv_prefix=None) -> Path:
    path = Path(path)
    names = ["phi", "A", "E", "B"]
    header = {"format": "VMFG", "version": 1, "t": sample.t, "h": sample.h,
              "lo": sample.lo.tolist(), "hi": sample.hi.tolist(),
              "shape": list(sample.shape),
              "fields": {k: list(np.shape(sample.samples[k])) for k in names}}
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_GMAGIC + struct.pack("<I", len(hb)) + hb)
        for k in names:
            fh.write(np.ascontiguousarray(sample.samples[k], "<f8").tobytes())
    if csv_prefix is not None:
        ax = sample.axes()
        mid = sample.shape[2] // 2
        X, Y = np.meshgrid(ax[0], ax[1], indexing="ij")
        cols = [X.ravel(), Y.ravel(), sample.samples["phi"][:, :, mid].ravel()]
        for k in ("A", "E", "B"):
            cols += [sample.samples[k][:, :, mid, a].ravel() for a in range(3)]
        np.savetxt(f"{csv_prefix}_z{ax[2][mid]:+.4f}.csv", np.column_stack(cols),
                   delimiter=",", comments="", fmt="%.12g",
                   header="x,y,phi,A1,A2,A3,E1,E2,E3,B1,B2,B3")
    return path


def load_field_grid(path) -> FieldGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != _GMAGIC:
        raise ValueError(f"{path} is not a field grid file")
    (nh,) = struct.unpack("<I", raw[4:8])
    head = json.loads(raw[8:8 + nh])
    off = 8 + nh
    g = FieldGrid(head["lo"], head["hi"], head["h"], head["t"])
    for k, shape in head["fields"].items():
        size = int(np.prod(shape))
        g.samples[k] = np.frombuffer(raw, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
    return g
