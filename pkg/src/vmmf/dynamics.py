"""N-particle retarded dynamics with mollified kernels.

Each particle obeys x' = v(xi), xi' = F_i with F_i the Lorentz force of
the retarded, mollified fields of all (or all other) particles.  Memory
integrals are evaluated on the stored history nodes with 4th-order
Gregory weights; the partial interval up to an RK stage time uses
Simpson's rule on Hermite-extrapolated source states.
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _jit
from .kernels import RadialKernel

FORCE_PATHS = ("brute", "windowed")


def kinematics(xi):
    """Velocity v = xi/e, energy e = sqrt(1+|xi|^2) and Jacobian dv/dxi."""
    xi = np.asarray(xi, dtype=float)
    e = np.sqrt(1.0 + np.dot(xi, xi))
    v = xi / e
    dv = (np.eye(3) - np.outer(v, v)) / e
    return v, e, dv


def velocity(xi: np.ndarray) -> np.ndarray:
    """Row-wise v(xi) for an (..., 3) array."""
    return xi / np.sqrt(1.0 + np.sum(xi * xi, axis=-1, keepdims=True))


def energy(xi: np.ndarray) -> np.ndarray:
    return np.sqrt(1.0 + np.sum(xi * xi, axis=-1))


# --------------------------------------------------------------------------
# ensembles


@dataclass
class PhaseEnsemble:
    x: np.ndarray
    xi: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 3)
        self.xi = np.asarray(self.xi, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n = self.x.shape[0]
        if self.xi.shape[0] != n or self.weights.shape[0] != n:
            raise ValueError("x, xi and weights must have matching lengths")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.xi))):
            raise ValueError("non-finite phase point")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")
        if n and abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def z(self) -> np.ndarray:
        return np.hstack([self.x, self.xi])

    @property
    def is_uniform(self) -> bool:
        return self.n > 0 and bool(np.all(self.weights == self.weights[0]))

    @classmethod
    def empirical(cls, x, xi) -> "PhaseEnsemble":
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        return cls(x, xi, np.full(x.shape[0], 1.0 / max(x.shape[0], 1)))

    @classmethod
    def standard_cloud(cls, n: int, seed: int, x_radius: float = 1.0,
                       xi_radius: float = 0.5) -> "PhaseEnsemble":
        """i.i.d. uniform draws from ball(x_radius) x ball(xi_radius)."""
        rng = np.random.default_rng(seed)
        return cls.empirical(_ball(rng, n, x_radius), _ball(rng, n, xi_radius))

    def to_csv(self, path):
        data = np.hstack([self.x, self.xi, self.weights[:, None]])
        np.savetxt(path, data, delimiter=",", header="x1,x2,x3,xi1,xi2,xi3,w",
                   comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "PhaseEnsemble":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] == 6:
            return cls.empirical(data[:, :3], data[:, 3:6])
        return cls(data[:, :3], data[:, 3:6], data[:, 6])


def _ball(rng, n, radius):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.random(n) ** (1.0 / 3.0))[:, None]


# --------------------------------------------------------------------------
# histories


def _hermite(p0, d0, p1, d1, th, h):
    th2 = th * th
    th3 = th2 * th
    return ((2 * th3 - 3 * th2 + 1) * p0 + (th3 - 2 * th2 + th) * h * d0
            + (-2 * th3 + 3 * th2) * p1 + (th3 - th2) * h * d1)


_HMAGIC = b"VMHS"
_HVERSION = 1
_HCOLS = ("step", "pid", "x1", "x2", "x3", "xi1", "xi2", "xi3", "f1", "f2", "f3")


@dataclass
class TrajectoryHistory:
    """Per-particle phase states on the nodes t_k = k*dt, k = 0..steps.

    ``force[:, k]`` holds the force at node k; it is valid for
    k < n_force (the last node's force is filled when a run finishes).
    """

    dt: float
    weights: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    force: np.ndarray
    steps: int = 0
    n_force: int = 0
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.v = velocity(self.xi)

    @classmethod
    def start(cls, initial: PhaseEnsemble, dt: float, capacity: int = 0):
        n = initial.n
        K = capacity + 1
        x = np.zeros((n, K, 3))
        xi = np.zeros((n, K, 3))
        x[:, 0] = initial.x
        xi[:, 0] = initial.xi
        return cls(float(dt), initial.weights.copy(), x, xi, np.zeros((n, K, 3)))

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.steps + 1

    @property
    def t_end(self) -> float:
        return self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_nodes) * self.dt

    def _ensure(self, K):
        cap = self.x.shape[1]
        if K <= cap:
            return
        new = max(K, 2 * cap)
        pad = ((0, 0), (0, new - cap), (0, 0))
        self.x = np.pad(self.x, pad)
        self.xi = np.pad(self.xi, pad)
        self.v = np.pad(self.v, pad)
        self.force = np.pad(self.force, pad)

    def append(self, x, xi):
        k = self.steps + 1
        self._ensure(k + 1)
        self.x[:, k] = x
        self.xi[:, k] = xi
        self.v[:, k] = velocity(xi)
        self.steps = k

    def trimmed(self) -> "TrajectoryHistory":
        K = self.n_nodes
        h = TrajectoryHistory(self.dt, self.weights.copy(), self.x[:, :K].copy(),
                              self.xi[:, :K].copy(), self.force[:, :K].copy(),
                              self.steps, self.n_force)
        return h

    def locate(self, t: float) -> tuple[int, float]:
        """Node index n and fraction c with t = (n + c) dt."""
        if t < -1e-12 or t > self.t_end + 1e-9 * max(self.dt, 1.0):
            raise ValueError(f"t={t} outside recorded history [0, {self.t_end}]")
        q = t / self.dt
        n = int(np.floor(q + 1e-9))
        c = q - n
        if abs(c) < 1e-9:
            c = 0.0
        n = min(max(n, 0), self.steps)
        if n == self.steps:
            c = 0.0
        return n, c

    def node_state(self, k: int):
        return self.x[:, k].copy(), self.xi[:, k].copy()

    def state_at(self, t: float):
        """(x, xi) of all particles at time t via cubic Hermite interpolation."""
        n, c = self.locate(t)
        if c == 0.0:
            return self.node_state(n)
        if n + 1 >= self.n_force:
            raise ValueError("forces needed for interpolation are not available")
        x = _hermite(self.x[:, n], self.v[:, n], self.x[:, n + 1], self.v[:, n + 1],
                     c, self.dt)
        xi = _hermite(self.xi[:, n], self.force[:, n], self.xi[:, n + 1],
                      self.force[:, n + 1], c, self.dt)
        return x, xi

    def ensemble_at(self, t: float) -> PhaseEnsemble:
        x, xi = self.state_at(t)
        return PhaseEnsemble(x, xi, self.weights.copy())

    def partial_sources(self, n: int, c: float):
        """Source states at t_n + c dt/2 and t_n + c dt, shape (N, 2, 3).

        Interpolated inside the recorded history, extrapolated from the
        last interval beyond it, and Taylor-expanded when only node 0 exists.
        """
        N = self.n_particles
        xp = np.zeros((N, 2, 3))
        vp = np.zeros((N, 2, 3))
        if c == 0.0:
            return xp, vp
        dt = self.dt
        for col, frac in enumerate((0.5 * c, c)):
            if n + 1 < self.n_force and n + 1 <= self.steps:
                k0, th = n, frac
            elif n >= 1:
                k0, th = n - 1, 1.0 + frac
            else:
                s = frac * dt
                v0 = self.v[:, 0]
                f0 = self.force[:, 0]
                e0 = energy(self.xi[:, 0])[:, None]
                a0 = (f0 - v0 * np.sum(v0 * f0, axis=1, keepdims=True)) / e0
                xp[:, col] = self.x[:, 0] + s * v0 + 0.5 * s * s * a0
                vp[:, col] = velocity(self.xi[:, 0] + s * f0)
                continue
            xp[:, col] = _hermite(self.x[:, k0], self.v[:, k0], self.x[:, k0 + 1],
                                  self.v[:, k0 + 1], th, dt)
            xi = _hermite(self.xi[:, k0], self.force[:, k0], self.xi[:, k0 + 1],
                          self.force[:, k0 + 1], th, dt)
            vp[:, col] = velocity(xi)
        return xp, vp

    # -- serialization -----------------------------------------------------

    def columns(self) -> np.ndarray:
        """Step-major table with columns step, pid, x, xi, F."""
        N, K = self.n_particles, self.n_nodes
        step = np.repeat(np.arange(K), N).astype(float)
        pid = np.tile(np.arange(N), K).astype(float)
        tr = lambda a: a[:, :K].transpose(1, 0, 2).reshape(-1, 3)
        return np.column_stack([step, pid, tr(self.x), tr(self.xi), tr(self.force)])

    def save(self, path, csv_path=None) -> Path:
        path = Path(path)
        cols = self.columns()
        head = struct.pack("<4sIIIdII", _HMAGIC, _HVERSION, self.n_particles,
                           self.n_nodes, self.dt, len(_HCOLS), self.n_force)
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(",".join(_HCOLS).encode("ascii").ljust(128, b" "))
            fh.write(np.ascontiguousarray(self.weights, "<f8").tobytes())
            # columnar: each column stored contiguously
            fh.write(np.ascontiguousarray(cols.T, "<f8").tobytes())
        if csv_path is not None:
            np.savetxt(csv_path, cols, delimiter=",", header=",".join(_HCOLS),
                       comments="", fmt="%.17g")
        return path

    @classmethod
    def load(cls, path) -> "TrajectoryHistory":
        raw = Path(path).read_bytes()
        size = struct.calcsize("<4sIIIdII")
        if raw[:4] != _HMAGIC:
            raise ValueError(f"{path} is not a history file")
        _, version, N, K, dt, ncol, n_force = struct.unpack("<4sIIIdII", raw[:size])
        if version != _HVERSION:
            raise ValueError(f"unsupported history version {version}")
        off = size + 128
        w = np.frombuffer(raw, "<f8", N, off).copy()
        off += 8 * N
        cols = np.frombuffer(raw, "<f8", ncol * N * K, off).reshape(ncol, K, N)
        grab = lambda a, b: cols[a:b].transpose(2, 1, 0).copy()
        return cls(dt, w, grab(2, 5), grab(5, 8), grab(8, 11), K - 1, n_force)


# --------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    epsilon: float = 0.2
    dt: float = 0.05
    t_end: float = 1.0
    n_particles: int = 16
    self_interaction: bool = True
    force_path: str = "windowed"
    seed: int = 0
    initial: str = "standard_cloud"
    x_radius: float = 1.0
    xi_radius: float = 0.5
    chi_family: str = "bump"

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def validate(self, kernel: RadialKernel | None = None):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if abs(self.n_steps * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ValueError(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        if self.dt > self.epsilon / 4 * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds epsilon/4={self.epsilon / 4}")
        if self.force_path not in FORCE_PATHS:
            raise ValueError(f"force_path must be one of {FORCE_PATHS}")
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if not self.self_interaction and self.n_particles < 2:
            raise ValueError("the variant without self-interaction needs N >= 2")
        if kernel is not None:
            if kernel.family != "double":
                raise ValueError("particle forces need the doubly mollified kernel")
            if abs(kernel.epsilon - self.epsilon) > 1e-12 * self.epsilon:
                raise ValueError(f"kernel epsilon {kernel.epsilon} != config "
                                 f"epsilon {self.epsilon}")
            if self.t_end > kernel.t_max * (1 + 1e-12):
                raise ValueError(f"t_end={self.t_end} exceeds kernel t_max={kernel.t_max}")
        return self

    def initial_ensemble(self) -> PhaseEnsemble:
        if self.initial != "standard_cloud":
            raise ValueError(f"unknown initial condition {self.initial!r}")
        return PhaseEnsemble.standard_cloud(self.n_particles, self.seed,
                                            self.x_radius, self.xi_radius)

    @classmethod
    def from_ini(cls, path, section: str = "simulation") -> "SimConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_section(cp[section])

    @classmethod
    def from_section(cls, sec) -> "SimConfig":
        kw = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in sec:
                continue
            typ = type(f.default)
            if typ is bool:
                kw[name] = sec.getboolean(name)
            elif typ is int:
                kw[name] = sec.getint(name)
            elif typ is float:
                kw[name] = sec.getfloat(name)
            else:
                kw[name] = sec.get(name)
        unknown = set(sec) - set(cls.__dataclass_fields__) - set(sec.parser.defaults())
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)

    def to_ini(self, path, section: str = "simulation"):
        cp = configparser.ConfigParser()
        cp[section] = {k: str(v) for k, v in asdict(self).items()}
        with open(path, "w") as fh:
            cp.write(fh)


# --------------------------------------------------------------------------
# forces and time stepping


def _interaction_weights(weights: np.ndarray, self_interaction: bool):
    N = weights.shape[0]
    if self_interaction:
        return weights, np.full(N, -1, dtype=np.int64)
    if N < 2:
        raise ValueError("the variant without self-interaction needs N >= 2")
    if not np.all(weights == weights[0]):
        raise ValueError("the variant without self-interaction needs uniform weights")
    return np.full(N, 1.0 / (N - 1)), np.arange(N, dtype=np.int64)


def _sweep(hist: TrajectoryHistory, kernel: RadialKernel, t, n, c, ty, tv, w, skip,
           windowed):
    xp, vp = hist.partial_sources(n, c)
    return _jit.forces(kernel.prof, kernel.meta, float(t), hist.dt, int(n), float(c),
                       hist.x, hist.v, xp, vp, np.ascontiguousarray(hist.x[:, 0]), w,
                       np.ascontiguousarray(ty), np.ascontiguousarray(tv),
                       skip, bool(windowed))


def force_on_particle(i: int, t: float, history: TrajectoryHistory,
                      kernel: RadialKernel, config: SimConfig) -> np.ndarray:
    """Force on particle i at time t from the recorded history."""
    n, c = history.locate(t)
    x, xi = history.state_at(t)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xi))):
        raise ValueError("non-finite state in history")
    w, skip = _interaction_weights(history.weights, config.self_interaction)
    out = _sweep(history, kernel, t, n, c, x[i:i + 1], velocity(xi[i:i + 1]), w,
                 skip[i:i + 1], config.force_path == "windowed")
    return out[0]


class _Stepper:
    """RK4 on the delay system, bound to one history."""

    def __init__(self, hist, kernel, weights, skip, windowed):
        self.h = hist
        self.k = kernel
        self.w = weights
        self.skip = skip
        self.windowed = windowed

    def F(self, n, c, y, p):
        t = (n + c) * self.h.dt
        return _sweep(self.h, self.k, t, n, c, y, velocity(p), self.w, self.skip,
                      self.windowed)

    def node_force(self, n):
        h = self.h
        f = self.F(n, 0.0, h.x[:, n], h.xi[:, n])
        h.force[:, n] = f
        h.n_force = max(h.n_force, n + 1)
        return f

    def step(self):
        h = self.h
        n = h.steps
        dt = h.dt
        x, p = h.x[:, n].copy(), h.xi[:, n].copy()
        k1x, k1p = h.v[:, n].copy(), (h.force[:, n] if h.n_force > n
                                      else self.node_force(n))
        y2, p2 = x + 0.5 * dt * k1x, p + 0.5 * dt * k1p
        k2x, k2p = velocity(p2), self.F(n, 0.5, y2, p2)
        y3, p3 = x + 0.5 * dt * k2x, p + 0.5 * dt * k2p
        k3x, k3p = velocity(p3), self.F(n, 0.5, y3, p3)
        y4, p4 = x + dt * k3x, p + dt * k3p
        k4x, k4p = velocity(p4), self.F(n, 1.0, y4, p4)
        h.append(x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x),
                 p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p))


def step(history: TrajectoryHistory, kernel: RadialKernel, config: SimConfig):
    """Advance the history by one RK4 step and return the new node state."""
    w, skip = _interaction_weights(history.weights, config.self_interaction)
    _Stepper(history, kernel, w, skip, config.force_path == "windowed").step()
    return history.node_state(history.steps)


def integrate(initial: PhaseEnsemble, kernel: RadialKernel, dt: float, n_steps: int,
              self_interaction: bool = True, windowed: bool = True) -> TrajectoryHistory:
    """Run n_steps RK4 steps from `initial`; also fills the final node force."""
    hist = TrajectoryHistory.start(initial, dt, n_steps)
    w, skip = _interaction_weights(initial.weights, self_interaction)
    st = _Stepper(hist, kernel, w, skip, windowed)
    for _ in range(n_steps):
        st.step()
    st.node_force(hist.steps)
    return hist


def simulate(config: SimConfig, kernel: RadialKernel,
             initial: PhaseEnsemble | None = None) -> TrajectoryHistory:
    config.validate(kernel)
    if initial is None:
        initial = config.initial_ensemble()
    if initial.n != config.n_particles:
        raise ValueError(f"initial ensemble has {initial.n} points, config says "
                         f"{config.n_particles}")
    if not initial.is_uniform:
        raise ValueError("simulate expects an empirical (uniformly weighted) ensemble")
    return integrate(initial, kernel, config.dt, config.n_steps,
                     config.self_interaction, config.force_path == "windowed")
