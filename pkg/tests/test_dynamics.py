import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmmf.dynamics import (PhaseEnsemble, SimConfig, TrajectoryHistory, energy,
                           force_on_particle, integrate, kinematics, simulate, step,
                           velocity)
from vmmf.kernels import zero_kernel

EPS = 0.2

finite3 = arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3))


def _coulomb(x, w, i):
    f = np.zeros(3)
    for j in range(len(x)):
        if j != i:
            d = x[i] - x[j]
            f += w[j] * d / (4 * np.pi * np.linalg.norm(d) ** 3)
    return f


def _frozen(x, dt, T=1.0):
    steps = int(round(T / dt))
    K = steps + 1
    N = len(x)
    return TrajectoryHistory(dt, np.full(N, 1 / N), np.repeat(x[:, None], K, 1),
                             np.zeros((N, K, 3)), np.zeros((N, K, 3)), steps, K)


# -- kinematics ---------------------------------------------------------------


@given(finite3)
def test_velocity_subluminal(xi):
    v = velocity(xi)
    assert np.all(np.linalg.norm(v, axis=1) < 1.0)
    np.testing.assert_allclose(v * energy(xi)[:, None], xi, rtol=1e-12, atol=1e-300)


def test_kinematics_jacobian():
    xi = np.array([3.0, 0.0, 4.0])
    v, e, dv = kinematics(xi)
    assert e == pytest.approx(np.sqrt(26.0))
    np.testing.assert_allclose(v, xi / np.sqrt(26.0))
    h = 1e-6
    fd = np.column_stack([(velocity(xi + h * u) - velocity(xi - h * u)) / (2 * h)
                          for u in np.eye(3)])
    np.testing.assert_allclose(dv, fd, atol=1e-9)


# -- ensembles and configs --------------------------------------------------


def test_standard_cloud_support_and_seed():
    a = PhaseEnsemble.standard_cloud(200, 4)
    b = PhaseEnsemble.standard_cloud(200, 4)
    assert np.array_equal(a.z, b.z)
    assert np.linalg.norm(a.x, axis=1).max() <= 1.0
    assert np.linalg.norm(a.xi, axis=1).max() <= 0.5
    assert a.is_uniform and a.weights.sum() == pytest.approx(1.0)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        PhaseEnsemble(np.zeros((2, 3)), np.zeros((3, 3)), np.full(2, 0.5))
    with pytest.raises(ValueError):
        PhaseEnsemble(np.zeros((2, 3)), np.zeros((2, 3)), np.array([0.5, -0.5]))


def test_ensemble_csv_roundtrip(tmp_path):
    e = PhaseEnsemble.standard_cloud(7, 1)
    e = PhaseEnsemble(e.x, e.xi, np.arange(1, 8) / 28.0)
    e.to_csv(tmp_path / "e.csv")
    f = PhaseEnsemble.from_csv(tmp_path / "e.csv")
    assert np.array_equal(e.z, f.z) and np.array_equal(e.weights, f.weights)


def test_config_ini_roundtrip(tmp_path):
    c = SimConfig(epsilon=0.15, dt=0.02, n_particles=5, self_interaction=False, seed=7)
    c.to_ini(tmp_path / "c.ini")
    assert SimConfig.from_ini(tmp_path / "c.ini") == c
    (tmp_path / "bad.ini").write_text("[simulation]\nepsilon = 0.2\nbogus = 1\n")
    with pytest.raises(ValueError):
        SimConfig.from_ini(tmp_path / "bad.ini")


def test_config_validation(kernel02):
    with pytest.raises(ValueError):
        SimConfig(dt=0.15).validate(kernel02)
    with pytest.raises(ValueError):
        SimConfig(t_end=2.0).validate(kernel02)
    with pytest.raises(ValueError):
        SimConfig(epsilon=0.1).validate(kernel02)
    assert SimConfig(dt=0.025).n_steps == 40


# -- forces -------------------------------------------------------------------


def test_initial_force_is_coulomb(kernel02):
    x = np.array([[-0.4, 0.0, 0.0], [0.35, 0.2, 0.0], [0.0, 0.7, -0.3]])
    ens = PhaseEnsemble.empirical(x, np.zeros_like(x))
    h = integrate(ens, kernel02, 0.025, 1)
    for i in range(3):
        np.testing.assert_allclose(h.force[i, 0], _coulomb(x, ens.weights, i), rtol=1e-12)


def test_frozen_charges_keep_coulomb_force(kernel02):
    """Static sources: retarded part plus initial layer must sum to Coulomb."""
    x = np.array([[-0.3, 0.0, 0.0], [0.3, 0.1, 0.0], [0.0, 0.5, 0.2]])
    errs = []
    for dt in (EPS / 8, EPS / 16):
        h = _frozen(x, dt)
        cfg = SimConfig(dt=dt, n_particles=3)
        e = 0.0
        for t in (0.3, 0.5, 1.0):
            for i in range(3):
                c = _coulomb(x, h.weights, i)
                f = force_on_particle(i, t, h, kernel02, cfg)
                e = max(e, np.abs(f - c).max() / np.linalg.norm(c))
        errs.append(e)
    assert errs[1] <= 1e-4
    assert errs[0] / errs[1] >= 10.0


def test_windowed_equals_brute_force(kernel02):
    ens = PhaseEnsemble.standard_cloud(12, 5)
    a = integrate(ens, kernel02, 0.05, 20, windowed=True)
    b = integrate(ens, kernel02, 0.05, 20, windowed=False)
    assert np.abs(a.x - b.x).max() <= 1e-8
    assert np.abs(a.xi - b.xi).max() <= 1e-8


def test_force_on_particle_matches_node_force(kernel02):
    ens = PhaseEnsemble.standard_cloud(6, 2)
    h = integrate(ens, kernel02, 0.05, 10)
    cfg = SimConfig(dt=0.05, n_particles=6)
    for i in (0, 3):
        np.testing.assert_array_equal(force_on_particle(i, 0.25, h, kernel02, cfg),
                                      h.force[i, 5])


# -- trajectories -------------------------------------------------------------


def test_single_particle_at_rest_is_stationary(kernel02):
    ens = PhaseEnsemble.empirical(np.array([[0.1, -0.2, 0.3]]), np.zeros((1, 3)))
    h = integrate(ens, kernel02, 0.05, 20)
    assert np.all(h.x == h.x[:, :1]) and np.all(h.xi == 0)


def test_single_moving_particle_self_force_is_axial(kernel02):
    # launched out of its own static field: the only preferred axis is xi(0)
    xi0 = np.array([[0.3, 0.1, 0.0]])
    h = integrate(PhaseEnsemble.empirical(np.zeros((1, 3)), xi0), kernel02, 0.05, 20)
    u = xi0[0] / np.linalg.norm(xi0)
    perp = h.xi[0] - np.outer(h.xi[0] @ u, u)
    assert np.abs(perp).max() < 1e-14
    assert np.abs(h.x[0] - np.outer(h.x[0] @ u, u)).max() < 1e-14
    assert np.linalg.norm(h.xi[0, -1]) < np.linalg.norm(xi0)


def test_zero_kernel_free_streaming(kernel02):
    ens = PhaseEnsemble.standard_cloud(10, 3)
    z = zero_kernel(kernel02)
    h = integrate(ens, z, 0.05, 20)
    t = h.times
    exact = ens.x[:, None] + t[None, :, None] * velocity(ens.xi)[:, None]
    np.testing.assert_allclose(h.x, exact, atol=1e-12)
    assert np.all(h.xi == ens.xi[:, None])


def test_mirror_symmetry(kernel02):
    x = np.array([[0.3, 0.1, -0.2], [-0.3, -0.1, 0.2]])
    xi = np.array([[0.1, 0.2, 0.0], [-0.1, -0.2, 0.0]])
    h = integrate(PhaseEnsemble.empirical(x, xi), kernel02, 0.05, 20)
    np.testing.assert_allclose(h.x[0], -h.x[1], atol=1e-13)
    np.testing.assert_allclose(h.xi[0], -h.xi[1], atol=1e-13)


def test_permutation_equivariance(kernel02):
    ens = PhaseEnsemble.standard_cloud(8, 9)
    perm = np.random.default_rng(0).permutation(8)
    a = integrate(ens, kernel02, 0.05, 20)
    b = integrate(PhaseEnsemble.empirical(ens.x[perm], ens.xi[perm]), kernel02, 0.05, 20)
    np.testing.assert_allclose(b.x, a.x[perm], atol=1e-13)
    np.testing.assert_allclose(b.xi, a.xi[perm], atol=1e-13)


def test_like_charges_repel(kernel02):
    x = np.array([[-0.25, 0.0, 0.0], [0.25, 0.0, 0.0]])
    h = integrate(PhaseEnsemble.empirical(x, np.zeros_like(x)), kernel02, 0.05, 20)
    gap = np.linalg.norm(h.x[0] - h.x[1], axis=1)
    assert np.all(np.diff(gap) > 0)


def test_fourth_order_self_convergence(kernel02):
    ens = PhaseEnsemble.standard_cloud(16, 3)
    runs = [integrate(ens, kernel02, EPS / m, int(round(m / EPS))) for m in (8, 16, 32)]
    d = [np.abs(runs[i].x[:, -1] - runs[i + 1].x[:, -1]).max()
         + np.abs(runs[i].xi[:, -1] - runs[i + 1].xi[:, -1]).max() for i in range(2)]
    assert d[0] / d[1] >= 10.0


def test_trajectories_subluminal(kernel02):
    h = integrate(PhaseEnsemble.standard_cloud(16, 1), kernel02, 0.05, 20)
    assert np.linalg.norm(h.v[:, :h.n_nodes], axis=2).max() < 1.0


def test_self_interaction_variant(kernel02):
    ens = PhaseEnsemble.standard_cloud(6, 4)
    a = integrate(ens, kernel02, 0.05, 20, self_interaction=True)
    b = integrate(ens, kernel02, 0.05, 20, self_interaction=False)
    assert 0 < np.abs(a.x - b.x).max() < 0.1
    with pytest.raises(ValueError):
        integrate(PhaseEnsemble.standard_cloud(1, 0), kernel02, 0.05, 2,
                  self_interaction=False)
    w = PhaseEnsemble(ens.x, ens.xi, np.arange(1, 7) / 21.0)
    with pytest.raises(ValueError):
        integrate(w, kernel02, 0.05, 2, self_interaction=False)


def test_step_and_simulate_agree(kernel02):
    cfg = SimConfig(dt=0.05, t_end=0.5, n_particles=5, seed=2)
    full = simulate(cfg, kernel02)
    h = TrajectoryHistory.start(cfg.initial_ensemble(), cfg.dt, cfg.n_steps)
    for _ in range(cfg.n_steps):
        step(h, kernel02, cfg)
    np.testing.assert_array_equal(h.x[:, :h.n_nodes], full.x[:, :full.n_nodes])


def test_simulate_rejects_weighted(kernel02):
    cfg = SimConfig(dt=0.05, n_particles=3)
    e = PhaseEnsemble.standard_cloud(3, 0)
    with pytest.raises(ValueError):
        simulate(cfg, kernel02, PhaseEnsemble(e.x, e.xi, np.array([0.2, 0.3, 0.5])))


# -- history ------------------------------------------------------------------


def test_history_interpolation_hits_nodes(kernel02):
    h = integrate(PhaseEnsemble.standard_cloud(4, 0), kernel02, 0.05, 10)
    x, xi = h.state_at(0.25)
    assert np.array_equal(x, h.x[:, 5]) and np.array_equal(xi, h.xi[:, 5])
    xm, _ = h.state_at(0.275)
    assert np.abs(xm - 0.5 * (h.x[:, 5] + h.x[:, 6])).max() < 1e-3
    with pytest.raises(ValueError):
        h.state_at(0.6)


def test_history_roundtrip(tmp_path, kernel02):
    h = integrate(PhaseEnsemble.standard_cloud(4, 0), kernel02, 0.05, 10)
    p = h.save(tmp_path / "h.vmhs", tmp_path / "h.csv")
    g = TrajectoryHistory.load(p)
    K = h.n_nodes
    assert g.dt == h.dt and g.steps == h.steps and g.n_force == h.n_force
    assert np.array_equal(g.x[:, :K], h.x[:, :K])
    assert np.array_equal(g.xi[:, :K], h.xi[:, :K])
    assert np.array_equal(g.force[:, :K], h.force[:, :K])
    head = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert head.startswith("step,pid,x1,x2,x3,xi1,xi2,xi3")
