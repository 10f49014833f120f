import numpy as np
import pytest

from vmmf.dynamics import PhaseEnsemble, TrajectoryHistory, integrate
from vmmf.fields import (FieldGrid, coulomb_field, deposit_stencil, divergence_B,
                         energy_exchange_residual, field_eval, gauge_residual,
                         load_field_grid, power_density, pseudo_energy, sample_grid,
                         save_field_grid)

EPS = 0.2


def _frozen(x, dt, T=1.0):
    x = np.atleast_2d(np.asarray(x, float))
    steps = int(round(T / dt))
    K = steps + 1
    N = len(x)
    return TrajectoryHistory(dt, np.full(N, 1 / N), np.repeat(x[:, None], K, 1),
                             np.zeros((N, K, 3)), np.zeros((N, K, 3)), steps, K)


@pytest.fixture(scope="module")
def cloud(kernel02):
    return integrate(PhaseEnsemble.standard_cloud(6, 2), kernel02, EPS / 16, 80)


# -- grids --------------------------------------------------------------------


def test_cube_geometry():
    g = FieldGrid.cube(1.03, 0.1)
    assert g.shape == (21, 21, 21)
    assert g.contains_ball(1.03) and not g.contains_ball(1.2)
    assert np.allclose(g.points().mean(axis=0), 0.0)
    with pytest.raises(ValueError):
        FieldGrid([0, 0, 0], [1, 1, -1], 0.1)


def test_exterior_inverse_quartic_bracketed():
    a = 1.3
    I = FieldGrid.cube(a, 0.1).exterior_inverse_quartic()
    assert 4 * np.pi / (a * np.sqrt(3)) < I < 4 * np.pi / a
    # scale invariance: I(a) a is a pure number
    J = FieldGrid.cube(2 * a, 0.1).exterior_inverse_quartic()
    assert I * a == pytest.approx(J * 2 * a, rel=1e-10)


def test_exterior_coulomb_energy_of_centred_charge():
    g = FieldGrid.cube(1.0, 0.1)
    ext = g.exterior_coulomb_energy(np.zeros((1, 3)), np.ones(1), n_theta=400, n_phi=800)
    assert ext == pytest.approx(g.exterior_inverse_quartic() / (32 * np.pi**2), rel=1e-12)
    assert g.exterior_coulomb_energy(np.zeros((0, 3)), np.zeros(0)) == 0.0


def test_deposit_stencil_partition_of_unity():
    g = FieldGrid.cube(1.0, 0.1)
    x = np.random.default_rng(0).uniform(-0.7, 0.7, (20, 3))
    nodes, w = deposit_stencil(g, x)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-13)
    # cubic Lagrange weights reproduce linear moments exactly
    np.testing.assert_allclose(np.einsum("nk,nkd->nd", w, nodes), x, atol=1e-13)


# -- static sources -------------------------------------------------------------


def test_initial_fields_are_smoothed_coulomb(kernel02):
    x = np.array([[-0.3, 0.0, 0.0], [0.3, 0.1, 0.0]])
    h = _frozen(x, EPS / 8)
    p = np.array([[0.0, 0.8, 0.0], [1.2, -0.4, 0.3], [0.05, 0.02, 0.0]])
    E, B, phi, A = field_eval(h, kernel02, 0.0, p)
    ref = sum(0.5 * kernel02.layer(0.0, np.linalg.norm(p - xj, axis=1))[0] for xj in x)
    np.testing.assert_allclose(phi, ref, rtol=1e-13)
    assert np.all(B == 0) and np.all(A == 0)
    far = np.linalg.norm(p[:, None] - x[None], axis=2).min(axis=1) > 2 * EPS
    np.testing.assert_allclose(E[far], coulomb_field(p[far], x, h.weights), rtol=1e-12)


def test_static_sources_stay_coulomb(kernel02):
    x = np.array([[-0.3, 0.0, 0.0], [0.3, 0.1, 0.0]])
    h = _frozen(x, EPS / 16)
    p = np.array([[0.0, 0.8, 0.0], [1.2, -0.4, 0.3]])
    for t in (0.5, 1.0):
        E, B, _, A = field_eval(h, kernel02, t, p)
        ref = coulomb_field(p, x, h.weights)
        assert np.abs(E - ref).max() <= 1e-4 * np.abs(ref).max()
        assert np.all(B == 0) and np.all(A == 0)


def test_static_gauge_residual_vanishes(kernel02):
    h = _frozen([[-0.3, 0.0, 0.0], [0.3, 0.1, 0.0]], EPS / 8)
    g = FieldGrid.cube(0.8, EPS / 4)
    assert gauge_residual(h, kernel02, 0.5, g, substeps=4) <= 1e-9


def test_static_self_energy(kernel02, kernel02_single):
    """Field energy of one smoothed charge at rest is half its potential at 0."""
    h = integrate(PhaseEnsemble.empirical(np.zeros((1, 3)), np.zeros((1, 3))), kernel02,
                  0.025, 40)
    W0 = 0.5 * kernel02.layer(0.0, 0.0)[0]
    hh = EPS / 4
    g = FieldGrid.cube(2 + EPS + hh, hh)
    for t in (0.0, 0.5, 1.0):
        kin, fld, tot = pseudo_energy(h, kernel02_single, t, g)
        assert kin == 1.0
        assert fld == pytest.approx(W0, rel=2e-3)


def test_pseudo_energy_guards(kernel02, kernel02_single):
    h = _frozen([[0.0, 0.0, 0.0]], EPS / 8)
    with pytest.raises(ValueError):
        pseudo_energy(h, kernel02, 0.5, FieldGrid.cube(2.0, 0.1))
    with pytest.raises(ValueError, match="radius"):
        pseudo_energy(h, kernel02_single, 0.5, FieldGrid.cube(0.6, 0.1))
    with pytest.raises(ValueError):
        pseudo_energy(h, kernel02_single, 0.5, FieldGrid.cube(2.0, 0.1), tail="none")
    a = pseudo_energy(h, kernel02_single, 0.5, FieldGrid.cube(2.0, 0.1), tail="monopole")
    b = pseudo_energy(h, kernel02_single, 0.5, FieldGrid.cube(2.0, 0.1))
    assert a[2] == pytest.approx(b[2], rel=1e-6)


def test_static_pair_energy_constant(kernel02_single):
    h = _frozen([[-0.3, 0.0, 0.0], [0.3, 0.0, 0.0]], 0.025)
    g = FieldGrid.cube(0.3 + 1 + EPS + 0.1, 0.1)
    W = [pseudo_energy(h, kernel02_single, t, g)[2] for t in (0.0, 0.5, 1.0)]
    assert max(W) - min(W) <= 5e-3 * W[0]


def test_static_power_is_zero(kernel02):
    h = _frozen([[-0.3, 0.0, 0.0], [0.3, 0.0, 0.0]], 0.025)
    assert power_density(h, kernel02, 0.5, FieldGrid.cube(1.0, 0.1)) == 0.0


# -- moving sources -------------------------------------------------------------


def test_potential_relations(cloud, kernel02):
    p = np.array([[0.3, 0.2, -0.1], [-0.2, 0.5, 0.3]])
    t, d, dt = 0.5, 1e-4, cloud.dt
    E, B, phi, A = field_eval(cloud, kernel02, t, p)
    grad = lambda k: np.stack([(field_eval(cloud, kernel02, t, p + d * u)[k]
                                - field_eval(cloud, kernel02, t, p - d * u)[k]) / (2 * d)
                               for u in np.eye(3)], axis=-1)
    gphi = grad(2)
    dA = (field_eval(cloud, kernel02, t + dt, p)[3]
          - field_eval(cloud, kernel02, t - dt, p)[3]) / (2 * dt)
    np.testing.assert_allclose(E, -gphi - dA, atol=1e-3 * np.abs(E).max())
    J = grad(3)  # J[p, i, j] = d A_i / d x_j
    curl = np.stack([J[:, 2, 1] - J[:, 1, 2], J[:, 0, 2] - J[:, 2, 0],
                     J[:, 1, 0] - J[:, 0, 1]], axis=1)
    np.testing.assert_allclose(B, curl, atol=1e-7)
    assert np.abs(B).max() > 0


def test_divergence_free_B(cloud, kernel02):
    s = sample_grid(cloud, kernel02, 0.5, FieldGrid.cube(1.0, EPS / 4))
    div, bmax = divergence_B(s)
    assert bmax > 0 and div <= 1e-2 * bmax / (EPS / 4)


def test_cloud_gauge_residual(cloud, kernel02):
    g = FieldGrid.cube(1.4, EPS / 4)
    r = gauge_residual(cloud, kernel02, 0.5, g)
    assert 0 < r <= 5e-2


def test_exchange_residual_needs_bracket(cloud, kernel02):
    g = FieldGrid.cube(1.0, 0.1)
    with pytest.raises(ValueError):
        energy_exchange_residual(cloud, kernel02, 0.0, g)
    with pytest.raises(ValueError):
        energy_exchange_residual(cloud, kernel02, cloud.t_end, g)
    assert energy_exchange_residual(cloud, kernel02, 0.5, g) < 1e-2


def test_substeps_need_node_time(cloud, kernel02):
    with pytest.raises(ValueError):
        field_eval(cloud, kernel02, 0.51, np.zeros((1, 3)), substeps=4)


def test_field_grid_roundtrip(tmp_path, cloud, kernel02):
    s = sample_grid(cloud, kernel02, 0.5, FieldGrid.cube(0.6, 0.2))
    save_field_grid(s, tmp_path / "f.vmfg", csv_prefix=str(tmp_path / "f"))
    g = load_field_grid(tmp_path / "f.vmfg")
    assert g.t == 0.5 and g.shape == s.shape
    for k in ("phi", "A", "E", "B"):
        assert np.array_equal(g.samples[k], s.samples[k])
    csvs = list(tmp_path.glob("f_z*.csv"))
    assert len(csvs) == 1
    rows = csvs[0].read_text().splitlines()
    assert rows[0].startswith("x,y,phi") and len(rows) == 1 + 6 * 6
    with pytest.raises(ValueError):
        (tmp_path / "bad").write_bytes(b"XXXX")
        load_field_grid(tmp_path / "bad")
