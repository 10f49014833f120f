import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import qmc

from oracles import kernel_sphere_mc
from vmmf.kernels import (build_kernel_tables, build_mollifier, eval_initial_layer,
                          eval_kernel, lipschitz_estimate, load_kernel, save_kernel,
                          zero_kernel)


def _chi_unit(u):
    u = np.asarray(u, float)
    w = 1.0 - u * u
    out = np.zeros_like(u)
    m = w > 0
    out[m] = np.exp(-1.0 / w[m])
    return out


def _chi(eps):
    """Independent normalized 3-D bump of radius eps."""
    norm = 4 * np.pi * integrate.quad(lambda u: u * u * _chi_unit(np.array([u]))[0], 0, 1,
                                      epsabs=1e-15)[0]
    return lambda r: _chi_unit(np.asarray(r) / eps) / (norm * eps**3)


def _psi_qmc(eps, r0, m=18):
    chi = _chi(eps)
    pts = qmc.Sobol(3, scramble=True, seed=1).random_base2(m) * 2 * eps - eps
    x = np.array([r0, 0.0, 0.0])
    vals = chi(np.linalg.norm(pts, axis=1)) * chi(np.linalg.norm(pts - x, axis=1))
    return vals.mean() * (2 * eps) ** 3


# -- mollifier profile ------------------------------------------------------


@pytest.mark.parametrize("r0", [0.0, 0.05, 0.2])
def test_psi_matches_qmc_autocorrelation(mol02, r0):
    ref = _psi_qmc(0.2, r0)
    assert mol02.psi(r0) == pytest.approx(ref, rel=5e-5)


def test_profiles_have_unit_mass(mol02):
    assert mol02.double.mass() == pytest.approx(1.0, abs=1e-13)
    assert mol02.single.mass() == pytest.approx(1.0, abs=1e-13)


def test_profile_supports(mol02):
    assert mol02.single.support == pytest.approx(0.2)
    assert mol02.double.support == pytest.approx(0.4)
    assert mol02.psi(0.4) == 0.0 and mol02.psi(0.5) == 0.0
    assert mol02.chi(0.2) == 0.0


def test_mollifier_rejects_bad_input():
    with pytest.raises(ValueError):
        build_mollifier(0.0)
    with pytest.raises(ValueError):
        build_mollifier(0.1, chi_family="gaussian")


def test_quartic_family_normalized():
    m = build_mollifier(0.15, chi_family="quartic")
    assert m.double.mass() == pytest.approx(1.0, abs=1e-13)
    k = build_kernel_tables(m, 1.0)
    r = np.linspace(0.0, 1.0 + 0.3, 4001)
    Y, _, _ = k.radial(np.full_like(r, 1.0), r)
    assert integrate.simpson(4 * np.pi * r * r * Y, x=r) == pytest.approx(1.0, rel=1e-4)


# -- retarded kernel ---------------------------------------------------------


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_mass_law(kernel01, t):
    S = kernel01.support
    f = lambda r: 4 * np.pi * r * r * kernel01.radial(t, r)[0]
    mass = integrate.quad(f, max(t - S, 0.0), t + S, points=[t], epsabs=1e-13,
                          epsrel=1e-12, limit=400)[0]
    assert abs(mass - t) <= 1e-3 * t


@given(t=st.floats(0.0, 2.0), gap=st.floats(0.0, 1.0), side=st.sampled_from([-1, 1]))
@settings(max_examples=200, deadline=None)
def test_shell_support_exact(kernel01, t, gap, side):
    S = kernel01.support
    r = t + side * (S + gap)
    if r < 0:
        return
    Y, Yt, Yr = kernel01.radial(t, r)
    assert abs(Y) <= 1e-15 and abs(Yt) <= 1e-15 and abs(Yr) <= 1e-15


def test_monte_carlo_oracle(kernel01):
    rng = np.random.default_rng(2024)
    S = kernel01.support
    psi = lambda d: kernel01.profile.density(d)
    worst = 0.0
    for i in range(50):
        t = rng.uniform(0.3, 2.0)
        r = t + rng.uniform(-0.75, 0.75) * S
        ref = kernel_sphere_mc(psi, S, t, r, seed=i)
        val = kernel01.radial(t, r)[0]
        worst = max(worst, abs(val - ref) / abs(ref))
    assert worst <= 1e-3


def test_kernel_nonnegative_and_bounded(kernel02):
    t = kernel02.ts[:, None] * np.ones_like(kernel02.rs)[None, :]
    assert kernel02.tables[0].min() >= -1e-14
    assert np.abs(kernel02.tables[0]).max() == pytest.approx(kernel02.supnorms["Y"])
    Y, _, _ = kernel02.radial(t, kernel02.rs[None, :] * np.ones_like(t))
    np.testing.assert_allclose(Y, kernel02.tables[0], rtol=0, atol=1e-14)


def test_derivatives_match_differences(kernel02):
    h = 1e-5
    for t, r in [(0.5, 0.45), (0.8, 0.9), (0.3, 0.1), (0.6, 0.75)]:
        _, Yt, Yr = kernel02.radial(t, r)
        ft = (kernel02.radial(t + h, r)[0] - kernel02.radial(t - h, r)[0]) / (2 * h)
        fr = (kernel02.radial(t, r + h)[0] - kernel02.radial(t, r - h)[0]) / (2 * h)
        assert Yt == pytest.approx(ft, rel=1e-5, abs=1e-7)
        assert Yr == pytest.approx(fr, rel=1e-5, abs=1e-7)


def test_small_r_limit_continuous(kernel02):
    t = 0.1
    Y0 = kernel02.radial(t, 0.0)[0]
    Y1 = kernel02.radial(t, 1e-7)[0]
    Y2 = kernel02.radial(t, 5e-3)[0]
    assert Y1 == pytest.approx(Y0, rel=1e-9)
    assert abs(Y2 - Y0) < 1e-2 * Y0


def test_eval_kernel_vector_form(kernel02):
    d = np.array([0.3, -0.2, 0.4])
    r = np.linalg.norm(d)
    Y, Yt, g = eval_kernel(kernel02, 0.5, d)
    Yr = kernel02.radial(0.5, r)[2]
    np.testing.assert_allclose(g, Yr * d / r, rtol=1e-14)
    assert np.all(eval_kernel(kernel02, 0.5, np.zeros(3))[2] == 0)
    with pytest.raises(ValueError):
        eval_kernel(kernel02, 1.5, d)


# -- initial layer ------------------------------------------------------------


def test_layer_at_zero_is_smoothed_coulomb(kernel02, mol02):
    S = mol02.double.support
    for r in (0.05, 0.15, 0.3, 0.5):
        a = integrate.quad(lambda s: s * s * mol02.psi(s), 0, r)[0] / r
        b = integrate.quad(lambda s: s * mol02.psi(s), r, S)[0] if r < S else 0.0
        assert kernel02.layer(0.0, r)[0] == pytest.approx(a + b, rel=1e-10)


def test_layer_inside_zero_outside_coulomb(kernel02):
    S = kernel02.support
    t = 0.8
    m_in, mr_in = kernel02.layer(t, np.array([0.0, 0.1, t - S]))
    assert np.all(m_in == 0.0) and np.all(mr_in == 0.0)
    r = np.array([t + S, 1.5, 3.0])
    m_out, mr_out = kernel02.layer(t, r)
    np.testing.assert_allclose(m_out, 1 / (4 * np.pi * r), rtol=1e-12)
    np.testing.assert_allclose(mr_out, -1 / (4 * np.pi * r * r), rtol=1e-12)


def test_layer_force_direction(kernel02):
    d = np.array([1.5, 0.0, 0.0])
    F = eval_initial_layer(kernel02, 0.5, d)
    np.testing.assert_allclose(F, d / (4 * np.pi * 1.5**3), rtol=1e-12)
    assert np.all(eval_initial_layer(kernel02, 0.5, np.zeros(3)) == 0)


# -- tables, suprema, Lipschitz ---------------------------------------------


def test_table_spacing_guard(mol02):
    with pytest.raises(ValueError):
        build_kernel_tables(mol02, 1.0, dt=0.11)
    with pytest.raises(ValueError):
        build_kernel_tables(mol02, -1.0)
    with pytest.raises(ValueError):
        build_kernel_tables(mol02, 1.0, family="triple")


def test_families_differ_in_support(kernel02, kernel02_single):
    assert kernel02_single.support == pytest.approx(kernel02.support / 2)
    assert kernel02_single.radial(0.5, 0.5 + 0.3)[0] == 0.0
    assert kernel02.radial(0.5, 0.5 + 0.3)[0] > 0.0


def test_lipschitz_estimate(kernel02):
    z = zero_kernel(kernel02)
    assert lipschitz_estimate(z, 1.0) == 0.0
    assert lipschitz_estimate(z, 1.0, streaming=True) == 2.0
    L = lipschitz_estimate(kernel02, 1.0)
    sn = kernel02.supnorms
    assert L >= 3 * sn["hess_Y"]
    assert lipschitz_estimate(kernel02, 0.5) <= L
    with pytest.raises(ValueError):
        lipschitz_estimate(kernel02, 2.0)


def test_save_load_roundtrip(tmp_path, kernel02):
    p = tmp_path / "k.vmkr"
    save_kernel(kernel02, p)
    assert p.read_bytes()[:4] == b"VMKR"
    side = json.loads((tmp_path / "k.vmkr.json").read_text())
    assert side["epsilon"] == 0.2 and "hess_Y" in side["supnorms"]
    k = load_kernel(p)
    assert np.array_equal(k.tables, kernel02.tables)
    assert np.array_equal(k.prof, kernel02.prof)
    assert k.family == kernel02.family and k.t_max == kernel02.t_max
    assert k.supnorms["Y"] == kernel02.supnorms["Y"]


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.vmkr"
    p.write_bytes(b"nope" + bytes(100))
    with pytest.raises(ValueError):
        load_kernel(p)
