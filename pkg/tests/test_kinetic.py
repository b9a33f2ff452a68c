import numpy as np
import pytest

from nanowire import kinetic as kn
from nanowire.grids import MomentumGrid

ENERGIES = np.array([0.0, 0.3])
MASSES = np.array([1.0, 1.2])


@pytest.fixture(scope="module")
def pgrid():
    return MomentumGrid(n_p=64, p_max=8.0)


@pytest.fixture(scope="module")
def table(pgrid):
    x = np.linspace(0, 4, 40)
    v_nn = np.tile(0.4 * np.exp(-(x - 2) ** 2 / 0.5), (2, 1))
    return kn.build_maxwellians(ENERGIES, MASSES, v_nn, pgrid)


def tabulated_alpha(pgrid, n_bands=2):
    s = 1.0 + 0.3 * np.tanh(pgrid.p)
    base = 0.9 * np.outer(s, s)
    vals = np.empty((n_bands, n_bands, pgrid.n_p, pgrid.n_p))
    for n in range(n_bands):
        for m in range(n_bands):
            vals[n, m] = base + 0.2 + 0.05 * abs(n - m)
    return kn.TabulatedAlpha(vals)


def test_maxwellian_normalization(table):
    assert table.truncation_defect < 1e-8
    assert np.abs(table.plain_m - table.z[None, :, None] * table.script_m).max() < 1e-18


def test_maxwellian_single_free_band_gaussian(pgrid):
    defects = []
    for pmax in (4.0, 6.0, 8.0):
        pg = MomentumGrid(n_p=129, p_max=pmax)
        t = kn.build_maxwellians(np.array([0.0]), np.array([1.0]),
                                 np.zeros((1, 2)), pg, defect_threshold=1.0)
        defects.append(t.truncation_defect)
    assert defects[0] > defects[1] > defects[2]
    assert defects[2] < 1e-12


def test_maxwellian_even_in_momentum(table):
    assert np.array_equal(table.script_m, table.script_m[:, :, ::-1])


def test_maxwellian_defect_threshold_error():
    pg = MomentumGrid(n_p=9, p_max=2.0)
    with pytest.raises(ValueError, match="p_max"):
        kn.build_maxwellians(np.array([0.0]), np.array([1.0]),
                             np.zeros((1, 2)), pg, defect_threshold=1e-8)


def test_alpha_validation(pgrid):
    bad = np.ones((2, 2, pgrid.n_p, pgrid.n_p))
    bad[0, 1, 3, 5] = 2.0  # breaks the exchange symmetry
    with pytest.raises(ValueError, match="symmetric"):
        kn.TabulatedAlpha(bad)
    with pytest.raises(ValueError, match="positive"):
        kn.TabulatedAlpha(np.zeros((2, 2, 4, 4)))
    with pytest.raises(ValueError, match="tau"):
        kn.ConstantAlpha(0.0)


def test_collision_annihilates_equilibria(table, pgrid):
    ns = 1.0 + 0.5 * np.sin(np.linspace(0, np.pi, 40))
    f_eq = ns[None, :, None] * table.script_m
    for alpha in (kn.ConstantAlpha(1.0), tabulated_alpha(pgrid)):
        q = kn.collision_apply(f_eq, table, alpha, pgrid)
        assert np.abs(q).max() < 1e-15


def test_collision_conserves_mass(table, pgrid):
    rng = np.random.default_rng(1)
    f = rng.random((2, 40, 64)) * table.script_m * 3
    for alpha in (kn.ConstantAlpha(0.7), tabulated_alpha(pgrid)):
        q = kn.collision_apply(f, table, alpha, pgrid)
        defect = np.abs(pgrid.integrate(q, axis=-1).sum(axis=0)).max()
        assert defect < 1e-14


def _weighted_symmetrization(mat, m_slice, wq):
    lam_w = (np.broadcast_to(wq, m_slice.shape) / m_slice).reshape(-1)
    s = np.sqrt(lam_w)
    return mat * s[:, None] / s[None, :]


@pytest.mark.parametrize("alpha_kind", ["constant", "tabulated"])
def test_collision_matrix_structure(pgrid, alpha_kind):
    # coarse dense assembly: 2 bands x 17 momentum nodes
    pg = MomentumGrid(n_p=17, p_max=7.0)
    v_nn = np.zeros((2, 1))
    t = kn.build_maxwellians(ENERGIES, MASSES, v_nn, pg)
    alpha = kn.ConstantAlpha(1.0) if alpha_kind == "constant" else tabulated_alpha(pg)
    mat = kn.assemble_collision_matrix(t, alpha, pg, ix=0)

    sym = _weighted_symmetrization(mat, t.script_m[:, 0, :], pg.w)
    assert np.abs(sym - sym.T).max() < 1e-12

    ritz = np.linalg.eigvalsh(0.5 * (sym + sym.T))
    assert ritz.max() <= 1e-12                  # nonpositive spectrum
    assert ritz[-2] <= -alpha.alpha_min + 1e-8  # spectral gap at alpha_min

    # kernel spanned by the equilibria
    kernel = mat @ t.script_m[:, 0, :].reshape(-1)
    assert np.abs(kernel).max() < 1e-14


def test_collision_matrix_matches_apply(table, pgrid):
    alpha = tabulated_alpha(pgrid)
    mat = kn.assemble_collision_matrix(table, alpha, pgrid, ix=3)
    rng = np.random.default_rng(2)
    f = rng.random((2, 40, 64)) * table.script_m
    q = kn.collision_apply(f, table, alpha, pgrid)
    assert np.abs(mat @ f[:, 3, :].reshape(-1)
                  - q[:, 3, :].reshape(-1)).max() < 1e-13


def test_theta_constant_alpha_closed_form(table, pgrid):
    tau = 1.3
    theta = kn.solve_theta(table, kn.ConstantAlpha(tau), pgrid)
    velocity = pgrid.p[None, :] / MASSES[:, None]
    closed = tau * velocity[:, None, :] * table.script_m
    assert np.abs(theta.theta - closed).max() < 1e-10

    from nanowire.electrostatics import band_weights
    w = band_weights(ENERGIES, table.v_nn)
    d_closed = tau * np.sum(w / MASSES[:, None], axis=0)
    assert np.abs(theta.d - d_closed).max() < 1e-8
    assert np.all(theta.d >= 0)


def test_theta_single_free_band_gaussian_moment():
    pg = MomentumGrid(n_p=64, p_max=8.0)
    t = kn.build_maxwellians(np.array([0.0]), np.array([1.0]), np.zeros((1, 2)), pg)
    theta = kn.solve_theta(t, kn.ConstantAlpha(1.0), pg)
    assert np.abs(theta.d - 1.0).max() < 1e-6


def test_theta_zero_mean_constraint(table, pgrid):
    theta = kn.solve_theta(table, tabulated_alpha(pgrid), pgrid)
    mean = pgrid.integrate(theta.theta, axis=-1).sum(axis=0)
    assert np.abs(mean).max() < 1e-12
    assert np.all(theta.d >= 0)


def test_theta_velocity_ratio_bounds(table, pgrid):
    tau = 0.9
    theta = kn.solve_theta(table, kn.ConstantAlpha(tau), pgrid)
    ratio = np.abs(theta.theta / table.script_m)
    lower = tau * np.abs(pgrid.p)[None, None, :] / MASSES.max()
    upper = tau * np.abs(pgrid.p)[None, None, :] / MASSES.min()
    assert np.all(ratio >= lower - 1e-9)
    assert np.all(ratio <= upper + 1e-9)


@pytest.fixture()
def stepping_setup(pgrid):
    x = np.linspace(0, 4, 40)
    v_nn = np.full((2, 40), 0.2)
    t = kn.build_maxwellians(ENERGIES, MASSES, v_nn, pgrid)
    cfg = kn.KineticConfig(eta=0.5, alpha=kn.ConstantAlpha(1.0), n_bands=2,
                           pgrid=pgrid, x=x, boundary="periodic")
    return t, cfg, x


def _cfl_dt(cfg, table, safety=0.5):
    v_max = (np.abs(cfg.pgrid.p) / table.masses.min()).max()
    return safety * cfg.eta * cfg.h_x / v_max


def test_advance_equilibrium_fixed_point(stepping_setup):
    t, cfg, _ = stepping_setup
    f0 = kn.DistributionFunction(f=2.0 * t.script_m.copy())
    out = kn.advance_boltzmann(f0, t, cfg, _cfl_dt(cfg, t))
    assert np.abs(out.f - f0.f).max() / f0.f.max() < 1e-13


def test_advance_mass_conservation_periodic(stepping_setup):
    t, cfg, _ = stepping_setup
    rng = np.random.default_rng(0)
    f = kn.DistributionFunction(f=rng.random((2, 40, 64)) * t.script_m * 2)
    m0 = cfg.pgrid.integrate(f.f, axis=-1).sum()
    for _ in range(5):
        f = kn.advance_boltzmann(f, t, cfg, _cfl_dt(cfg, t))
    m1 = cfg.pgrid.integrate(f.f, axis=-1).sum()
    assert abs(m1 - m0) <= 1e-12 * abs(m0)


def test_advance_cfl_guard(stepping_setup):
    t, cfg, _ = stepping_setup
    f = kn.DistributionFunction(f=t.script_m.copy())
    with pytest.raises(ValueError, match="CFL"):
        kn.advance_boltzmann(f, t, cfg, 100.0)


def test_advance_tabulated_collision_path(pgrid):
    x = np.linspace(0, 2, 12)
    v_nn = np.full((2, 12), 0.1)
    t = kn.build_maxwellians(ENERGIES, MASSES, v_nn, pgrid)
    cfg = kn.KineticConfig(eta=0.5, alpha=tabulated_alpha(pgrid), n_bands=2,
                           pgrid=pgrid, x=x, boundary="periodic")
    rng = np.random.default_rng(3)
    f = kn.DistributionFunction(f=rng.random((2, 12, 64)) * t.script_m * 2)
    m0 = cfg.pgrid.integrate(f.f, axis=-1).sum()
    out = kn.advance_boltzmann(f, t, cfg, _cfl_dt(cfg, t))
    m1 = cfg.pgrid.integrate(out.f, axis=-1).sum()
    assert abs(m1 - m0) <= 1e-11 * abs(m0)
    assert np.all(out.f >= 0)


def test_relaxation_rate_matches_gap(stepping_setup):
    t, cfg, x = stepping_setup
    pert = t.script_m * (1 + 0.2 * np.tanh(cfg.pgrid.p)[None, None, :])
    f = kn.DistributionFunction(f=pert)
    h_x = x[1] - x[0]
    dev0 = kn.weighted_norm(f.f - kn.kernel_projection(f.f, t, cfg.pgrid),
                            t, h_x, cfg.pgrid)
    dt, steps = 0.002, 40
    for _ in range(steps):
        f = kn.advance_boltzmann(f, t, cfg, dt, transport=False)
    dev1 = kn.weighted_norm(f.f - kn.kernel_projection(f.f, t, cfg.pgrid),
                            t, h_x, cfg.pgrid)
    slope = -np.log(dev1 / dev0) / (steps * dt)
    expected = 1.0 / cfg.eta**2  # alpha_min / eta^2
    assert 0.9 * expected <= slope <= 1.1 * expected


def test_moments_density_and_equilibrium_current(stepping_setup):
    t, cfg, x = stepping_setup
    ns = 1.0 + 0.5 * np.sin(np.pi * x / 4)
    f = kn.DistributionFunction(f=ns[None, :, None] * t.script_m)
    n_out, j_out = kn.moments(f, t, cfg)
    assert np.abs(n_out - ns * t.mass).max() < 1e-13
    assert np.all(j_out == 0.0)


def test_moments_odd_perturbation_current_oracle(stepping_setup):
    t, cfg, _ = stepping_setup
    c = 0.01
    p = cfg.pgrid.p
    f = kn.DistributionFunction(f=(1 + c * p)[None, None, :] * t.script_m)
    _, j_out = kn.moments(f, t, cfg)
    velocity = p[None, :] / MASSES[:, None]
    oracle = (c / cfg.eta) * cfg.pgrid.integrate(
        velocity[:, None, :] * p[None, None, :] * t.script_m, axis=-1).sum(axis=0)
    assert j_out == pytest.approx(oracle, rel=1e-12)


def test_kernel_projection_preserves_density(stepping_setup):
    t, cfg, _ = stepping_setup
    rng = np.random.default_rng(5)
    f = rng.random((2, 40, 64)) * t.script_m
    proj = kn.kernel_projection(f, t, cfg.pgrid)
    n_f = cfg.pgrid.integrate(f, axis=-1).sum(axis=0)
    n_p = cfg.pgrid.integrate(proj, axis=-1).sum(axis=0)
    assert np.abs(n_f - n_p).max() < 1e-13


@pytest.fixture(scope="module")
def small_experiment():
    pg = MomentumGrid(n_p=32, p_max=6.0)
    x = np.linspace(0.0, 6.0, 101)
    c = 3.0
    v_nn = np.tile(0.4 * np.exp(-(x - c) ** 2 / 0.3), (2, 1))
    n0 = np.where(np.abs(x - c) < 0.4,
                  np.cos(np.pi * (x - c) / 0.8) ** 2, 0.0)
    return kn.DiffusiveLimitSetup(energies=ENERGIES, masses=MASSES, v_nn=v_nn,
                                  x=x, pgrid=pg, tau=1.0, n0=n0, t_final=0.05,
                                  dd_steps=500)


def test_experiment_errors_decrease(small_experiment):
    res = kn.diffusive_limit_experiment(small_experiment, [0.5, 0.25, 0.125])
    errs = [r["error"] for r in res["rows"]]
    assert errs[0] > errs[1] > errs[2]
    assert 0.5 <= res["hilbert_ratio"] <= 2.0
    assert all(r["leakage"] < 1e-6 for r in res["rows"])


def test_experiment_rejects_unsorted_ladder(small_experiment):
    with pytest.raises(ValueError, match="decreasing"):
        kn.diffusive_limit_experiment(small_experiment, [0.25, 0.5])


def test_experiment_negative_control_without_collisions(small_experiment):
    # free transport at a moderate mean free path has to disagree with the
    # diffusion solution by a wide margin
    state, t, cfg, _ = kn._run_kinetic(small_experiment, 0.5, collision=False)
    n_eta, _ = kn.moments(state, t, cfg)
    n_dd = kn._run_drift_diffusion(small_experiment)
    err = np.sqrt(small_experiment.h_x * np.sum((n_eta - n_dd) ** 2))
    res = kn.diffusive_limit_experiment(small_experiment, [0.5])
    assert err > 3 * res["rows"][0]["error"]
