import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from ltesounder.errors import ConfigError, NumericalError
from ltesounder.manifold import ArrayManifold, StructuralParams, polarimetric_basis, wrap_angle
from ltesounder.rimax import (
    RimaxConfig,
    SpEstimate,
    blue_gamma,
    correlation_objective,
    damped_step,
    dmc_spectrum,
    estimate_dmc,
    initialize_paths,
    jacobian,
    lm_step,
    loglik,
    model,
    path_records,
    refine,
    rimax_estimate,
    score_and_fim,
    whiten,
    whitener,
)
from ltesounder.synth import DmcParams, complex_normal, dmc_correlation, dmc_covariance_rf, draw_dmc

SPACING = 45e3
N_F = 16


def _est(L=2, seed=0):
    r = np.random.default_rng(seed)
    sp = StructuralParams(r.uniform(0, 2 * np.pi, L), r.uniform(-np.pi, np.pi, L),
                          r.uniform(0.4, 2.7, L), SPACING)
    return SpEstimate(sp, complex_normal(r, L, 1.0), complex_normal(r, L, 0.3))


def _noisy(est, man, sigma2, rng, v=0.0, n_f=N_F):
    z = model(est, v, man, n_f)
    return z + complex_normal(rng, z.shape, sigma2)


# dense oracles: explicit Kronecker covariance and stacked basis

def _dense_R(d, M, n_f):
    return np.kron(np.eye(M), dmc_covariance_rf(d, n_f) + d.sigma2 * np.eye(n_f))


def _dense_B(sp, man, n_f, v=0.0):
    B_RH, B_RV, B_f = polarimetric_basis(sp, v, man, n_f)
    cols = [np.kron(B_RH[:, l], B_f[:, l]) for l in range(sp.L)]
    cols += [np.kron(B_RV[:, l], B_f[:, l]) for l in range(sp.L)]
    return np.stack(cols, axis=1)


def _inv_sqrt(R):
    return np.linalg.inv(sla.sqrtm(R))


# --- whitening -------------------------------------------------------------------

def test_whiten_white_case(rng):
    z = complex_normal(rng, (3, 8))
    np.testing.assert_allclose(whiten(z, DmcParams(sigma2=4.0)), z / 2.0, atol=1e-14)


def test_whiten_matches_dense(rng):
    d = DmcParams(alpha1=1.3, beta_d=0.4, tau_d=0.2, sigma2=0.1)
    z = complex_normal(rng, (2, 8))
    dense = _inv_sqrt(_dense_R(d, 2, 8)) @ z.ravel()
    np.testing.assert_allclose(whiten(z, d).ravel(), dense, atol=1e-10)
    assert np.isclose(whitener(d, 8).logdet, np.linalg.slogdet(dmc_covariance_rf(d, 8) + 0.1 * np.eye(8))[1])


def test_whitened_dmc_identity_covariance(rng):
    d = DmcParams(alpha1=1.0, beta_d=0.3, tau_d=0.1, sigma2=0.05)
    x = draw_dmc(d, 10_000, 8, rng) + complex_normal(rng, (10_000, 8), d.sigma2)
    w = whiten(x, d)
    C = w.T @ w.conj() / w.shape[0]
    assert np.abs(C - np.eye(8)).max() < 0.05


def test_whiten_rejects_singular():
    with pytest.raises(NumericalError, match="smallest eigenvalue"):
        whiten(np.ones((2, 4)), DmcParams())


def test_circulant_spectrum_is_dft_diagonal():
    # optimal circulant eigenvalues = diag(F R F^H) / N
    d = DmcParams(alpha1=1.0, beta_d=0.2, tau_d=0.3)
    n = 32
    F = np.fft.fft(np.eye(n))
    oracle = np.real(np.diag(F @ dmc_covariance_rf(d, n) @ F.conj().T)) / n
    np.testing.assert_allclose(dmc_spectrum(dmc_correlation(d, np.arange(n), n)), oracle, atol=1e-12)


def test_circulant_whitener(rng):
    z = complex_normal(rng, (3, 16))
    white = DmcParams(sigma2=2.0)
    np.testing.assert_allclose(whiten(z, white, circulant=True), whiten(z, white), atol=1e-12)
    # broad profile, long band: circulant close to exact
    d = DmcParams(alpha1=1.0, beta_d=2.0, tau_d=0.1, sigma2=0.1)
    x = draw_dmc(d, 4000, 128, rng) + complex_normal(rng, (4000, 128), d.sigma2)
    w = whiten(x, d, circulant=True)
    assert abs(np.mean(np.abs(w) ** 2) - 1) < 0.05


# --- correlation objective and BLUE ----------------------------------------------

def test_objective_and_blue_match_dense(small_manifold, rng):
    man = small_manifold
    d = DmcParams(alpha1=0.5, beta_d=0.3, tau_d=0.1, sigma2=0.2)
    est = _est(2, seed=3)
    z = _noisy(est, man, 0.2, rng, n_f=8)
    B = _dense_B(est.sp, man, 8)
    Ri = np.linalg.inv(_dense_R(d, man.M, 8))
    zz = z.ravel()
    G = B.conj().T @ Ri @ B
    g_dense = np.linalg.solve(G, B.conj().T @ Ri @ zz)
    c_dense = np.real(zz.conj() @ Ri @ B @ g_dense)
    gh, gv = blue_gamma(est.sp, z, d, man)
    np.testing.assert_allclose(np.concatenate([gh, gv]), g_dense, rtol=1e-8, atol=1e-10)
    assert np.isclose(correlation_objective(est.sp, z, d, man), c_dense, rtol=1e-8)


def test_objective_trivial_cases(small_manifold, rng):
    man = small_manifold
    d = DmcParams(sigma2=1.0)
    est = _est(1, seed=4)
    z = model(est, 0.0, man, N_F)
    # full capture of a noiseless in-model signal
    assert np.isclose(correlation_objective(est.sp, z, d, man), np.vdot(z, z).real, rtol=1e-10)
    # orthogonal complement captures nothing
    B = _dense_B(est.sp, man, N_F)
    x = complex_normal(rng, B.shape[0])
    x -= B @ np.linalg.lstsq(B, x, rcond=None)[0]
    assert correlation_objective(est.sp, x.reshape(man.M, N_F), d, man) < 1e-20 * np.vdot(x, x).real + 1e-20


def test_objective_grid_argmax(small_manifold):
    man = small_manifold
    d = DmcParams(sigma2=1.0)
    sp0 = StructuralParams([2.0], [0.7], [1.3], SPACING)
    z = model(SpEstimate(sp0, [1.0], [0.5j]), 0.0, man, N_F)
    spans = [(0, 2 * np.pi), (-np.pi, np.pi), (0, np.pi)]
    for k, (lo, hi) in enumerate(spans):
        grid = np.linspace(lo, hi, 1000, endpoint=False)
        vals = []
        for g in grid:
            mu = [sp0.mu_tau.copy(), sp0.mu_phi.copy(), sp0.mu_theta.copy()]
            mu[k] = np.array([g])
            vals.append(correlation_objective(StructuralParams(*mu), z, d, man))
        true = [sp0.mu_tau, sp0.mu_phi, sp0.mu_theta][k][0]
        assert abs(grid[int(np.argmax(vals))] - true) <= grid[1] - grid[0]


def _orthonormal_manifold(n_f):
    # two ports, each seeing only one polarization with a flat pattern
    G_RH = np.array([[1.0], [0.0]]) / np.sqrt(n_f)
    G_RV = np.array([[0.0], [1.0]]) / np.sqrt(n_f)
    return ArrayManifold(G_RH, G_RV, 1, 1, np.array([0.0, 5e-4]))


def test_blue_orthonormal_is_projection(rng):
    man = _orthonormal_manifold(N_F)
    sp = StructuralParams(2 * np.pi * np.array([1, 5]) / N_F, [0.0, 0.0], [1.0, 1.0])
    B = _dense_B(sp, man, N_F)
    assert np.allclose(B.conj().T @ B, np.eye(4))
    z = complex_normal(rng, (2, N_F))
    gh, gv = blue_gamma(sp, z, DmcParams(sigma2=1.0), man)
    np.testing.assert_allclose(np.concatenate([gh, gv]), B.conj().T @ z.ravel(), atol=1e-12)


def test_blue_exact_and_orthogonal(small_manifold, rng):
    man = small_manifold
    est = _est(3, seed=5)
    d = DmcParams(alpha1=0.4, beta_d=0.5, sigma2=0.1)
    gh, gv = blue_gamma(est.sp, model(est, 0.0, man, N_F), d, man)
    np.testing.assert_allclose(gh, est.gamma_h, atol=1e-10)
    np.testing.assert_allclose(gv, est.gamma_v, atol=1e-10)
    z = _noisy(est, man, 0.1, rng)
    fit = est.with_gammas(*blue_gamma(est.sp, z, d, man))
    r = (z - model(fit, 0.0, man, N_F)).ravel()
    B = _dense_B(est.sp, man, N_F)
    Ri = np.linalg.inv(_dense_R(d, man.M, N_F))
    inner = np.abs(B.conj().T @ Ri @ r)
    scale = np.linalg.norm(Ri @ r) * np.linalg.norm(B, axis=0)
    assert np.all(inner < 1e-8 * scale)


def test_blue_unbiased(small_manifold):
    man = small_manifold
    est = _est(2, seed=6)
    d = DmcParams(sigma2=1.0)
    r = np.random.default_rng(7)
    s = model(est, 0.0, man, N_F)
    draws = np.array([np.concatenate(blue_gamma(est.sp, s + complex_normal(r, s.shape), d, man))
                      for _ in range(1000)])
    truth = np.concatenate([est.gamma_h, est.gamma_v])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - truth) < 3 * np.sqrt(2) * se)


# --- Jacobian, score, FIM ---------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), v=st.floats(-30, 30))
def test_jacobian_finite_differences(small_manifold, seed, v):
    man = small_manifold
    est = _est(2, seed)
    D = jacobian(est, v, man, N_F)
    theta = est.theta
    h = 1e-6
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        fd = (model(est.with_theta(theta + e), v, man, N_F)
              - model(est.with_theta(theta - e), v, man, N_F)).ravel() / (2 * h)
        assert np.linalg.norm(fd - D[:, k]) < 1e-6 * np.linalg.norm(D[:, k])


def test_jacobian_structure(small_manifold):
    man = small_manifold
    est = _est(2, seed=8)
    L = est.L
    # v = 0: the switching times play no role
    shifted = ArrayManifold(man.G_RH, man.G_RV, man.n_az, man.n_el, 3 * man.t + 1e-3,
                            T0=man.T0, f_c=man.f_c)
    np.testing.assert_array_equal(jacobian(est, 0.0, man, N_F)[:, L:2 * L],
                                  jacobian(est, 0.0, shifted, N_F)[:, L:2 * L])
    assert not np.allclose(jacobian(est, 5.0, man, N_F)[:, L:2 * L],
                           jacobian(est, 5.0, shifted, N_F)[:, L:2 * L])
    # weight columns do not depend on the weights
    other = est.with_gammas(est.gamma_h * 3 - 1j, est.gamma_v + 2)
    np.testing.assert_array_equal(jacobian(est, 1.0, man, N_F)[:, 3 * L:],
                                  jacobian(other, 1.0, man, N_F)[:, 3 * L:])


def test_score_fim_dense_and_stationary(small_manifold, rng):
    man = small_manifold
    d = DmcParams(alpha1=0.3, beta_d=0.4, tau_d=0.2, sigma2=0.2)
    est = _est(2, seed=9)
    q0, _ = score_and_fim(est, model(est, 2.0, man, 8), d, man, 2.0)
    assert np.abs(q0).max() == 0
    z = _noisy(est, man, 0.2, rng, v=2.0, n_f=8)
    q, J = score_and_fim(est, z, d, man, 2.0)
    D = jacobian(est, 2.0, man, 8)
    Ri = np.linalg.inv(_dense_R(d, man.M, 8))
    r = z.ravel() - model(est, 2.0, man, 8).ravel()
    np.testing.assert_allclose(q, 2 * np.real(D.conj().T @ Ri @ r), rtol=1e-8, atol=1e-8 * np.abs(q).max())
    np.testing.assert_allclose(J, 2 * np.real(D.conj().T @ Ri @ D), rtol=1e-8, atol=1e-8 * np.abs(J).max())
    assert np.linalg.eigvalsh(J).min() >= -1e-8 * np.trace(J)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_score_is_loglik_gradient(small_manifold, seed):
    man = small_manifold
    r = np.random.default_rng(seed)
    est = _est(2, seed)
    d = DmcParams(alpha1=0.2, beta_d=0.5, sigma2=0.3)
    z = _noisy(est, man, 0.3, r, v=1.0)
    start = est.with_theta(est.theta + 0.01 * r.standard_normal(est.theta.size))
    q, _ = score_and_fim(start, z, d, man, 1.0)
    theta = start.theta
    fd = np.empty_like(theta)
    h = 1e-5
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        fd[k] = (loglik(start.with_theta(theta + e), z, d, man, 1.0)
                 - loglik(start.with_theta(theta - e), z, d, man, 1.0)) / (2 * h)
    assert np.linalg.norm(fd - q) < 1e-5 * np.linalg.norm(q)


def test_velocity_tied_doppler_beats_free_doppler(small_manifold):
    """Angles carry more information when Doppler follows from a known velocity
    than when each path's Doppler is a free nuisance parameter."""
    man = small_manifold
    for seed in range(10):
        est = _est(1, seed)
        v = 3.0
        D = jacobian(est, v, man, N_F)
        B_RH, B_RV, B_f = polarimetric_basis(est.sp, v, man, N_F)
        a = B_RH @ est.gamma_h + B_RV @ est.gamma_v
        # free Doppler: phase exp(j m nu) with nu a separate parameter
        d_nu = np.kron(1j * man.switch_index * a, B_f[:, 0])
        k = 2 * np.pi * man.f_c * v * man.T0 / 299792458.0
        phi, el = est.sp.azimuth[0], est.sp.elevation[0]
        dnu = np.array([-k * np.sin(phi) * np.cos(el), k * np.cos(phi) * np.sin(el)])  # d nu / d(mu_phi, mu_theta)
        D_ang_free = D[:, 1:3] - np.outer(d_nu, dnu)
        others = np.delete(D, [1, 2], axis=1)

        def info(Dang, nuisance):
            J = 2 * np.real(np.hstack([Dang, nuisance]).conj().T @ np.hstack([Dang, nuisance]))
            return np.linalg.inv(np.linalg.inv(J)[:2, :2])

        tied = info(D[:, 1:3], others)
        free = info(D_ang_free, np.column_stack([d_nu, others]))
        assert np.linalg.eigvalsh(tied - free).min() >= -1e-8 * np.trace(tied)


# --- Levenberg-Marquardt -------------------------------------------------------------

def test_damping_asymptote():
    J = np.diag([4.0, 2.0, 1.0])
    q = np.array([1.0, -2.0, 0.5])
    for xi in (0.0, 1.0, 1e3, 1e6):
        np.testing.assert_allclose(damped_step(q, J, xi) * (1 + xi), q / np.diag(J))


def test_lm_converges_noiseless(small_manifold):
    man = small_manifold
    est = _est(1, seed=10)
    z = model(est, 1.0, man, N_F)
    d = DmcParams(sigma2=1.0)
    start = est.with_theta(est.theta + np.r_[0.02, -0.02, 0.015, 0.05, 0.0, 0.0, -0.05])
    xi = 1e-2
    cur, lls = start, [loglik(start, z, d, man, 1.0)]
    for i in range(10):
        cur, xi, ll = lm_step(cur, z, d, xi, man, 1.0)
        assert ll >= lls[-1]
        lls.append(ll)
        err = np.abs(np.r_[wrap_angle(cur.sp.mu_tau - est.sp.mu_tau), cur.sp.mu_phi - est.sp.mu_phi,
                           cur.sp.mu_theta - est.sp.mu_theta])
        if err.max() < 1e-8:
            break
    assert err.max() < 1e-8 and i < 10


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), xi=st.floats(1e-4, 1e4))
def test_lm_never_decreases_loglik(small_manifold, seed, xi):
    man = small_manifold
    r = np.random.default_rng(seed)
    est = _est(2, seed)
    z = _noisy(est, man, 0.5, r)
    d = DmcParams(sigma2=0.5)
    start = est.with_theta(est.theta + 0.2 * r.standard_normal(est.theta.size))
    ll0 = loglik(start, z, d, man)
    _, _, ll = lm_step(start, z, d, xi, man)
    assert ll >= ll0
    _, hist = refine(start, z, d, man)
    assert np.all(np.diff(hist) > 0)


def test_lm_flags_dead_path(small_manifold):
    man = small_manifold
    est = _est(2, seed=11)
    est = est.with_gammas([est.gamma_h[0], 0.0], [est.gamma_v[0], 0.0])
    z = model(est, 0.0, man, N_F)
    out, _, _ = lm_step(est, z, DmcParams(sigma2=1.0), 1e-2, man)
    assert out.flagged.tolist() == [False, True]


def test_boundary_freezes_azimuth(small_manifold):
    est = _est(1, seed=12)
    th = est.theta
    th[2] = -0.1
    out = est.with_theta(th)
    assert out.boundary[0] and out.sp.mu_theta[0] == 0.0
    man = small_manifold
    z = model(_est(1, seed=12), 0.0, man, N_F)
    nxt, _, _ = lm_step(out, z, DmcParams(sigma2=1.0), 1e-2, man)
    assert nxt.sp.mu_phi[0] == out.sp.mu_phi[0]


# --- path initialization ----------------------------------------------------------------

def test_init_noise_only(small_manifold, rng):
    z = complex_normal(rng, (small_manifold.M, 32))
    cfg = RimaxConfig(residual_threshold=0.95)
    est = initialize_paths(z, DmcParams(sigma2=1.0), cfg, small_manifold)
    assert est.L == 0


def _three_paths():
    sp = StructuralParams.from_physical(np.array([1.0, 5.0, 12.0]) * 1e-6, np.radians([-120, 10, 100]),
                                        np.radians([-30, 0, 35]), SPACING)
    return SpEstimate(sp, [1.0, 0.8j, -0.7], [0.3, 0.2, 0.1j])


def test_init_three_paths(default_manifold):
    man = default_manifold
    est = _three_paths()
    n_f = 64
    s = model(est, 0.0, man, n_f)
    sigma2 = np.mean(np.abs(s) ** 2) / 100
    z = s + complex_normal(np.random.default_rng(1), s.shape, sigma2)
    cfg = RimaxConfig(init_lm_iterations=0, max_paths=3)
    got = initialize_paths(z, DmcParams(sigma2=sigma2), cfg, man)
    assert got.L == 3
    cells = (2 * np.pi / (4 * n_f), 2 * np.pi / (2 * man.n_az), np.pi / (2 * man.n_el - 1))
    for l in range(3):
        j = int(np.argmin(np.abs(wrap_angle(got.sp.mu_tau - est.sp.mu_tau[l]))))
        assert abs(wrap_angle(got.sp.mu_tau[j] - est.sp.mu_tau[l])) <= 2 * cells[0]
        assert abs(wrap_angle(got.sp.mu_phi[j] - est.sp.mu_phi[l])) <= 2 * cells[1]
        assert abs(got.sp.mu_theta[j] - est.sp.mu_theta[l]) <= 2 * cells[2]


def test_init_strongest_first(small_manifold, rng):
    man = small_manifold
    sp = StructuralParams([1.0, 4.0], [-1.0, 2.0], [1.2, 1.8], SPACING)
    est = SpEstimate(sp, [0.1, 1.0], [0.0, 0.0])
    z = _noisy(est, man, 1e-4, rng, n_f=32)
    got = initialize_paths(z, DmcParams(sigma2=1e-4), RimaxConfig(max_paths=2, residual_threshold=1e-4), man)
    assert got.L == 2
    assert abs(wrap_angle(got.sp.mu_tau[0] - 4.0)) < 0.05


# --- DMC estimation --------------------------------------------------------------------

def test_dmc_white_residual(rng):
    r = complex_normal(rng, (128, 64), 2.0)
    d = estimate_dmc(r)
    var = np.mean(np.abs(r) ** 2)
    assert d.alpha1 < 0.01 * d.sigma2
    assert abs(d.sigma2 / var - 1) < 0.05


@pytest.mark.parametrize("truth", [DmcParams(1.0, 0.5, 0.2, 0.01), DmcParams(1.0, 0.1, 0.6, 0.01),
                                   DmcParams(1.0, 0.25, 0.05, 0.01)])
def test_dmc_recovers_parameters(truth):
    r = np.random.default_rng(11)
    x = draw_dmc(truth, 128, 100, r) + complex_normal(r, (128, 100), truth.sigma2)
    d = estimate_dmc(x, DmcParams())
    for name in ("alpha1", "beta_d", "tau_d"):
        assert abs(getattr(d, name) / getattr(truth, name) - 1) < 0.1, name


def test_dmc_zero_residual():
    d = estimate_dmc(np.zeros((4, 16)), DmcParams(beta_d=0.3))
    assert (d.alpha1, d.tau_d, d.sigma2) == (0.0, 0.0, 0.0) and d.beta_d == 0.3


# --- full estimator ---------------------------------------------------------------------

def test_rimax_noiseless_single_path(default_manifold):
    man = default_manifold
    sp = StructuralParams.from_physical([2.3e-6], [np.radians(37.0)], [np.radians(12.0)], SPACING)
    est = SpEstimate(sp, [0.8 - 0.3j], [0.2j])
    z = model(est, 1.0, man, 64)
    got, d, diag = rimax_estimate(z, RimaxConfig(), man, 1.0, SPACING)
    assert got.L == 1
    assert abs(wrap_angle(got.sp.mu_tau[0] - sp.mu_tau[0])) / (2 * np.pi) < 1e-4
    assert np.degrees(abs(got.sp.mu_phi[0] - sp.mu_phi[0])) < 0.01
    assert np.degrees(abs(got.sp.mu_theta[0] - sp.mu_theta[0])) < 0.01
    for hist in diag["lm_history"]:
        assert np.all(np.diff(hist) >= 0)
    rec = path_records(got, diag["crlb"])
    assert np.isclose(rec[0]["tau_s"], 2.3e-6, rtol=1e-6)


def test_rimax_no_paths_is_dmc_only(small_manifold, rng):
    z = complex_normal(rng, (small_manifold.M, 32), 0.5)
    got, d, _ = rimax_estimate(z, RimaxConfig(max_paths=0), small_manifold)
    assert got.L == 0
    assert d == estimate_dmc(z)


def test_rimax_stationary_and_scale_invariant(small_manifold):
    man = small_manifold
    est = _est(2, seed=13)
    est = SpEstimate(StructuralParams([1.0, 3.5], [-1.0, 1.5], [1.1, 1.9], SPACING),
                     est.gamma_h, est.gamma_v)
    z = _noisy(est, man, 0.01, np.random.default_rng(2), n_f=32)
    got, d, diag = rimax_estimate(z, RimaxConfig(), man, 0.0, SPACING)
    assert got.L == 2
    q, J = score_and_fim(got, z, replace_sigma(d, z), man)
    assert np.all(np.abs(q) <= 1e-3 * np.sqrt(np.diag(J)))
    c = 3.0 * np.exp(0.7j)
    got2, _, _ = rimax_estimate(c * z, RimaxConfig(), man, 0.0, SPACING)
    np.testing.assert_allclose(got2.sp.mu_tau, got.sp.mu_tau, atol=1e-7)
    np.testing.assert_allclose(got2.sp.mu_phi, got.sp.mu_phi, atol=1e-7)
    np.testing.assert_allclose(got2.gamma_h, c * got.gamma_h, rtol=1e-6)


def replace_sigma(d, z):
    from dataclasses import replace
    return replace(d, sigma2=max(d.sigma2, 1e-12 * np.mean(np.abs(z) ** 2)))


def test_rimax_zero_input(small_manifold):
    got, d, diag = rimax_estimate(np.zeros((small_manifold.M, 8)), RimaxConfig(), small_manifold)
    assert got.L == 0 and d.sigma2 == 0 and d.alpha1 == 0


def test_config_validation(small_manifold):
    with pytest.raises(ConfigError):
        RimaxConfig(residual_threshold=1.5)
    with pytest.raises(ConfigError):
        RimaxConfig(xi_grow=0.5)
    with pytest.raises(ConfigError):
        RimaxConfig(max_lm_iterations=0)
    with pytest.raises(ConfigError):
        rimax_estimate(np.zeros((3, 8)), RimaxConfig(), small_manifold)


def test_dmc_unconverged_returns_best_fit(rng):
    d = DmcParams(alpha1=1.0, beta_d=0.3, tau_d=0.2, sigma2=0.05)
    x = draw_dmc(d, 16, 32, rng) + complex_normal(rng, (16, 32), d.sigma2)
    prior = DmcParams(sigma2=100.0)
    out, info = estimate_dmc(x, prior, max_iterations=1, return_info=True)
    assert not info["converged"] and out != prior
    # the partial fit is already far closer to the residual power than the prior
    assert abs(np.log(out.alpha1 + out.sigma2) - np.log(1.05)) < abs(np.log(100.0 / 1.05))
