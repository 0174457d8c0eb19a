import numpy as np
import pytest
from scipy.constants import speed_of_light

from conftest import central_difference, rel_err
from ltesounder.errors import ConfigError
from ltesounder.manifold import (
    ArrayManifold,
    StackedUCA,
    StructuralParams,
    angular_jacobian_blocks,
    delay_basis,
    delay_basis_derivative,
    doppler_derivatives,
    doppler_phase,
    doppler_rate,
    eadf_coefficients,
    eadf_reconstruct,
    isotropic_manifold,
    khatri_rao,
    polarimetric_basis,
    sampling_grid,
    steering_derivative,
    steering_matrix,
    synthesize_eadf,
)


def test_steering_zero_and_modulus(rng):
    np.testing.assert_allclose(steering_matrix([0.0], 7), np.ones((7, 1)))
    A = steering_matrix(rng.uniform(-np.pi, np.pi, 5), 12)
    assert A.shape == (12, 5)
    np.testing.assert_allclose(np.abs(A), 1.0)


def test_steering_two_elements_pi():
    A = steering_matrix([np.pi], 2)
    loop = np.array([np.exp(1j * (k - 1) * np.pi) for k in range(2)])
    np.testing.assert_allclose(A[:, 0], loop)
    np.testing.assert_allclose(A[:, 0], [-1, 1], atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 7, 8, 31])
def test_steering_derivative(rng, n):
    mu = rng.uniform(-np.pi, np.pi, 4)
    D = steering_derivative(mu, n)
    np.testing.assert_array_equal(D[n // 2], 0)
    fd = central_difference(lambda x: steering_matrix(x, n), mu)
    assert rel_err(fd, D) < 1e-6 or n == 1
    D0 = steering_derivative([0.0], n)
    np.testing.assert_allclose(D0.real, 0)
    np.testing.assert_allclose(D0.imag[:, 0], np.arange(n) - n // 2)


def test_khatri_rao_brute_force(rng):
    A = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    B = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    K = khatri_rao(A, B)
    for l in range(4):
        np.testing.assert_allclose(K[:, l], np.kron(A[:, l], B[:, l]))
    with pytest.raises(ConfigError):
        khatri_rao(A, B[:, :2])


def test_doppler_rate_paper_values():
    # 2.66 GHz carrier, 1 m/s, 0.5 ms dwell, path along the driving direction
    f = doppler_rate(1.0, 0.0, 0.0, 2.66e9, 5e-4)
    assert f == pytest.approx(0.02786, rel=1e-3)
    # ray-trace check: phase of a far source seen from a moving receiver
    src = 1e6 * np.array([1.0, 0.0, 0.0])
    def phase(t):
        return -2 * np.pi * 2.66e9 * np.linalg.norm(src - np.array([t * 1.0, 0, 0])) / speed_of_light
    assert phase(5e-4) - phase(0.0) == pytest.approx(f, rel=1e-6)


def test_doppler_phase_properties(rng, small_manifold):
    M = small_manifold.M
    np.testing.assert_allclose(doppler_phase(0.0, [0.3, 1.0], [0.2, -0.1], small_manifold), 1.0)
    np.testing.assert_allclose(doppler_phase(5.0, [0.3, -2.0], [np.pi / 2, np.pi / 2], small_manifold), 1.0, atol=1e-12)
    At = doppler_phase(3.0, [0.3, 0.3, 1.0], [0.1, 0.1, 0.4], small_manifold)
    assert At.shape == (M, 3)
    np.testing.assert_allclose(np.abs(At), 1.0)
    np.testing.assert_array_equal(At[:, 0], At[:, 1])
    phi, th = rng.uniform(-np.pi, np.pi, 10), rng.uniform(-1.5, 1.5, 10)
    np.testing.assert_allclose(doppler_rate(2.0, phi, th, 2.66e9, 5e-4),
                               doppler_rate(2.0, phi, -th, 2.66e9, 5e-4))


def test_doppler_derivatives(rng, small_manifold):
    z1, z2 = doppler_derivatives(0.0, [0.5], [0.2], small_manifold)
    np.testing.assert_array_equal(z1, 0)
    np.testing.assert_array_equal(z2, 0)
    dphi, dth = doppler_derivatives(2.0, [0.0], [0.3], small_manifold)
    np.testing.assert_allclose(dphi, 0, atol=1e-15)
    assert np.linalg.norm(dth) > 0
    for _ in range(20):
        v = rng.uniform(0.5, 20)
        phi, th = rng.uniform(-np.pi, np.pi, 3), rng.uniform(-1.4, 1.4, 3)
        dphi, dth = doppler_derivatives(v, phi, th, small_manifold)
        fd_phi = central_difference(lambda x: doppler_phase(v, x, th, small_manifold), phi)
        fd_th = central_difference(lambda x: doppler_phase(v, phi, x, small_manifold), th)
        assert rel_err(fd_phi, dphi) < 1e-6
        assert rel_err(fd_th, dth) < 1e-6


def test_polarimetric_basis_isotropic():
    man = isotropic_manifold(6)
    sp = StructuralParams([0.0], [0.4], [1.0])
    BH, BV, Bf = polarimetric_basis(sp, 2.0, man, 8)
    At = doppler_phase(2.0, sp.azimuth, sp.elevation, man)
    np.testing.assert_allclose(BH, At)
    np.testing.assert_allclose(BV, 0)
    np.testing.assert_allclose(Bf, 1.0)


def test_polarimetric_basis_empty(small_manifold):
    sp = StructuralParams([], [], [])
    BH, BV, Bf = polarimetric_basis(sp, 1.0, small_manifold, 10)
    assert BH.shape == (small_manifold.M, 0) and BV.shape == (small_manifold.M, 0)
    assert Bf.shape == (10, 0)


def test_basis_shapes_and_rank(rng, default_manifold):
    L = 6
    sp = StructuralParams(rng.uniform(0, 2 * np.pi, L), rng.uniform(-np.pi, np.pi, L),
                          rng.uniform(0.3, 2.8, L))
    BH, BV, Bf = polarimetric_basis(sp, 1.0, default_manifold, 40)
    assert BH.shape == (128, L) and Bf.shape == (40, L)
    B = np.hstack([khatri_rao(BH, Bf), khatri_rao(BV, Bf)])
    assert np.linalg.matrix_rank(B) == 2 * L


def _perturbed(sp, which, x):
    sp2 = sp.copy()
    setattr(sp2, which, x)
    return sp2


def test_angular_blocks_fd(rng, small_manifold):
    for v in (0.0, 3.0):
        sp = StructuralParams(rng.uniform(0, 6, 3), rng.uniform(-3, 3, 3), rng.uniform(0.2, 2.9, 3))
        DHp, DHt, DVp, DVt = angular_jacobian_blocks(sp, v, small_manifold)
        def basis(which, idx):
            return lambda x: polarimetric_basis(_perturbed(sp, which, x), v, small_manifold, 4)[idx]
        assert rel_err(central_difference(basis("mu_phi", 0), sp.mu_phi), DHp) < 1e-6
        assert rel_err(central_difference(basis("mu_theta", 0), sp.mu_theta), DHt) < 1e-6
        assert rel_err(central_difference(basis("mu_phi", 1), sp.mu_phi), DVp) < 1e-6
        assert rel_err(central_difference(basis("mu_theta", 1), sp.mu_theta), DVt) < 1e-6


def test_angular_blocks_v0_and_isotropic(small_manifold):
    from ltesounder.manifold import array_response
    sp = StructuralParams([1.0], [0.7], [1.2])
    DHp, DHt, _, _ = angular_jacobian_blocks(sp, 0.0, small_manifold)
    kr = khatri_rao(steering_derivative(sp.mu_phi, small_manifold.n_az),
                    steering_matrix(sp.mu_theta, small_manifold.n_el))
    np.testing.assert_allclose(DHp, small_manifold.G_RH @ kr)
    iso = isotropic_manifold(5)
    DHp, DHt, _, _ = angular_jacobian_blocks(sp, 4.0, iso)
    dphi, del_ = doppler_derivatives(4.0, sp.azimuth, sp.elevation, iso)
    np.testing.assert_allclose(DHp, dphi)
    np.testing.assert_allclose(DHt, -del_)
    np.testing.assert_allclose(array_response([0.1], [0.2], iso)[0], 1.0)


def test_delay_basis_derivative(rng):
    mu = rng.uniform(0, 2 * np.pi, 4)
    D = delay_basis_derivative(mu, 400)
    fd = central_difference(lambda x: delay_basis(x, 400), mu)
    assert rel_err(fd, D) < 1e-6
    G_f = np.diag(np.linspace(0.5, 1.0, 50)).astype(complex)
    fd = central_difference(lambda x: delay_basis(x, 50, G_f), mu)
    assert rel_err(fd, delay_basis_derivative(mu, 50, G_f)) < 1e-6
    with pytest.raises(ConfigError):
        delay_basis(mu, 40, G_f)


def test_eadf_constant_and_first_mode():
    phi, th = sampling_grid(16, 8)
    P, T = np.meshgrid(phi, th, indexing="ij")
    const = np.full((1, 16, 8), 2.5 + 1j)
    G = eadf_coefficients(const, 5, 3).reshape(5, 3)
    assert G[2, 1] == pytest.approx(2.5 + 1j)
    G[2, 1] = 0
    np.testing.assert_allclose(G, 0, atol=1e-14)
    G = eadf_coefficients(np.exp(1j * P)[None], 5, 3).reshape(5, 3)
    assert G[3, 1] == pytest.approx(1.0)
    G[3, 1] = 0
    np.testing.assert_allclose(G, 0, atol=1e-14)


def test_eadf_full_mode_round_trip():
    arr = StackedUCA()
    phi, th = sampling_grid(64, 32)
    P, T = np.meshgrid(phi, th, indexing="ij")
    rh, rv = arr.response(P, T)
    G_RH, G_RV = synthesize_eadf(rh, rv, 64, 32)
    for G, ref in ((G_RH, rh), (G_RV, rv)):
        rec = eadf_reconstruct(G, 64, 32, phi, th)
        err = np.max(np.abs(rec - ref)) / np.max(np.abs(ref))
        assert err < 1e-10


def test_eadf_default_truncation_adequate(rng, default_manifold):
    arr = StackedUCA()
    phi, th = rng.uniform(-np.pi, np.pi, 200), rng.uniform(0, np.pi, 200)
    rh, rv = arr.response(phi, th)
    kr = khatri_rao(steering_matrix(phi, 31), steering_matrix(th, 15))
    assert rel_err(default_manifold.G_RH @ kr, rh) < 0.01
    assert rel_err(default_manifold.G_RV @ kr, rv) < 0.01


def test_eadf_grid_too_coarse():
    with pytest.raises(ConfigError):
        eadf_coefficients(np.ones((1, 8, 4)), 9, 3)


def test_manifold_validation():
    with pytest.raises(ConfigError):
        ArrayManifold(np.ones((3, 2)), np.ones((3, 2)), 2, 1, [0.0, 1.0, 0.5])
    with pytest.raises(ConfigError):
        ArrayManifold(np.ones((3, 2)), np.ones((3, 2)), 3, 1, [0.0, 1.0, 2.0])
    man = ArrayManifold(np.ones((3, 2)), np.ones((3, 2)), 2, 1, [0.0, 1e-3, 2e-3], T0=1e-3)
    np.testing.assert_allclose(man.switch_index, [0, 1, 2])


def test_structural_params_round_trip():
    sp = StructuralParams.from_physical([1e-6, 3e-6], [0.5, -2.0], [0.1, -0.3], 45e3)
    np.testing.assert_allclose(sp.tau, [1e-6, 3e-6])
    np.testing.assert_allclose(sp.elevation, [0.1, -0.3])
    assert np.all((sp.mu_theta >= 0) & (sp.mu_theta <= np.pi))
