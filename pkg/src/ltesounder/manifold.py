"""Array and frequency-domain basis construction.

The receive array is described by its EADF (a 2-D Fourier series of every
port's polarimetric pattern over azimuth and co-elevation), the frequency
axis by a delay steering matrix, and receiver motion by a per-antenna Doppler
phase that grows with the switching instant of each port.

Angle conventions
-----------------
Normalized parameters follow the usual EADF domains: ``mu_tau`` in [0, 2pi),
``mu_phi`` (azimuth, relative to the array x-axis / driving direction) in
[-pi, pi) and ``mu_theta`` (co-elevation, 0 = zenith) in [0, pi].  Physical
elevation above the horizon is ``pi/2 - mu_theta`` and is what enters the
Doppler rate ``cos(phi) cos(elevation)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import speed_of_light

from .errors import ConfigError

TWO_PI = 2.0 * np.pi


def mode_indices(n):
    """Integer exponents ``k - floor(n/2)`` for ``k = 0..n-1``."""
    return np.arange(n) - n // 2


def steering_matrix(mu, n):
    """Phase-shift matrix A(mu) of shape (n, L) with entries exp(j*k*mu)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return np.exp(1j * np.outer(mode_indices(n), mu))


def steering_derivative(mu, n):
    """d A(mu) / d mu, i.e. j * Xi * A(mu) with Xi = diag(mode_indices)."""
    xi = mode_indices(n)
    return 1j * xi[:, None] * steering_matrix(mu, n)


def khatri_rao(a, b):
    """Column-wise Kronecker product of (m, L) and (n, L) -> (m*n, L)."""
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"Khatri-Rao column mismatch: {a.shape[1]} vs {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


@dataclass(frozen=True)
class ArrayManifold:
    """Calibrated description of the switched receive array.

    G_RH, G_RV : (M, n_az * n_el) EADF for horizontally / vertically
        polarized incident fields; column index ``i_az * n_el + i_el``.
    t : (M,) switch start time of each port, seconds.
    T0 : phase normalization interval (switch dwell), seconds.
    G_f : optional (N_f, M_tau) system frequency response; ``None`` is the
        identity.
    """

    G_RH: np.ndarray
    G_RV: np.ndarray
    n_az: int
    n_el: int
    t: np.ndarray
    T0: float = 5e-4
    f_c: float = 2.66e9
    G_f: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        G_RH = np.asarray(self.G_RH, dtype=complex)
        G_RV = np.asarray(self.G_RV, dtype=complex)
        t = np.asarray(self.t, dtype=float)
        if G_RH.shape != G_RV.shape or G_RH.ndim != 2:
            raise ConfigError("G_RH and G_RV must be 2-D arrays of equal shape")
        if G_RH.shape[1] != self.n_az * self.n_el:
            raise ConfigError(
                f"EADF has {G_RH.shape[1]} modes, expected n_az*n_el = {self.n_az * self.n_el}")
        if t.shape != (G_RH.shape[0],):
            raise ConfigError("one switch time per antenna port is required")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ConfigError("switch times must be strictly increasing")
        if not (np.all(np.isfinite(G_RH)) and np.all(np.isfinite(G_RV))):
            raise ConfigError("EADF contains non-finite values")
        if self.T0 <= 0 or self.f_c <= 0:
            raise ConfigError("T0 and f_c must be positive")
        for name, arr in (("G_RH", G_RH), ("G_RV", G_RV), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.G_f is not None:
            G_f = np.asarray(self.G_f, dtype=complex)
            G_f.setflags(write=False)
            object.__setattr__(self, "G_f", G_f)

    @property
    def M(self):
        return self.G_RH.shape[0]

    @property
    def switch_index(self):
        """t_m / T0 for every port."""
        return self.t / self.T0

    @property
    def sweep_duration(self):
        return float(self.t[-1] - self.t[0]) if self.M > 1 else 0.0

    def with_frequency_response(self, G_f):
        return replace(self, G_f=G_f)


@dataclass
class StructuralParams:
    """Normalized structural parameters of L specular paths."""

    mu_tau: np.ndarray
    mu_phi: np.ndarray
    mu_theta: np.ndarray
    delay_spacing: float | None = None

    def __post_init__(self):
        self.mu_tau = np.atleast_1d(np.asarray(self.mu_tau, dtype=float))
        self.mu_phi = np.atleast_1d(np.asarray(self.mu_phi, dtype=float))
        self.mu_theta = np.atleast_1d(np.asarray(self.mu_theta, dtype=float))
        if not (self.mu_tau.shape == self.mu_phi.shape == self.mu_theta.shape):
            raise ConfigError("mu_tau, mu_phi, mu_theta must have equal length")

    @property
    def L(self):
        return self.mu_tau.size

    @classmethod
    def from_physical(cls, tau, azimuth, elevation, delay_spacing):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        return cls(
            mu_tau=np.mod(TWO_PI * tau * delay_spacing, TWO_PI),
            mu_phi=wrap_angle(azimuth),
            mu_theta=np.pi / 2 - np.atleast_1d(np.asarray(elevation, dtype=float)),
            delay_spacing=delay_spacing,
        )

    @property
    def tau(self):
        """Delays in seconds (needs ``delay_spacing``)."""
        if self.delay_spacing is None:
            raise ConfigError("delay_spacing unknown; cannot convert to seconds")
        return self.mu_tau / (TWO_PI * self.delay_spacing)

    @property
    def azimuth(self):
        return self.mu_phi

    @property
    def elevation(self):
        return np.pi / 2 - self.mu_theta

    def copy(self):
        return StructuralParams(self.mu_tau.copy(), self.mu_phi.copy(),
                                self.mu_theta.copy(), self.delay_spacing)

    def select(self, keep):
        return StructuralParams(self.mu_tau[keep], self.mu_phi[keep],
                                self.mu_theta[keep], self.delay_spacing)


def wrap_angle(x):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(x, dtype=float) + np.pi, TWO_PI) - np.pi


# --- Doppler -----------------------------------------------------------------

def doppler_rate(v, azimuth, elevation, f_c, T0):
    """Phase increment per T0 of a path: 2*pi*f_c*v*T0/c * cos(phi)*cos(theta)."""
    k = TWO_PI * f_c * v * T0 / speed_of_light
    return k * np.cos(azimuth) * np.cos(elevation)


def doppler_phase(v, azimuth, elevation, manifold):
    """A_t: (M, L) matrix exp(j * t_m/T0 * f(v, angles))."""
    f = doppler_rate(v, np.atleast_1d(azimuth), np.atleast_1d(elevation),
                     manifold.f_c, manifold.T0)
    return np.exp(1j * np.outer(manifold.switch_index, f))


def doppler_derivatives(v, azimuth, elevation, manifold):
    """Derivatives of A_t w.r.t. physical azimuth and elevation.

    Returns ``(j*Psi ⊙ A_t, j*Phi ⊙ A_t)`` where Psi/Phi hold
    ``t_m/T0 * df/dphi`` and ``t_m/T0 * df/dtheta``.
    """
    azimuth = np.atleast_1d(azimuth)
    elevation = np.atleast_1d(elevation)
    k = TWO_PI * manifold.f_c * v * manifold.T0 / speed_of_light
    df_dphi = -k * np.sin(azimuth) * np.cos(elevation)
    df_dtheta = -k * np.cos(azimuth) * np.sin(elevation)
    a_t = doppler_phase(v, azimuth, elevation, manifold)
    idx = manifold.switch_index[:, None]
    return 1j * idx * df_dphi * a_t, 1j * idx * df_dtheta * a_t


# --- bases -------------------------------------------------------------------

def delay_basis(mu_tau, n_f, G_f=None):
    """B_f = G_f A(-mu_tau), shape (N_f, L)."""
    if G_f is None:
        return steering_matrix(-np.asarray(mu_tau), n_f)
    if G_f.shape[0] != n_f:
        raise ConfigError(f"G_f has {G_f.shape[0]} rows, data has N_f = {n_f}")
    return G_f @ steering_matrix(-np.asarray(mu_tau), G_f.shape[1])


def delay_basis_derivative(mu_tau, n_f, G_f=None):
    """d B_f / d mu_tau (column-wise)."""
    if G_f is None:
        return -steering_derivative(-np.asarray(mu_tau), n_f)
    if G_f.shape[0] != n_f:
        raise ConfigError(f"G_f has {G_f.shape[0]} rows, data has N_f = {n_f}")
    return -(G_f @ steering_derivative(-np.asarray(mu_tau), G_f.shape[1]))


def array_response(mu_phi, mu_theta, manifold):
    """EADF responses without Doppler: (G_RH (A_phi ⋄ A_theta), G_RV (...))."""
    kr = khatri_rao(steering_matrix(mu_phi, manifold.n_az),
                    steering_matrix(mu_theta, manifold.n_el))
    return manifold.G_RH @ kr, manifold.G_RV @ kr


def polarimetric_basis(sp, v, manifold, n_f):
    """Basis matrices (B_RH, B_RV, B_f) of the specular model."""
    a_h, a_v = array_response(sp.mu_phi, sp.mu_theta, manifold)
    a_t = doppler_phase(v, sp.azimuth, sp.elevation, manifold)
    return a_h * a_t, a_v * a_t, delay_basis(sp.mu_tau, n_f, manifold.G_f)


def angular_jacobian_blocks(sp, v, manifold):
    """Derivatives of B_RH, B_RV w.r.t. ``mu_phi`` and ``mu_theta``.

    Product rule over the EADF term and the Doppler term.  Since physical
    elevation is ``pi/2 - mu_theta`` the Doppler contribution to the
    ``mu_theta`` derivative carries a minus sign.

    Returns (D_RH_phi, D_RH_theta, D_RV_phi, D_RV_theta), each (M, L).
    """
    a_phi = steering_matrix(sp.mu_phi, manifold.n_az)
    a_th = steering_matrix(sp.mu_theta, manifold.n_el)
    kr = khatri_rao(a_phi, a_th)
    kr_dphi = khatri_rao(steering_derivative(sp.mu_phi, manifold.n_az), a_th)
    kr_dth = khatri_rao(a_phi, steering_derivative(sp.mu_theta, manifold.n_el))
    a_t = doppler_phase(v, sp.azimuth, sp.elevation, manifold)
    dt_phi, dt_el = doppler_derivatives(v, sp.azimuth, sp.elevation, manifold)
    dt_th = -dt_el
    blocks = []
    for G in (manifold.G_RH, manifold.G_RV):
        base = G @ kr
        blocks.append((G @ kr_dphi) * a_t + base * dt_phi)
        blocks.append((G @ kr_dth) * a_t + base * dt_th)
    return tuple(blocks)


# --- EADF synthesis ------------------------------------------------------------

def sampling_grid(n_az, n_el):
    """Full-period sampling grid: azimuth and co-elevation in [-pi, pi)."""
    return (-np.pi + TWO_PI * np.arange(n_az) / n_az,
            -np.pi + TWO_PI * np.arange(n_el) / n_el)


def eadf_coefficients(samples, n_az, n_el):
    """2-D Fourier coefficients of patterns sampled on :func:`sampling_grid`.

    samples : (M, N_az, N_el) complex, both axes covering one full period.
    Returns (M, n_az * n_el) truncated to the centred mode window.
    """
    samples = np.asarray(samples, dtype=complex)
    if samples.ndim != 3:
        raise ConfigError("pattern samples must have shape (M, N_az, N_el)")
    _, N_az, N_el = samples.shape
    if n_az > N_az or n_el > N_el:
        raise ConfigError(
            f"grid {N_az}x{N_el} too coarse for {n_az}x{n_el} EADF modes")
    spec = np.fft.fft2(samples, axes=(1, 2)) / (N_az * N_el)
    ka, ke = mode_indices(n_az), mode_indices(n_el)
    # grid starts at -pi: coefficient picks up exp(j*k*pi) = (-1)^k
    sign = np.outer((-1.0) ** ka, (-1.0) ** ke)
    coeffs = spec[:, ka % N_az][:, :, ke % N_el] * sign
    return coeffs.reshape(samples.shape[0], n_az * n_el)


def synthesize_eadf(samples_h, samples_v, n_az, n_el):
    """EADF pair (G_RH, G_RV) from sampled H/V port patterns."""
    return eadf_coefficients(samples_h, n_az, n_el), eadf_coefficients(samples_v, n_az, n_el)


def eadf_reconstruct(G, n_az, n_el, mu_phi, mu_theta):
    """Evaluate EADF patterns on a (mu_phi x mu_theta) grid -> (M, P, T)."""
    G3 = G.reshape(G.shape[0], n_az, n_el)
    return np.einsum("mae,ap,et->mpt", G3,
                     steering_matrix(mu_phi, n_az), steering_matrix(mu_theta, n_el))


# --- synthetic arrays ---------------------------------------------------------

@dataclass(frozen=True)
class StackedUCA:
    """Stacked uniform circular array of dual-polarized patch elements.

    Port order is ring-major, then element, then polarization (H, V), which
    is also the switching order.
    """

    rings: int = 4
    per_ring: int = 16
    radius: float = 0.05
    ring_spacing: float = 0.03
    f_c: float = 2.66e9
    cross_pol: float = 1.0

    @property
    def M(self):
        return 2 * self.rings * self.per_ring

    def positions(self):
        phi_e = TWO_PI * np.arange(self.per_ring) / self.per_ring
        z = (np.arange(self.rings) - (self.rings - 1) / 2) * self.ring_spacing
        pos = np.empty((self.rings, self.per_ring, 3))
        pos[..., 0] = self.radius * np.cos(phi_e)
        pos[..., 1] = self.radius * np.sin(phi_e)
        pos[..., 2] = z[:, None]
        return np.repeat(pos.reshape(-1, 3), 2, axis=0), np.tile(np.repeat(phi_e, 2), self.rings)

    def response(self, mu_phi, mu_theta):
        """Port responses to H and V incident fields, each (M,) + angle shape."""
        mu_phi = np.asarray(mu_phi, dtype=float)
        mu_theta = np.asarray(mu_theta, dtype=float)
        pos, phi_e = self.positions()
        ex = (slice(None),) + (None,) * mu_phi.ndim
        st, ct = np.sin(mu_theta), np.cos(mu_theta)
        d = np.stack([st * np.cos(mu_phi), st * np.sin(mu_phi), ct * np.ones_like(mu_phi)])
        k0 = TWO_PI * self.f_c / speed_of_light
        phase = np.exp(1j * k0 * np.tensordot(pos, d, axes=(1, 0)))
        rel = mu_phi[None] - phi_e[ex]
        gain = 0.5 * (1.0 + st[None] * np.cos(rel))
        # dipole projections onto the incident (phi, theta) field directions
        h_port = (np.cos(rel), self.cross_pol * ct[None] * np.sin(rel))
        v_port = (np.zeros_like(rel), st[None] * np.ones_like(rel))
        is_h = (np.arange(self.M) % 2 == 0)[ex]
        resp_h = np.where(is_h, h_port[0], v_port[0]) * gain * phase
        resp_v = np.where(is_h, h_port[1], v_port[1]) * gain * phase
        return resp_h, resp_v

    def eadf(self, n_az=31, n_el=15, grid=(64, 32)):
        phi, theta = sampling_grid(*grid)
        P, T = np.meshgrid(phi, theta, indexing="ij")
        resp_h, resp_v = self.response(P, T)
        return synthesize_eadf(resp_h, resp_v, n_az, n_el)


def stacked_uca_manifold(array=None, n_az=31, n_el=15, switch_interval=5e-4, grid=(64, 32)):
    """Default 4 x 16 dual-polarized stacked UCA (128 ports) manifold."""
    array = array or StackedUCA()
    G_RH, G_RV = array.eadf(n_az, n_el, grid)
    t = switch_interval * np.arange(array.M)
    meta = {"kind": "stacked_uca", "rings": array.rings, "per_ring": array.per_ring,
            "radius_m": array.radius, "ring_spacing_m": array.ring_spacing,
            "cross_pol": array.cross_pol}
    return ArrayManifold(G_RH, G_RV, n_az, n_el, t, T0=switch_interval, f_c=array.f_c, meta=meta)


def isotropic_manifold(M, switch_interval=5e-4, f_c=2.66e9, vertical=0.0):
    """Ports with a constant (single-mode) pattern; useful as a baseline."""
    G_RH = np.ones((M, 1), dtype=complex)
    G_RV = np.full((M, 1), vertical, dtype=complex)
    return ArrayManifold(G_RH, G_RV, 1, 1, switch_interval * np.arange(M),
                         T0=switch_interval, f_c=f_c, meta={"kind": "isotropic"})


def raised_cosine_taper(n_f, rolloff=0.1):
    """Diagonal G_f with a raised-cosine roll-off over ``rolloff`` of each band edge."""
    x = np.abs(np.linspace(-1.0, 1.0, n_f))
    edge = 1.0 - rolloff
    w = np.ones(n_f)
    if rolloff > 0:
        sel = x > edge
        w[sel] = 0.5 * (1 + np.cos(np.pi * (x[sel] - edge) / rolloff))
    return np.diag(w.astype(complex))
