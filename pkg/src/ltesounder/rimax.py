"""Velocity-extended RIMAX estimation of specular paths and dense multipath.

The per-cell observation of one snapshot and port is an (M, N_f) matrix

    z = s(theta_s) + n_dmc + n_0,   cov(vec z) = I_M ⊗ (R_f + sigma2 I)

with ``s = B_RH diag(gamma_H) B_f^T + B_RV diag(gamma_V) B_f^T`` (rows are
antennas, columns subcarriers; the row-major flattening is the stacked
Khatri-Rao model).  Every operation here works in the whitened domain
``z W^T`` with ``W = (R_f + sigma2 I)^(-1/2)``, so the Kronecker covariance
never has to be formed.

All model columns are rank-one products ``u ⊗ f`` of an antenna factor and a
frequency factor.  Gram matrices and inner products are therefore evaluated
as ``(U^H U) ∘ (F^H F)`` and ``diag(U^H Z conj(F))``, which keeps the cost at
O(M K^2 + N_f K^2) for K columns instead of O(M N_f K^2).

Real parameter vector per estimate of L paths, in this order::

    [mu_tau (L) | mu_phi (L) | mu_theta (L) | Re gamma_H | Im gamma_H | Re gamma_V | Im gamma_V]
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError, NumericalError
from .manifold import (
    TWO_PI,
    StructuralParams,
    angular_jacobian_blocks,
    array_response,
    delay_basis,
    delay_basis_derivative,
    doppler_phase,
    khatri_rao,
    polarimetric_basis,
    wrap_angle,
)
from .synth import DmcParams, dmc_correlation, dmc_covariance_rf

log = logging.getLogger(__name__)

N_BLOCKS = 7
PARAM_NAMES = ("mu_tau", "mu_phi", "mu_theta", "re_gamma_h", "im_gamma_h", "re_gamma_v", "im_gamma_v")
COND_LIMIT = 1e12


@dataclass(frozen=True)
class RimaxConfig:
    """Estimator settings.

    residual_threshold : stop adding paths once the whitened residual energy
        falls below this fraction of the whitened input energy.
    false_alarm : probability that a noise-only search peak passes the
        detection test; sets the minimum captured energy of a new path.
    drop_threshold : paths whose relative standard deviation of |gamma|
        (from the inverse FIM) exceeds this are removed.
    search_radius : half-width, in grid cells, of the joint local search.
    init_lm_iterations : LM iterations over all paths after each new path.
    noise_floor : lower bound on sigma2 relative to the mean input power.
        It sets the dynamic range and keeps the whitener well conditioned on
        noiseless or Wiener-filtered (nearly low-rank) data.
    """

    max_paths: int = 10
    residual_threshold: float = 0.01
    false_alarm: float = 1e-3
    xi_init: float = 1e-2
    xi_grow: float = 10.0
    xi_shrink: float = 0.1
    max_retries: int = 8
    max_lm_iterations: int = 50
    tolerance: float = 1e-10
    drop_threshold: float = 1.0
    delay_oversampling: int = 4
    angle_oversampling: int = 2
    search_radius: int = 3
    max_alternations: int = 10
    init_lm_iterations: int = 10
    noise_floor: float = 1e-4

    def __post_init__(self):
        if self.max_paths < 0:
            raise ConfigError("max_paths must be non-negative")
        for name in ("residual_threshold", "false_alarm", "noise_floor"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not (self.xi_init > 0 and self.xi_grow > 1 and 0 < self.xi_shrink < 1):
            raise ConfigError("damping needs xi_init > 0, xi_grow > 1, 0 < xi_shrink < 1")
        for name in ("max_retries", "max_lm_iterations", "max_alternations",
                     "delay_oversampling", "angle_oversampling", "search_radius"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.init_lm_iterations < 0:
            raise ConfigError("init_lm_iterations must be non-negative")
        if not self.tolerance > 0 or not self.drop_threshold > 0:
            raise ConfigError("tolerance and drop_threshold must be positive")


@dataclass
class SpEstimate:
    """A set of L estimated specular paths.

    reliability holds the relative standard deviation of the path amplitude
    ``sqrt(|gamma_H|^2 + |gamma_V|^2)`` from the inverse FIM (NaN until
    computed).  boundary marks paths whose co-elevation hit 0 or pi; their
    azimuth is frozen.
    """

    sp: StructuralParams
    gamma_h: np.ndarray
    gamma_v: np.ndarray
    reliability: np.ndarray | None = None
    boundary: np.ndarray | None = None
    flagged: np.ndarray | None = None

    def __post_init__(self):
        L = self.sp.L
        self.gamma_h = np.atleast_1d(np.asarray(self.gamma_h, dtype=complex))
        self.gamma_v = np.atleast_1d(np.asarray(self.gamma_v, dtype=complex))
        if self.gamma_h.size != L or self.gamma_v.size != L:
            raise ConfigError("one gamma_H and gamma_V per path required")
        if self.reliability is None:
            self.reliability = np.full(L, np.nan)
        if self.boundary is None:
            self.boundary = np.zeros(L, bool)
        if self.flagged is None:
            self.flagged = np.zeros(L, bool)

    @property
    def L(self):
        return self.sp.L

    @classmethod
    def empty(cls, delay_spacing=None):
        return cls(StructuralParams([], [], [], delay_spacing), [], [])

    @property
    def theta(self):
        sp = self.sp
        return np.concatenate([sp.mu_tau, sp.mu_phi, sp.mu_theta, self.gamma_h.real,
                               self.gamma_h.imag, self.gamma_v.real, self.gamma_v.imag])

    def with_theta(self, theta):
        """New estimate from a packed parameter vector (angles re-wrapped)."""
        L = self.L
        p = np.asarray(theta, dtype=float).reshape(N_BLOCKS, L)
        mu_theta = p[2].copy()
        hit = (mu_theta < 0) | (mu_theta > np.pi)
        mu_theta = np.clip(mu_theta, 0.0, np.pi)
        sp = StructuralParams(np.mod(p[0], TWO_PI), wrap_angle(p[1]), mu_theta, self.sp.delay_spacing)
        return SpEstimate(sp, p[3] + 1j * p[4], p[5] + 1j * p[6], self.reliability.copy(),
                          self.boundary | hit, self.flagged.copy())

    def select(self, keep):
        keep = np.asarray(keep)
        return SpEstimate(self.sp.select(keep), self.gamma_h[keep], self.gamma_v[keep],
                          self.reliability[keep], self.boundary[keep], self.flagged[keep])

    def append(self, mu_tau, mu_phi, mu_theta):
        sp = StructuralParams(np.append(self.sp.mu_tau, mu_tau), np.append(self.sp.mu_phi, mu_phi),
                              np.append(self.sp.mu_theta, mu_theta), self.sp.delay_spacing)
        return SpEstimate(sp, np.append(self.gamma_h, 0), np.append(self.gamma_v, 0),
                          np.append(self.reliability, np.nan), np.append(self.boundary, False),
                          np.append(self.flagged, False))

    def with_gammas(self, gamma_h, gamma_v):
        return SpEstimate(self.sp, gamma_h, gamma_v, self.reliability, self.boundary, self.flagged)

    @property
    def power(self):
        return np.abs(self.gamma_h) ** 2 + np.abs(self.gamma_v) ** 2


# --- whitening ---------------------------------------------------------------

def dmc_spectrum(kappa):
    """Eigenvalues of the optimal circulant approximation of a Toeplitz matrix.

    ``kappa`` holds the first column kappa(0..N-1).  The result equals the
    expected periodogram ``E|FFT(r)_k|^2 / N`` of a sequence with that
    covariance, so it is non-negative for any valid correlation.
    """
    n = kappa.size
    k = np.arange(n)
    c = ((n - k) * kappa + k * np.conj(np.roll(kappa[::-1], 1))) / n
    return np.fft.fft(c).real


@dataclass(frozen=True)
class Whitener:
    """Inverse square root of R_f + sigma2 I, dense or circulant."""

    n_f: int
    logdet: float
    W: np.ndarray | None = None
    spectrum: np.ndarray | None = None

    def apply(self, x):
        """Whiten along the last axis (each row is one antenna)."""
        x = np.asarray(x, dtype=complex)
        if self.W is not None:
            return x @ self.W.T
        return np.fft.ifft(np.fft.fft(x, axis=-1) / np.sqrt(self.spectrum), axis=-1)

    def apply_columns(self, B):
        """W @ B for an (N_f, K) basis."""
        return self.apply(np.asarray(B).T).T


@lru_cache(maxsize=32)
def whitener(d, n_f, circulant=False):
    """Build the whitener of ``R_f(d) + d.sigma2 I``."""
    if circulant:
        lam = dmc_spectrum(dmc_correlation(d, np.arange(n_f), n_f)) + d.sigma2
        if lam.min() <= 0:
            raise NumericalError(f"covariance not positive definite: smallest eigenvalue {lam.min():.3e}")
        return Whitener(n_f, float(np.sum(np.log(lam))), spectrum=lam)
    R = dmc_covariance_rf(d, n_f) + d.sigma2 * np.eye(n_f)
    w, U = np.linalg.eigh(R)
    if w.min() <= 1e-14 * max(w.max(), 1e-300):
        raise NumericalError(f"covariance not positive definite: smallest eigenvalue {w.min():.3e}")
    W = (U / np.sqrt(w)) @ U.conj().T
    W.setflags(write=False)
    return Whitener(n_f, float(np.sum(np.log(w))), W=W)


def whiten(z, d, circulant=False):
    """Apply ``I_M ⊗ (R_f + sigma2 I)^(-1/2)`` to z (rows are antennas)."""
    z = np.asarray(z, dtype=complex)
    return whitener(d, z.shape[-1], circulant).apply(z)


# --- Khatri-Rao helpers -----------------------------------------------------------

def _kr_gram(U, Ft):
    return (U.conj().T @ U) * (Ft.conj().T @ Ft)


def _kr_inner(U, Ft, Zt):
    """(U ⋄ Ft)^H vec(Zt) without forming the Khatri-Rao product."""
    return np.sum(U.conj() * (Zt @ Ft.conj()), axis=0)


def _solve_gram(G, c, what="B^H R^-1 B"):
    """Solve G x = c; ridge-regularize when ill-conditioned."""
    if G.size == 0:
        return np.zeros(0, complex)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        log.warning("%s ill-conditioned (cond %.2e); regularized solve", what, cond)
        scale = np.real(np.trace(G)) / G.shape[0]
        G = G + (scale / COND_LIMIT if scale > 0 else 1e-300) * np.eye(G.shape[0])
    return np.linalg.solve(G, c)


def _basis_factors(sp, v, manifold, n_f):
    B_RH, B_RV, B_f = polarimetric_basis(sp, v, manifold, n_f)
    return np.hstack([B_RH, B_RV]), np.hstack([B_f, B_f])


def _prepare(d, z, manifold):
    if z.ndim != 2 or z.shape[0] != manifold.M:
        raise ConfigError(f"z must be (M={manifold.M}, N_f), got {z.shape}")
    return whitener(d, z.shape[1])


def model(est, v, manifold, n_f):
    """Specular response s(theta_s), shape (M, N_f)."""
    if est.L == 0:
        return np.zeros((manifold.M, n_f), complex)
    B_RH, B_RV, B_f = polarimetric_basis(est.sp, v, manifold, n_f)
    return (B_RH * est.gamma_h + B_RV * est.gamma_v) @ B_f.T


def correlation_objective(sp, z, d, manifold, v=0.0):
    """C(mu, z): energy of the whitened z captured by the whitened basis of sp."""
    z = np.asarray(z, dtype=complex)
    wh = _prepare(d, z, manifold)
    U, F = _basis_factors(sp, v, manifold, z.shape[1])
    Ft = wh.apply_columns(F)
    c = _kr_inner(U, Ft, wh.apply(z))
    x = _solve_gram(_kr_gram(U, Ft), c)
    return max(float(np.real(np.vdot(c, x))), 0.0)


def blue_gamma(sp, z, d, manifold, v=0.0):
    """BLUE of the weights: returns (gamma_H, gamma_V)."""
    z = np.asarray(z, dtype=complex)
    wh = _prepare(d, z, manifold)
    if sp.L == 0:
        return np.zeros(0, complex), np.zeros(0, complex)
    U, F = _basis_factors(sp, v, manifold, z.shape[1])
    Ft = wh.apply_columns(F)
    g = _solve_gram(_kr_gram(U, Ft), _kr_inner(U, Ft, wh.apply(z)))
    return g[:sp.L], g[sp.L:]


# --- Jacobian, score, FIM -----------------------------------------------------------

def jacobian_factors(est, v, manifold, n_f):
    """Antenna and frequency factors (U, F), each with 7L columns.

    Column k of the Jacobian is ``vec(outer(U[:, k], F[:, k]))``.
    """
    sp, gh, gv = est.sp, est.gamma_h, est.gamma_v
    B_RH, B_RV, B_f = polarimetric_basis(sp, v, manifold, n_f)
    dB_f = delay_basis_derivative(sp.mu_tau, n_f, manifold.G_f)
    D_RH_phi, D_RH_th, D_RV_phi, D_RV_th = angular_jacobian_blocks(sp, v, manifold)
    U = np.hstack([B_RH * gh + B_RV * gv,
                   D_RH_phi * gh + D_RV_phi * gv,
                   D_RH_th * gh + D_RV_th * gv,
                   B_RH, 1j * B_RH, B_RV, 1j * B_RV])
    F = np.hstack([dB_f] + [B_f] * 6)
    return U, F


def jacobian(est, v, manifold, n_f):
    """Dense Jacobian D = ds/dtheta, shape (M*N_f, 7L), antenna-major rows."""
    return khatri_rao(*jacobian_factors(est, v, manifold, n_f))


def loglik(est, z, d, manifold, v=0.0):
    """Gaussian log-likelihood of z under the full Kronecker covariance."""
    z = np.asarray(z, dtype=complex)
    wh = _prepare(d, z, manifold)
    M, n_f = z.shape
    r = wh.apply(z - model(est, v, manifold, n_f))
    return -M * wh.logdet - float(np.vdot(r, r).real) - M * n_f * np.log(np.pi)


def score_and_fim(est, z, d, manifold, v=0.0):
    """Score q = 2 Re{D^H R^-1 (z - s)} and FIM J = 2 Re{D^H R^-1 D}."""
    z = np.asarray(z, dtype=complex)
    wh = _prepare(d, z, manifold)
    n_f = z.shape[1]
    if est.L == 0:
        return np.zeros(0), np.zeros((0, 0))
    U, F = jacobian_factors(est, v, manifold, n_f)
    Ft = wh.apply_columns(F)
    r = wh.apply(z - model(est, v, manifold, n_f))
    q = 2.0 * _kr_inner(U, Ft, r).real
    J = 2.0 * _kr_gram(U, Ft).real
    return q, 0.5 * (J + J.T)


def _active(est, J):
    """Parameters that take part in the LM update."""
    L = est.L
    act = np.ones(N_BLOCKS * L, bool)
    act[L:2 * L] &= ~est.boundary
    diag = np.diag(J)
    act &= diag > 1e-14 * max(diag.max(initial=0.0), 1e-300)
    return act


def crlb(est, J):
    """Diagonal of the inverse FIM over identifiable parameters (NaN elsewhere)."""
    out = np.full(J.shape[0], np.nan)
    act = _active(est, J)
    if act.any():
        try:
            out[act] = np.diag(np.linalg.inv(J[np.ix_(act, act)]))
        except np.linalg.LinAlgError:
            pass
    return out


def reliability(est, J):
    """Relative standard deviation of each path amplitude from the inverse FIM."""
    L = est.L
    if L == 0:
        return np.zeros(0)
    C = np.full(J.shape, np.nan)
    act = _active(est, J)
    try:
        C[np.ix_(act, act)] = np.linalg.inv(J[np.ix_(act, act)])
    except np.linalg.LinAlgError:
        return np.full(L, np.inf)
    amp = np.sqrt(est.power)
    rel = np.full(L, np.inf)
    for l in range(L):
        idx = [3 * L + l, 4 * L + l, 5 * L + l, 6 * L + l]
        comp = np.array([est.gamma_h[l].real, est.gamma_h[l].imag,
                         est.gamma_v[l].real, est.gamma_v[l].imag])
        use = act[idx]
        if amp[l] == 0 or not use.any():
            continue
        g = comp[use] / amp[l]
        sub = C[np.ix_(np.array(idx)[use], np.array(idx)[use])]
        rel[l] = np.sqrt(max(float(g @ sub @ g), 0.0)) / amp[l]
    return rel


# --- Levenberg-Marquardt ----------------------------------------------------------

def damped_step(q, J, xi):
    """Solve (J + xi * diag(J)) delta = q."""
    A = J + xi * np.diag(np.diag(J))
    return np.linalg.solve(A, q)


def lm_step(est, z, d, xi, manifold, v=0.0, cfg=None):
    """One damped Gauss-Newton update with adaptive damping.

    Returns (estimate, xi, loglik).  A step is accepted only if it raises
    the log-likelihood; otherwise xi grows and the step is retried.  Paths
    whose structural block is singular are flagged.
    """
    cfg = cfg or RimaxConfig()
    ll0 = loglik(est, z, d, manifold, v)
    if est.L == 0:
        return est, xi, ll0
    q, J = score_and_fim(est, z, d, manifold, v)
    act = _active(est, J)
    L = est.L
    dead = ~act[:L] & ~act[2 * L:3 * L]
    if dead.any():
        est = replace(est, flagged=est.flagged | dead)
    theta = est.theta
    Ja, qa = J[np.ix_(act, act)], q[act]
    for _ in range(cfg.max_retries):
        try:
            delta = damped_step(qa, Ja, xi)
        except np.linalg.LinAlgError:
            xi *= cfg.xi_grow
            continue
        step = np.zeros_like(theta)
        step[act] = delta
        cand = est.with_theta(theta + step)
        ll = loglik(cand, z, d, manifold, v)
        if ll > ll0:
            return cand, xi * cfg.xi_shrink, ll
        xi *= cfg.xi_grow
    return est, xi, ll0


def refine(est, z, d, manifold, v=0.0, cfg=None):
    """Iterate lm_step to convergence; returns (estimate, accepted loglik history)."""
    cfg = cfg or RimaxConfig()
    xi = cfg.xi_init
    ll = loglik(est, z, d, manifold, v)
    history = [ll]
    for _ in range(cfg.max_lm_iterations):
        est, xi, ll_new = lm_step(est, z, d, xi, manifold, v, cfg)
        if ll_new == ll:
            break
        history.append(ll_new)
        done = ll_new - ll <= cfg.tolerance * max(abs(ll_new), 1.0)
        ll = ll_new
        if done:
            break
    return est, history


# --- path initialization ----------------------------------------------------------

def detection_threshold(n_candidates, false_alarm):
    """Captured whitened energy exceeded by the largest of n noise-only peaks
    with probability ``false_alarm`` (two complex weights: Gamma(2, 1) tail)."""
    x = np.log(n_candidates / false_alarm)
    for _ in range(50):
        x = np.log(n_candidates * (1 + x) / false_alarm)
    return x


def _search_grids(n_f, manifold, cfg):
    n_tau = cfg.delay_oversampling * n_f
    n_phi = cfg.angle_oversampling * manifold.n_az
    n_th = cfg.angle_oversampling * manifold.n_el
    return (TWO_PI * np.arange(n_tau) / n_tau,
            -np.pi + TWO_PI * np.arange(n_phi) / n_phi,
            np.linspace(0.0, np.pi, n_th))


def _single_gain(Zt, Ft, AH, AV):
    """Whitened energy captured by single-path bases (vectorized over K)."""
    Y = Zt @ Ft.conj()
    cH = np.sum(AH.conj() * Y, axis=0)
    cV = np.sum(AV.conj() * Y, axis=0)
    hh = np.sum(np.abs(AH) ** 2, axis=0)
    vv = np.sum(np.abs(AV) ** 2, axis=0)
    hv = np.sum(AH.conj() * AV, axis=0)
    eps = 1e-10 * (hh + vv)
    hh, vv = hh + eps, vv + eps
    nf = np.sum(np.abs(Ft) ** 2, axis=0)
    det = (hh * vv - np.abs(hv) ** 2) * nf
    num = vv * np.abs(cH) ** 2 + hh * np.abs(cV) ** 2 - 2 * np.real(cH.conj() * hv * cV)
    return num / det


def _array_candidates(mu_phi, mu_theta, v, manifold):
    a_h, a_v = array_response(mu_phi, mu_theta, manifold)
    a_t = doppler_phase(v, mu_phi, np.pi / 2 - np.asarray(mu_theta), manifold)
    return a_h * a_t, a_v * a_t


def _search_one(Rt, wh, grids, manifold, v, radius):
    """Sequential 1-D scans (delay, azimuth, co-elevation) then a joint window."""
    tau_g, phi_g, th_g = grids
    n_f = Rt.shape[1]
    Ft_all = wh.apply_columns(delay_basis(tau_g, n_f, manifold.G_f))
    # delay: unstructured array, energy per antenna
    Y = Rt @ Ft_all.conj()
    p_tau = np.sum(np.abs(Y) ** 2, axis=0) / np.sum(np.abs(Ft_all) ** 2, axis=0)
    i_tau = int(np.argmax(p_tau))
    ft = Ft_all[:, [i_tau]]
    AH, AV = _array_candidates(phi_g, np.full(phi_g.size, np.pi / 2), v, manifold)
    i_phi = int(np.argmax(_single_gain(Rt, np.repeat(ft, phi_g.size, 1), AH, AV)))
    AH, AV = _array_candidates(np.full(th_g.size, phi_g[i_phi]), th_g, v, manifold)
    i_th = int(np.argmax(_single_gain(Rt, np.repeat(ft, th_g.size, 1), AH, AV)))

    off = np.arange(-radius, radius + 1)
    best = (i_tau, i_phi, i_th)
    gain = -np.inf
    for _ in range(4):
        it = (best[0] + off) % tau_g.size
        ip = (best[1] + off) % phi_g.size
        ie = np.clip(best[2] + off, 0, th_g.size - 1)
        T, P, E = (a.ravel() for a in np.meshgrid(it, ip, ie, indexing="ij"))
        AH, AV = _array_candidates(phi_g[P], th_g[E], v, manifold)
        g = _single_gain(Rt, Ft_all[:, T], AH, AV)
        k = int(np.argmax(g))
        new = (T[k], P[k], E[k])
        gain = g[k]
        if new == best:
            break
        best = new
    return tau_g[best[0]], phi_g[best[1]], th_g[best[2]], float(gain)


def initialize_paths(z, d, cfg, manifold, v=0.0, existing=None, delay_spacing=None):
    """Add paths one at a time, strongest first, to ``existing``.

    Each new path comes from 1-D scans on the whitened residual refined in a
    joint window; all weights are then re-estimated jointly (BLUE).  Stops
    at ``max_paths``, when the residual drops below the energy threshold, or
    when the best candidate is not distinguishable from noise.
    """
    z = np.asarray(z, dtype=complex)
    wh = _prepare(d, z, manifold)
    n_f = z.shape[1]
    est = existing if existing is not None else SpEstimate.empty(delay_spacing)
    Zt = wh.apply(z)
    e0 = float(np.vdot(Zt, Zt).real)
    grids = _search_grids(n_f, manifold, cfg)
    threshold = detection_threshold(np.prod([g.size for g in grids]), cfg.false_alarm)
    Rt = Zt - wh.apply(model(est, v, manifold, n_f))
    while est.L < cfg.max_paths:
        if e0 == 0 or np.vdot(Rt, Rt).real <= cfg.residual_threshold * e0:
            break
        mu_tau, mu_phi, mu_theta, gain = _search_one(Rt, wh, grids, manifold, v, cfg.search_radius)
        if gain < threshold:
            break
        est = est.append(mu_tau, mu_phi, mu_theta)
        est = est.with_gammas(*blue_gamma(est.sp, z, d, manifold, v))
        # grid quantization of a strong path leaves residual far above the
        # noise; a short joint refinement keeps it from spawning ghosts
        if cfg.init_lm_iterations:
            est, _ = refine(est, z, d, manifold, v, replace(cfg, max_lm_iterations=cfg.init_lm_iterations))
        Rt = Zt - wh.apply(model(est, v, manifold, n_f))
    return est


# --- dense multipath ---------------------------------------------------------------

def _kappa_and_derivs(log_alpha, log_beta, tau_d, n_f):
    lags = np.arange(n_f)
    alpha, beta = np.exp(log_alpha), np.exp(log_beta)
    u = 2j * np.pi * lags / (beta * n_f)
    kappa = alpha * np.exp(-2j * np.pi * tau_d * lags) / (1 + u)
    return kappa, (kappa, kappa * u / (1 + u), -2j * np.pi * lags * kappa)


def _whittle(p, P, M):
    """Whittle negative log-likelihood, gradient and Fisher matrix in p =
    (log alpha1, log beta_d, tau_d, log sigma2)."""
    n_f = P.size
    kappa, dk = _kappa_and_derivs(p[0], p[1], p[2], n_f)
    s2 = np.exp(p[3])
    S = dmc_spectrum(kappa) + s2
    if S.min() <= 0 or not np.all(np.isfinite(S)):
        return np.inf, None, None
    dS = np.vstack([dmc_spectrum(x) for x in dk] + [np.full(n_f, s2)])
    nll = M * float(np.sum(np.log(S) + P / S))
    grad = M * dS @ (1 / S - P / S ** 2)
    fim = M * (dS / S) @ (dS / S).T
    return nll, grad, fim


def estimate_dmc(residual, prior=None, max_iterations=200, tolerance=1e-10, return_info=False):
    """Fit (alpha1, beta_d, tau_d, sigma2) to a residual by Whittle likelihood.

    The antenna-averaged periodogram is matched to the expected periodogram
    of the model; LM runs in log-amplitude / log-decay coordinates.  A fit
    that does not beat the white-noise model by a likelihood-ratio margin
    is reported as pure noise.
    """
    prior = prior or DmcParams()
    r = np.atleast_2d(np.asarray(residual, dtype=complex))
    M, n_f = r.shape
    P = np.mean(np.abs(np.fft.fft(r, axis=1)) ** 2, axis=0) / n_f
    info = {"converged": True, "iterations": 0, "white": False}
    mean_p = float(P.mean())
    if mean_p <= 0:
        out = DmcParams(0.0, prior.beta_d, 0.0, 0.0)
        return (out, info) if return_info else out

    nll_white = M * n_f * (np.log(mean_p) + 1)
    s2_0 = max(float(np.quantile(P, 0.25)), 1e-6 * mean_p)
    a_0 = max(mean_p - s2_0, 1e-3 * mean_p)
    starts = []
    for beta in sorted({prior.beta_d, 0.05, 0.5, 5.0}):
        for tau in np.arange(n_f) / n_f:
            p = np.log([a_0, beta, 1.0, s2_0])
            p[2] = tau
            starts.append((_whittle(p, P, M)[0], tuple(p)))
    p = np.array(min(starts)[1])
    # beta_d -> 0 is the white limit, where alpha1 and sigma2 trade off
    # along a flat valley; below 0.5/N_f the profile is flat to within e^-0.5
    log_beta_min = np.log(0.5 / n_f)
    p[1] = max(p[1], log_beta_min)
    # powers stay within a (generous) window around the residual power
    lo, hi = np.log(1e-12 * mean_p), np.log(1e6 * mean_p)
    nll, grad, fim = _whittle(p, P, M)
    xi = 1e-3
    converged = False
    for it in range(max_iterations):
        info["iterations"] = it + 1
        improved = False
        for _ in range(12):
            try:
                step = -np.linalg.solve(fim + xi * np.diag(np.diag(fim)), grad)
            except np.linalg.LinAlgError:
                xi *= 10
                continue
            cand = p + step
            cand[[0, 3]] = np.clip(cand[[0, 3]], lo, hi)
            cand[1] = np.clip(cand[1], log_beta_min, np.log(1e4))
            cand[2] = np.mod(cand[2], 1.0)
            nll_c, g_c, f_c = _whittle(cand, P, M)
            if nll_c < nll:
                gain = nll - nll_c
                p, nll, grad, fim = cand, nll_c, g_c, f_c
                xi = max(xi * 0.1, 1e-12)
                improved = True
                break
            xi *= 10
        # gains below a micro-nat are statistically meaningless (and occur
        # while log alpha1 drifts towards -inf on white residuals)
        if not improved or gain < max(tolerance * abs(nll), 1e-6):
            converged = True
            break
    # 3 extra parameters; chi2(3) at 1e-3 is 16.27.  The white model is the
    # boundary alpha1 = 0, which log-coordinates only approach, so it is
    # tested before judging convergence.
    if np.isfinite(nll) and nll_white - nll < 0.5 * 16.27:
        info["white"] = True
        out = DmcParams(0.0, prior.beta_d, 0.0, mean_p)
    elif not np.isfinite(nll):
        log.warning("DMC estimation failed; keeping prior")
        info["converged"] = False
        out = prior
    else:
        # accepted steps only lower the NLL, so an unconverged fit still
        # beats every start; the caller decides whether to trust it
        if not converged:
            log.warning("DMC estimation did not converge; using the best fit found")
            info["converged"] = False
        out = DmcParams(float(np.exp(p[0])), float(np.exp(p[1])), float(np.mod(p[2], 1.0)),
                        float(np.exp(p[3])))
    return (out, info) if return_info else out


# --- full estimator -----------------------------------------------------------------

def _floored(d, z, cfg):
    floor = cfg.noise_floor * float(np.mean(np.abs(z) ** 2))
    if d.sigma2 >= floor and (d.sigma2 > 0 or d.alpha1 > 0):
        return d
    return replace(d, sigma2=max(d.sigma2, floor, 1e-300))


def _drop_unreliable(est, z, d, manifold, v, cfg):
    """Remove flagged paths, then the least reliable path, one at a time.

    Coalescing paths are all unreliable together; removing only the worst
    lets the survivor absorb the common component.
    """
    keep = np.flatnonzero(~est.flagged)
    if keep.size < est.L:
        est = est.select(keep)
        if est.L:
            est = est.with_gammas(*blue_gamma(est.sp, z, d, manifold, v))
    while est.L:
        _, J = score_and_fim(est, z, d, manifold, v)
        rel = reliability(est, J)
        est = replace(est, reliability=rel)
        bad = np.where(np.isnan(rel), np.inf, rel)
        worst = int(np.lexsort((est.power, -bad))[0])  # ties: weakest first
        if bad[worst] <= cfg.drop_threshold:
            break
        est = est.select(np.delete(np.arange(est.L), worst))
        if est.L:
            est = est.with_gammas(*blue_gamma(est.sp, z, d, manifold, v))
    return est


def rimax_estimate(z, cfg=None, manifold=None, v=0.0, delay_spacing=None, prior=None):
    """Alternating estimation of specular paths and DMC/noise for one (M, N_f) block.

    Returns (SpEstimate, DmcParams, diagnostics).  diagnostics holds the
    log-likelihood after every alternation, the accepted-step history of
    every LM run, the final CRLB diagonal (packed order) and the FIM.
    """
    cfg = cfg or RimaxConfig()
    if manifold is None:
        raise ConfigError("an array manifold is required")
    z = np.asarray(z, dtype=complex)
    _prepare(DmcParams(sigma2=1.0), z, manifold)
    M, n_f = z.shape
    diag = {"loglik": [], "lm_history": [], "alternations": 0, "dmc_converged": True}
    power = float(np.mean(np.abs(z) ** 2))
    est = SpEstimate.empty(delay_spacing)
    if power == 0:
        diag["crlb"], diag["fim"] = np.zeros(0), np.zeros((0, 0))
        return est, DmcParams(0.0, (prior or DmcParams()).beta_d, 0.0, 0.0), diag
    if cfg.max_paths == 0:
        d, info = estimate_dmc(z, prior, return_info=True)
        diag["dmc_converged"] = info["converged"]
        diag["crlb"], diag["fim"] = np.zeros(0), np.zeros((0, 0))
        return est, d, diag

    # first pass treats everything as white noise; a conservative whitening
    d = prior if prior is not None else DmcParams(sigma2=power)
    ll_prev = None
    for it in range(cfg.max_alternations):
        dw = _floored(d, z, cfg)
        n_before = est.L
        est = initialize_paths(z, dw, cfg, manifold, v, existing=est, delay_spacing=delay_spacing)
        est, hist = refine(est, z, dw, manifold, v, cfg)
        diag["lm_history"].append(hist)
        d_new, info = estimate_dmc(z - model(est, v, manifold, n_f), d, return_info=True)
        diag["dmc_converged"] &= info["converged"]
        # the Whittle fit is approximate; keep it only if the exact likelihood agrees
        if it == 0 or loglik(est, z, _floored(d_new, z, cfg), manifold, v) >= loglik(est, z, dw, manifold, v):
            d = d_new
        dw = _floored(d, z, cfg)
        n_mid = est.L
        est = _drop_unreliable(est, z, dw, manifold, v, cfg)
        ll = loglik(est, z, dw, manifold, v)
        diag["loglik"].append(ll)
        diag["alternations"] = it + 1
        stable = est.L == n_before == n_mid
        if ll_prev is not None and stable and abs(ll - ll_prev) <= 1e-9 * max(abs(ll), 1.0):
            break
        ll_prev = ll
    dw = _floored(d, z, cfg)
    if est.L:
        _, J = score_and_fim(est, z, dw, manifold, v)
        est = replace(est, reliability=reliability(est, J))
        diag["crlb"], diag["fim"] = crlb(est, J), J
    else:
        diag["crlb"], diag["fim"] = np.zeros(0), np.zeros((0, 0))
    return est, d, diag


def path_records(est, crlb_diag=None, snapshot=0, bs=0, port=0):
    """Flat per-path records in physical units (seconds, degrees)."""
    L = est.L
    cr = np.full(N_BLOCKS * L, np.nan) if crlb_diag is None else np.asarray(crlb_diag)
    spacing = est.sp.delay_spacing
    tau = est.sp.tau if spacing else np.full(L, np.nan)
    tau_scale = 1.0 / (TWO_PI * spacing) if spacing else np.nan
    out = []
    for l in range(L):
        power = est.power[l]
        out.append({
            "snapshot": snapshot, "bs": bs, "port": port, "path_id": l,
            "tau_s": float(tau[l]),
            "azimuth_deg": float(np.degrees(est.sp.azimuth[l])),
            "elevation_deg": float(np.degrees(est.sp.elevation[l])),
            "abs_gamma_h": float(abs(est.gamma_h[l])),
            "abs_gamma_v": float(abs(est.gamma_v[l])),
            "power_db": float(10 * np.log10(power)) if power > 0 else -np.inf,
            "reliability": float(est.reliability[l]),
            "crlb_tau_s2": float(cr[l] * tau_scale ** 2),
            "crlb_azimuth_rad2": float(cr[L + l]),
            "crlb_elevation_rad2": float(cr[2 * L + l]),
        })
    return out


def estimate_snapshots(h, manifold, cfg=None, velocity=None, delay_spacing=None, ports=None,
                       threads=1, bs=0):
    """Run :func:`rimax_estimate` on every (snapshot, port) block of h (S, M, P, N_f).

    Returns (records, results) where results[(s, p)] = (SpEstimate, DmcParams,
    diagnostics).  Blocks are independent; with ``threads > 1`` they run on a
    pool and are gathered in a fixed order.
    """
    from concurrent.futures import ThreadPoolExecutor

    cfg = cfg or RimaxConfig()
    h = np.asarray(h)
    S, M, P, _ = h.shape
    velocity = np.zeros(S) if velocity is None else np.broadcast_to(np.asarray(velocity, float), (S,))
    ports = range(P) if ports is None else ports
    tasks = [(s, p) for s in range(S) for p in ports]

    def work(task):
        s, p = task
        return rimax_estimate(h[s, :, p], cfg, manifold, float(velocity[s]), delay_spacing)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(work, tasks))
    else:
        outs = [work(t) for t in tasks]
    results, records = {}, []
    for (s, p), out in zip(tasks, outs):
        results[(s, p)] = out
        records.extend(path_records(out[0], out[2]["crlb"], snapshot=s, bs=bs, port=p))
    return records, results
