"""Inter-cell interference cancellation by SAGE sweeps with eigen-domain Wiener filtering.

Each antenna/port pair is processed on its own: for every snapshot the
per-cell channels are initialized by sequential least squares, then refined
by ``G`` Gauss-Seidel sweeps. In a sweep, cell q sees the observation minus
the current reconstruction of every other cell, is de-masked, de-rotated to
a common delay reference and Wiener filtered in the eigenbasis of its
learned frequency correlation matrix. The correlation matrices follow an
alpha filter across snapshots; their eigendecomposition is refreshed
periodically.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .lte_grid import build_crs_grid, observation_layout, reference_matrix
from .manifold import steering_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcConfig:
    """Settings of the canceller.

    rank : number of eigenmodes kept; ``None`` keeps the smallest rank that
        captures ``energy_fraction`` of the trace.
    refresh_period : snapshots between eigendecomposition refreshes (and
        cell reordering).
    reference_delay : delay (s) every cell's TOA is de-rotated to.
    initial_correlation : starting correlation when no prior is given:
        ``"identity"`` or ``"delay_window"`` (uniform power-delay profile over
        ``delay_window = (before, after)`` seconds around the reference delay).
    """

    iterations: int = 5
    alpha: float = 0.05
    rank: int | None = None
    energy_fraction: float = 0.999
    bias_correction: bool = True
    refresh_period: int = 20
    reference_delay: float = 0.0
    derotate: bool = True
    toa_oversampling: int = 16
    initial_correlation: str = "delay_window"
    delay_window: tuple = (2.34e-6, 4.69e-6)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.rank is not None and self.rank < 1:
            raise ConfigError("rank must be positive")
        if not 0 < self.energy_fraction <= 1:
            raise ConfigError("energy_fraction must lie in (0, 1]")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be at least 1")
        if self.toa_oversampling < 1:
            raise ConfigError("toa_oversampling must be at least 1")
        if self.initial_correlation not in ("identity", "delay_window"):
            raise ConfigError(f"unknown initial_correlation {self.initial_correlation!r}")
        if len(self.delay_window) != 2 or sum(self.delay_window) <= 0:
            raise ConfigError("delay_window must be (before, after) with positive total length")


@dataclass
class IcState:
    """Per antenna/port state; lists are indexed by cell.

    ``R`` is the alpha-filtered correlation of the de-rotated channel,
    ``U``/``lam`` its retained eigenpairs (descending) from the last refresh.
    """

    R: list
    U: list
    lam: list
    h: list
    hbar: list
    tau: np.ndarray
    sigma2: np.ndarray
    order: list
    snapshot: int = 0
    history: list = field(default_factory=list)

    @property
    def Q(self):
        return len(self.R)


# --- building blocks -------------------------------------------------------------

def derotation_vector(tau, spacing, n_f):
    """a(tau) on the centered comb frequencies, e^{+j 2 pi f_n tau}."""
    return steering_matrix([2 * np.pi * spacing * tau], n_f)[:, 0]


def phase_derotate(h, tau_hat, tau_min, spacing):
    """h ⊙ a(tau_hat - tau_min): moves a delay tau_hat to tau_min."""
    h = np.asarray(h)
    return h * derotation_vector(tau_hat - tau_min, spacing, h.shape[-1])


def phase_rotate(hbar, tau_hat, tau_min, spacing):
    """Inverse of :func:`phase_derotate`."""
    hbar = np.asarray(hbar)
    return hbar * derotation_vector(tau_hat - tau_min, spacing, hbar.shape[-1]).conj()


def delay_profile(h, oversampling=16):
    """Zero-padded delay-domain magnitude of a frequency response on the comb.

    Bin k of the result corresponds to the normalized delay 2 pi k / (N * oversampling).
    """
    h = np.asarray(h)
    n_fft = h.shape[-1] * oversampling
    # centered frequency indexing only changes the phase, not the magnitude
    return np.abs(np.fft.ifft(h, n_fft) * n_fft)


def estimate_toa(h, spacing, oversampling=16):
    """Time of arrival (s) from the peak of the zero-padded delay profile."""
    h = np.asarray(h)
    if h.size == 0:
        raise ConfigError("empty channel vector")
    mag = delay_profile(h, oversampling)
    if not np.any(mag > 0):
        raise NumericalError("all-zero channel vector has no TOA")
    n_fft = mag.size
    k = int(np.argmax(mag))
    a, b, c = mag[k - 1], mag[k], mag[(k + 1) % n_fft]
    denom = a - 2 * b + c
    frac = 0.5 * (a - c) / denom if denom < 0 else 0.0
    bin_pos = (k + frac) % n_fft
    return bin_pos / (n_fft * spacing)


def estimate_noise_adjacent(hbar, bias_correction=True):
    """Noise variance from differences of adjacent subcarrier pairs.

    The squared modulus of each (2n, 2n+1) difference is averaged over the
    pairs; with white noise the difference carries twice the variance, which
    the bias correction removes. An odd trailing sample is ignored.
    """
    hbar = np.asarray(hbar)
    n = hbar.shape[-1]
    if n < 2:
        raise ConfigError("need at least two subcarriers")
    half = n // 2
    d = hbar[..., 0:2 * half:2] - hbar[..., 1:2 * half:2]
    est = np.sum(np.abs(d) ** 2, axis=-1) / half
    return est / 2 if bias_correction else est


def eigen_basis(R, rank=None, energy_fraction=0.999):
    """Retained eigenpairs (U, lam) of a Hermitian PSD matrix, descending."""
    lam, U = np.linalg.eigh(R)
    lam, U = np.clip(lam[::-1], 0.0, None), U[:, ::-1]
    if rank is None:
        total = lam.sum()
        if total <= 0:
            r = lam.size
        else:
            r = int(np.searchsorted(np.cumsum(lam), energy_fraction * total * (1 - 1e-12))) + 1
    else:
        r = rank
    r = min(r, lam.size)
    return np.ascontiguousarray(U[:, :r]), lam[:r].copy()


def wiener_filter(hbar, U, lam, sigma2):
    """U diag(lam / (lam + sigma2)) U^H hbar."""
    denom = lam + sigma2
    gain = np.divide(lam, denom, out=np.zeros_like(lam), where=denom > 0)
    return U @ (gain * (U.conj().T @ hbar))


def window_correlation(n_f, spacing, before, after, power=1.0, center=0.0):
    """Frequency correlation of a uniform power-delay profile on [center - before, center + after]."""
    lag = np.arange(n_f)[:, None] - np.arange(n_f)[None, :]
    width = before + after
    mid = center + (after - before) / 2
    return power * np.exp(-2j * np.pi * lag * spacing * mid) * np.sinc(lag * spacing * width)


def _ls(z, x, pos):
    return z[pos] * x.conj()


def _reconstruct(h, refs, positions, n_obs, skip=None):
    out = np.zeros(n_obs, complex)
    for q, (hq, x, pos) in enumerate(zip(h, refs, positions)):
        if q != skip:
            out[pos] += hq * x
    return out


def _cell_order(y, refs, positions, oversampling):
    power = [np.max(delay_profile(_ls(y, x, pos), oversampling)) for x, pos in zip(refs, positions)]
    # stable: ties keep the configured cell order
    return sorted(range(len(refs)), key=lambda q: -power[q])


# --- algorithm steps ---------------------------------------------------------------

def ic_initialize(y, refs, positions, cfg, spacing, state=None, prior_R=None):
    """Sequential least-squares initialization of one snapshot.

    Starts a new :class:`IcState` when ``state`` is None, seeding the
    correlation matrices from ``prior_R`` or from identity scaled to the
    cell's de-masked observation power. The cell order is recomputed at refresh points.
    """
    Q = len(refs)
    n_f = refs[0].size
    refresh = state is None or state.snapshot % cfg.refresh_period == 0
    order = _cell_order(y, refs, positions, cfg.toa_oversampling) if refresh else state.order
    h = [np.zeros(n_f, complex) for _ in range(Q)]
    acc = np.zeros(y.size, complex)
    for q in order:
        h[q] = _ls(y - acc, refs[q], positions[q])
        acc[positions[q]] += h[q] * refs[q]
    if state is None:
        if prior_R is not None:
            R = [np.array(r, dtype=complex) for r in prior_R]
            if len(R) != Q or any(r.shape != (n_f, n_f) for r in R):
                raise ConfigError("prior_R needs one N_f x N_f matrix per cell")
        else:
            # scale by each cell's own de-masked power, before any subtraction
            power = [max(np.vdot(y[pos], y[pos]).real / n_f, 1e-300) for pos in positions]
            if cfg.initial_correlation == "identity":
                R = [pw * np.eye(n_f, dtype=complex) for pw in power]
            else:
                R = [window_correlation(n_f, spacing, *cfg.delay_window, pw, cfg.reference_delay)
                     for pw in power]
        basis = [eigen_basis(r, cfg.rank, cfg.energy_fraction) for r in R]
        state = IcState(R=R, U=[b[0] for b in basis], lam=[b[1] for b in basis], h=h,
                        hbar=[hq.copy() for hq in h], tau=np.zeros(Q), sigma2=np.zeros(Q),
                        order=order)
    else:
        state.h, state.order = h, order
    return state


def sage_iteration(state, y, refs, positions, cfg, spacing):
    """One Gauss-Seidel sweep over the cells; returns the residual energy."""
    for q in state.order:
        z = y - _reconstruct(state.h, refs, positions, y.size, skip=q)
        h_ls = _ls(z, refs[q], positions[q])
        if cfg.derotate and np.any(h_ls != 0):
            tau = estimate_toa(h_ls, spacing, cfg.toa_oversampling)
        else:
            tau = cfg.reference_delay
        hbar = phase_derotate(h_ls, tau, cfg.reference_delay, spacing)
        sigma2 = float(estimate_noise_adjacent(hbar, cfg.bias_correction))
        filtered = wiener_filter(hbar, state.U[q], state.lam[q], sigma2)
        state.hbar[q] = filtered
        state.h[q] = phase_rotate(filtered, tau, cfg.reference_delay, spacing)
        state.tau[q], state.sigma2[q] = tau, sigma2
    resid = y - _reconstruct(state.h, refs, positions, y.size)
    return float(np.vdot(resid, resid).real)


def update_correlation(state, cfg):
    """Alpha-filter the correlation with the de-rotated estimates; refresh eigenpairs periodically."""
    a = cfg.alpha
    for q in range(state.Q):
        hb = state.hbar[q]
        state.R[q] = (1 - a) * state.R[q] + a * np.outer(hb, hb.conj())
    state.snapshot += 1
    if state.snapshot % cfg.refresh_period == 0:
        for q in range(state.Q):
            state.U[q], state.lam[q] = eigen_basis(state.R[q], cfg.rank, cfg.energy_fraction)
    return state


# --- orchestration -----------------------------------------------------------------

@dataclass
class IcResult:
    """Separated channels h (Q, S, M, P, N_f) plus per-sweep diagnostics.

    residual : (S, G) residual energy summed over antennas and ports.
    error, energy : (Q, S, G) and (Q, S) squared error / truth energy when
        the true channels were supplied, else None.
    """

    h: np.ndarray
    residual: np.ndarray
    error: np.ndarray | None = None
    energy: np.ndarray | None = None
    tau: np.ndarray | None = None

    def nmse(self, start=0):
        """Per-cell NMSE of the final sweep over snapshots ``start:``."""
        if self.error is None:
            raise ConfigError("no reference channels were supplied")
        return self.error[:, start:, -1].sum(axis=1) / self.energy[:, start:].sum(axis=1)

    def telemetry(self):
        S, G = self.residual.shape
        rows = []
        for s in range(S):
            for g in range(G):
                row = {"snapshot": s, "iteration": g + 1, "residual_energy": self.residual[s, g]}
                if self.error is not None:
                    for q in range(self.error.shape[0]):
                        row[f"nmse_bs{q}"] = self.error[q, s, g] / max(self.energy[q, s], 1e-300)
                rows.append(row)
        return rows


def _run_pair(y_mp, refs, positions, cfg, spacing, prior_R, truth):
    S = y_mp.shape[0]
    Q, n_f = len(refs), refs[0].size
    G = cfg.iterations
    h = np.zeros((Q, S, n_f), complex)
    resid = np.zeros((S, G))
    err = np.zeros((Q, S, G)) if truth is not None else None
    tau = np.zeros((Q, S))
    state = None
    for s in range(S):
        state = ic_initialize(y_mp[s], refs, positions, cfg, spacing, state, prior_R)
        for g in range(G):
            resid[s, g] = sage_iteration(state, y_mp[s], refs, positions, cfg, spacing)
            if truth is not None:
                for q in range(Q):
                    d = state.h[q] - truth[q, s]
                    err[q, s, g] = np.vdot(d, d).real
        for q in range(Q):
            h[q, s] = state.h[q]
        tau[:, s] = state.tau
        update_correlation(state, cfg)
    return h, resid, err, tau


def cancel_interference(y, cells, cfg, spacing, h_true=None, prior_R=None, threads=1):
    """Separate per-cell channels from observations y (S, M, P, N_obs).

    ``h_true`` (Q, S, M, P, N_f), when given, enables NMSE telemetry.
    Antenna/port pairs run on ``threads`` workers; results are gathered in a
    fixed order so the output does not depend on the worker count.
    """
    y = np.asarray(y)
    S, M, P, n_obs = y.shape
    Q = len(cells)
    layouts = [observation_layout(cells, p) for p in range(P)]
    if any(lay.size != n_obs for lay in layouts):
        raise ConfigError("observation length does not match the cells' resource elements")
    grids = [build_crs_grid(c) for c in cells]
    xmats = [[reference_matrix(g, M, p) for p in range(P)] for g in grids]
    n_f = xmats[0][0].shape[1]
    if h_true is not None and h_true.shape != (Q, S, M, P, n_f):
        raise ConfigError(f"h_true has shape {h_true.shape}, expected {(Q, S, M, P, n_f)}")

    tasks = [(m, p) for m in range(M) for p in range(P)]

    def work(task):
        m, p = task
        refs = [xmats[q][p][m] for q in range(Q)]
        truth = None if h_true is None else h_true[:, :, m, p]
        return _run_pair(y[:, m, p], refs, layouts[p].positions, cfg, spacing, prior_R, truth)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]

    h = np.zeros((Q, S, M, P, n_f), complex)
    tau = np.zeros((Q, S, M, P))
    resid = np.zeros((S, cfg.iterations))
    err = np.zeros((Q, S, cfg.iterations)) if h_true is not None else None
    for (m, p), (h_mp, r_mp, e_mp, t_mp) in zip(tasks, results):
        h[:, :, m, p] = h_mp
        tau[:, :, m, p] = t_mp
        resid += r_mp
        if err is not None:
            err += e_mp
    energy = None
    if h_true is not None:
        energy = np.sum(np.abs(h_true) ** 2, axis=(2, 3, 4))
    return IcResult(h=h, residual=resid, error=err, energy=energy, tau=tau)
