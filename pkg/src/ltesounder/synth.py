"""Forward simulator for the multi-cell switched-array receiver.

Per snapshot, antenna ``m`` and port ``p`` the observation on the union of
the cells' CRS resource elements is

    y = sum_q (s_q + n_dmc_q) * x_q(m mod 20) + n_0

where ``s_q`` is the specular response of cell q, ``n_dmc_q`` a diffuse
component with Toeplitz frequency covariance and ``n_0`` white noise.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.constants import speed_of_light
from scipy.linalg import toeplitz

from .errors import ConfigError, NumericalError
from .lte_grid import CrsConfig, build_crs_grid, comb_spacing, observation_layout, reference_matrix
from .manifold import StructuralParams, polarimetric_basis, wrap_angle

log = logging.getLogger(__name__)

NOISE_COMPONENT = 0


@dataclass(frozen=True)
class DmcParams:
    """Diffuse multipath and noise parameters.

    alpha1 : DMC power per subcarrier.
    beta_d : exponential decay rate of the power-delay profile, per delay bin
        (one bin = 1/N_f of the unambiguous range).
    tau_d : onset delay, as a fraction of the unambiguous range.
    sigma2 : white-noise power per complex sample.
    """

    alpha1: float = 0.0
    beta_d: float = 0.1
    tau_d: float = 0.0
    sigma2: float = 0.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.sigma2 < 0:
            raise ConfigError("alpha1 and sigma2 must be non-negative")
        if not self.beta_d > 0:
            raise ConfigError("beta_d must be positive")
        if not 0 <= self.tau_d < 1:
            raise ConfigError("tau_d must lie in [0, 1)")

    def as_dict(self):
        return {"alpha1": self.alpha1, "beta_d": self.beta_d, "tau_d": self.tau_d,
                "sigma2": self.sigma2}


@dataclass
class PathSet:
    """Specular paths in physical units.

    Elevation is measured from the horizon; the four polarimetric weights are
    the transmit->receive polarization couplings (HH = horizontal to
    horizontal, VH = vertical transmit to horizontal receive, ...).
    """

    tau: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    gamma_hh: np.ndarray
    gamma_vh: np.ndarray = None
    gamma_hv: np.ndarray = None
    gamma_vv: np.ndarray = None

    def __post_init__(self):
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        self.azimuth = np.atleast_1d(np.asarray(self.azimuth, dtype=float))
        self.elevation = np.atleast_1d(np.asarray(self.elevation, dtype=float))
        L = self.tau.size
        for name in ("gamma_hh", "gamma_vh", "gamma_hv", "gamma_vv"):
            val = getattr(self, name)
            val = np.zeros(L, complex) if val is None else np.atleast_1d(np.asarray(val, dtype=complex))
            if val.size != L:
                raise ConfigError(f"{name} has {val.size} entries, expected {L}")
            setattr(self, name, val)
        if not (self.azimuth.size == self.elevation.size == L):
            raise ConfigError("tau, azimuth and elevation must have equal length")

    @property
    def L(self):
        return self.tau.size

    def weights(self, b_th=1.0, b_tv=0.0):
        """Receive-side weights (gamma_H, gamma_V) for a transmit port response."""
        gamma_h = b_th * self.gamma_hh + b_tv * self.gamma_vh
        gamma_v = b_th * self.gamma_hv + b_tv * self.gamma_vv
        return gamma_h, gamma_v

    def structural(self, delay_spacing):
        return StructuralParams.from_physical(self.tau, self.azimuth, self.elevation, delay_spacing)

    def to_records(self):
        return [
            {"tau_s": float(self.tau[i]), "azimuth_rad": float(self.azimuth[i]),
             "elevation_rad": float(self.elevation[i]),
             **{k: [float(getattr(self, k)[i].real), float(getattr(self, k)[i].imag)]
                for k in ("gamma_hh", "gamma_vh", "gamma_hv", "gamma_vv")}}
            for i in range(self.L)
        ]

    @classmethod
    def from_records(cls, records):
        def cplx(key):
            return [complex(*r.get(key, (0.0, 0.0))) for r in records]
        return cls([r["tau_s"] for r in records], [r["azimuth_rad"] for r in records],
                   [r["elevation_rad"] for r in records], cplx("gamma_hh"), cplx("gamma_vh"),
                   cplx("gamma_hv"), cplx("gamma_vv"))

    @classmethod
    def empty(cls):
        return cls([], [], [], [])


# --- specular and diffuse components ------------------------------------------

def sp_response(sp, gamma_h, gamma_v, v, manifold, n_f):
    """Specular response as an (M, N_f) matrix.

    Row-major flattening gives the stacked vector
    ``(B_RH ⋄ B_f) gamma_H + (B_RV ⋄ B_f) gamma_V``.
    """
    B_RH, B_RV, B_f = polarimetric_basis(sp, v, manifold, n_f)
    gamma_h = np.atleast_1d(np.asarray(gamma_h, dtype=complex))
    gamma_v = np.atleast_1d(np.asarray(gamma_v, dtype=complex))
    if gamma_h.size != sp.L or gamma_v.size != sp.L:
        raise ConfigError("one gamma_H and gamma_V weight per path is required")
    return (B_RH * gamma_h) @ B_f.T + (B_RV * gamma_v) @ B_f.T


def dmc_correlation(d, lags, n_f):
    """Frequency correlation kappa(lag) of the exponential-PDP DMC model."""
    lags = np.asarray(lags, dtype=float)
    return d.alpha1 * np.exp(-2j * np.pi * d.tau_d * lags) / (
        1.0 + 2j * np.pi * lags / (d.beta_d * n_f))


def dmc_covariance_rf(d, n_f):
    """Hermitian Toeplitz DMC covariance R_f (N_f x N_f), diagonal alpha1."""
    if n_f < 1:
        raise ConfigError("n_f must be at least 1")
    col = dmc_correlation(d, np.arange(n_f), n_f)
    return toeplitz(col, col.conj())


@lru_cache(maxsize=64)
def _dmc_sqrt(d, n_f):
    R = dmc_covariance_rf(d, n_f)
    w, U = np.linalg.eigh(R)
    floor = -1e-9 * max(d.alpha1, 1e-300) * n_f
    if w.min() < floor:
        raise NumericalError(f"DMC covariance not PSD: min eigenvalue {w.min():.3e}")
    root = (U * np.sqrt(np.clip(w, 0, None))) @ U.conj().T
    root.setflags(write=False)
    return root


def complex_normal(rng, shape, power=1.0):
    scale = np.sqrt(power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_dmc(d, M, n_f, rng):
    """DMC realization (M, N_f): independent per antenna, covariance R_f per row.

    ``rng`` is a Generator or a sequence of M Generators (one per antenna).
    """
    if d.alpha1 == 0:
        return np.zeros((M, n_f), complex)
    root = _dmc_sqrt(d, n_f)
    if isinstance(rng, np.random.Generator):
        w = complex_normal(rng, (M, n_f))
    else:
        if len(rng) != M:
            raise ConfigError("need one generator per antenna")
        w = np.stack([complex_normal(g, n_f) for g in rng])
    # row by row so that each antenna's draw is bitwise independent of M
    return np.stack([root @ row for row in w])


def component_rng(seed, snapshot, antenna, component, port=0):
    """Counter-style generator keyed by (seed, snapshot, antenna, component, port)."""
    ss = np.random.SeedSequence([int(seed), int(snapshot), int(antenna), int(component), int(port)])
    return np.random.Generator(np.random.Philox(ss))


# --- scenario description ------------------------------------------------------

@dataclass
class Scatterer:
    position: tuple
    reflection: complex = 0.5


@dataclass
class BaseStation:
    """One cell: CRS configuration plus either explicit paths or geometry."""

    crs: CrsConfig
    paths: PathSet | None = None
    position: tuple = (0.0, 0.0, 30.0)
    los: bool = True
    scatterers: list = field(default_factory=list)
    amplitude: float = 1.0
    ref_distance: float = 100.0
    xpd_db: float = 10.0
    b_th: tuple = (1.0,)
    b_tv: tuple = (0.0,)
    dmc: DmcParams = field(default_factory=DmcParams)

    def port_response(self, port):
        b_th = self.b_th[port] if port < len(self.b_th) else self.b_th[-1]
        b_tv = self.b_tv[port] if port < len(self.b_tv) else self.b_tv[-1]
        return b_th, b_tv


@dataclass
class Trajectory:
    """Piecewise-linear drive at constant speed; heading follows the segment."""

    waypoints: np.ndarray
    speed: float = 1.0
    height: float = 2.0
    start_offset: float = 0.0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[0] < 2 or self.waypoints.shape[1] != 2:
            raise ConfigError("trajectory needs at least two 2-D waypoints")
        seg = np.diff(self.waypoints, axis=0)
        self._lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self._lengths <= 0):
            raise ConfigError("consecutive waypoints must differ")
        self._cum = np.concatenate([[0.0], np.cumsum(self._lengths)])

    def state(self, t):
        """(position xyz, heading rad) at time t."""
        s = min(self.start_offset + self.speed * t, self._cum[-1])
        i = min(np.searchsorted(self._cum, s, side="right") - 1, len(self._lengths) - 1)
        frac = (s - self._cum[i]) / self._lengths[i]
        a, b = self.waypoints[i], self.waypoints[i + 1]
        xy = a + frac * (b - a)
        heading = np.arctan2(b[1] - a[1], b[0] - a[0])
        return np.array([xy[0], xy[1], self.height]), float(heading)


@dataclass
class ScenarioConfig:
    base_stations: list
    noise_power: float = 0.0
    n_snapshots: int = 1
    snapshot_period: float = 0.075
    velocity: float = 0.0
    trajectory: Trajectory | None = None
    timing_offset: float = 0.0
    seed: int = 0
    store_channels: bool = False

    @property
    def mode(self):
        return "geometric" if self.trajectory is not None else "static"

    def validate(self, manifold):
        if not self.base_stations:
            raise ConfigError("at least one base station is required")
        if self.noise_power < 0:
            raise ConfigError("noise_power must be non-negative")
        if self.n_snapshots < 1:
            raise ConfigError("n_snapshots must be at least 1")
        if self.snapshot_period <= manifold.sweep_duration:
            raise ConfigError(
                f"snapshot period {self.snapshot_period} s does not exceed the switching "
                f"sweep {manifold.sweep_duration} s")
        cfgs = [bs.crs for bs in self.base_stations]
        ref = cfgs[0]
        for cfg in cfgs[1:]:
            for attr in ("n_subcarriers", "subcarrier_spacing", "cp_type", "n_ports", "crs_symbols"):
                if getattr(cfg, attr) != getattr(ref, attr):
                    raise ConfigError(f"all cells must share {attr}")
        ids = [c.cell_id for c in cfgs]
        if len(set(ids)) != len(ids):
            raise ConfigError("cell IDs must be unique within a scenario")
        for bs in self.base_stations:
            if self.trajectory is None and bs.paths is None:
                raise ConfigError(f"cell {bs.crs.cell_id}: static mode needs explicit paths")


# --- geometry ------------------------------------------------------------------

def geometric_paths(bs, rx, heading, f_c, timing_offset=0.0):
    """LOS and single-bounce paths of ``bs`` seen from ``rx`` (heading-relative)."""
    bs_pos = np.asarray(bs.position, dtype=float)
    taus, azs, els, co, cross = [], [], [], [], []
    xpd = 10 ** (-bs.xpd_db / 20)

    def add(direction, length, gain, cross_gain):
        taus.append(length / speed_of_light - timing_offset)
        azs.append(float(wrap_angle(np.arctan2(direction[1], direction[0]) - heading)))
        els.append(float(np.arctan2(direction[2], np.hypot(direction[0], direction[1]))))
        phase = np.exp(-2j * np.pi * f_c * length / speed_of_light)
        a = bs.amplitude * bs.ref_distance / length
        co.append(a * gain * phase)
        cross.append(a * cross_gain * phase)

    if bs.los:
        delta = bs_pos - rx
        add(delta, np.linalg.norm(delta), 1.0, 0.0)
    for sc in bs.scatterers:
        sp = np.asarray(sc.position, dtype=float)
        length = np.linalg.norm(bs_pos - sp) + np.linalg.norm(sp - rx)
        refl = complex(sc.reflection)
        add(sp - rx, length, refl, refl * xpd * np.exp(1j * np.pi / 3))
    co, cross = np.array(co, complex), np.array(cross, complex)
    return PathSet(taus, azs, els, co, cross, cross, co)


# --- snapshot container --------------------------------------------------------

@dataclass
class SnapshotSet:
    """Observed data plus everything needed to interpret and score it.

    y : (S, M, P, N_obs) complex observations on the union resource elements.
    truth : per snapshot, per cell PathSet.
    h_true : optional (Q, S, M, P, N_f) true per-cell channels (s + n_dmc).
    """

    y: np.ndarray
    cells: list
    resource_elements: np.ndarray
    velocity: np.ndarray
    times: np.ndarray
    truth: list
    dmc: list
    noise_power: float
    seed: int
    delay_spacing: float
    positions: np.ndarray | None = None
    headings: np.ndarray | None = None
    h_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.y.shape

    def layouts(self):
        return [observation_layout(self.cells, p) for p in range(self.y.shape[2])]

    def demask(self, q=0):
        """Per-cell LS channel y / x on cell q's resource elements, (S, M, P, N_f)."""
        M = self.y.shape[1]
        grid = build_crs_grid(self.cells[q])
        out = []
        for p, lay in enumerate(self.layouts()):
            x = reference_matrix(grid, M, p)
            out.append(self.y[:, :, p, lay.positions[q]] * x.conj()[None])
        return np.stack(out, axis=2)


def delay_range(cfg):
    """Unambiguous delay range (s) of the cell's per-port CRS comb."""
    return 1.0 / comb_spacing(cfg, 0)


def synthesize(cfg, manifold):
    """Generate a :class:`SnapshotSet` for a scenario."""
    cfg.validate(manifold)
    cells = [bs.crs for bs in cfg.base_stations]
    P = cells[0].n_ports
    M = manifold.M
    layouts = [observation_layout(cells, p) for p in range(P)]
    n_obs = layouts[0].size
    if any(lay.size != n_obs for lay in layouts):
        raise ConfigError("ports observe different numbers of resource elements")
    spacing = comb_spacing(cells[0], 0)
    n_f = layouts[0].positions[0].size
    t_max = 1.0 / spacing
    grids = [build_crs_grid(c) for c in cells]
    xmats = [[reference_matrix(g, M, p) for p in range(P)] for g in grids]
    S, Q = cfg.n_snapshots, len(cells)

    y = np.zeros((S, M, P, n_obs), complex)
    h_true = np.zeros((Q, S, M, P, n_f), complex) if cfg.store_channels else None
    truth, velocity, positions, headings = [], np.zeros(S), [], []
    times = cfg.snapshot_period * np.arange(S)

    for s in range(S):
        if cfg.trajectory is not None:
            rx, heading = cfg.trajectory.state(times[s])
            v = cfg.trajectory.speed
            paths = [geometric_paths(bs, rx, heading, manifold.f_c, cfg.timing_offset)
                     for bs in cfg.base_stations]
            positions.append(rx)
            headings.append(heading)
        else:
            v = cfg.velocity
            paths = [bs.paths for bs in cfg.base_stations]
        velocity[s] = v
        truth.append(paths)
        for q, (bs, ps) in enumerate(zip(cfg.base_stations, paths)):
            if ps.L and (ps.tau.min() < 0 or ps.tau.max() >= t_max):
                raise ConfigError(
                    f"cell {bs.crs.cell_id}: path delay outside unambiguous range [0, {t_max:.3e}) s")
            sp = ps.structural(spacing)
            for p in range(P):
                g_h, g_v = ps.weights(*bs.port_response(p))
                h = sp_response(sp, g_h, g_v, v, manifold, n_f)
                if bs.dmc.alpha1 > 0:
                    rngs = [component_rng(cfg.seed, s, m, 1 + bs.crs.cell_id, p) for m in range(M)]
                    h = h + draw_dmc(bs.dmc, M, n_f, rngs)
                if h_true is not None:
                    h_true[q, s, :, p] = h
                y[s][:, p][:, layouts[p].positions[q]] += h * xmats[q][p]
        if cfg.noise_power > 0:
            for m in range(M):
                rng = component_rng(cfg.seed, s, m, NOISE_COMPONENT)
                y[s, m] += complex_normal(rng, (P, n_obs), cfg.noise_power)

    return SnapshotSet(
        y=y, cells=cells, resource_elements=np.stack([lay.resource_elements for lay in layouts]),
        velocity=velocity, times=times, truth=truth, dmc=[bs.dmc for bs in cfg.base_stations],
        noise_power=cfg.noise_power, seed=cfg.seed, delay_spacing=spacing,
        positions=np.array(positions) if positions else None,
        headings=np.array(headings) if headings else None,
        h_true=h_true, meta={"mode": cfg.mode, "manifold": dict(manifold.meta)},
    )
