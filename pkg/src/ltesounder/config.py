"""Versioned JSON run configuration.

Every section rejects unknown fields.  :func:`load_config` turns JSON syntax
errors and schema violations into :class:`ConfigError` with the offending
line or field path; the ``to_*`` helpers build the library objects.
"""

import hashlib
import json
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .container import read_eadf
from .errors import ConfigError
from .icancel import IcConfig
from .lte_grid import CrsConfig
from .manifold import StackedUCA, isotropic_manifold, stacked_uca_manifold
from .rimax import RimaxConfig
from .synth import BaseStation, DmcParams, PathSet, ScenarioConfig, Scatterer, Trajectory

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CrsSection(_Section):
    cell_id: int
    n_ports: int = 1
    n_subcarriers: int = 1200
    subcarrier_spacing: float = 15e3
    cp_type: Literal["normal", "extended"] = "normal"
    n_slots_per_frame: int = 20
    crs_symbols: list[int] | None = None


class DmcSection(_Section):
    alpha1: float = 0.0
    beta_d: float = 0.1
    tau_d: float = 0.0
    sigma2: float = 0.0


class PathsSection(_Section):
    """Explicit paths; weights are [re, im] pairs, missing ones are zero."""

    tau_s: list[float]
    azimuth_deg: list[float]
    elevation_deg: list[float]
    gamma_hh: list[tuple[float, float]]
    gamma_vh: list[tuple[float, float]] | None = None
    gamma_hv: list[tuple[float, float]] | None = None
    gamma_vv: list[tuple[float, float]] | None = None


class ScattererSection(_Section):
    position: tuple[float, float, float]
    reflection: tuple[float, float] = (0.5, 0.0)


class BaseStationSection(_Section):
    crs: CrsSection
    paths: PathsSection | None = None
    position: tuple[float, float, float] = (0.0, 0.0, 30.0)
    los: bool = True
    scatterers: list[ScattererSection] = Field(default_factory=list)
    amplitude: float = 1.0
    ref_distance: float = 100.0
    xpd_db: float = 10.0
    b_th: list[float] = Field(default_factory=lambda: [1.0])
    b_tv: list[float] = Field(default_factory=lambda: [0.0])
    dmc: DmcSection = Field(default_factory=DmcSection)


class TrajectorySection(_Section):
    waypoints: list[tuple[float, float]]
    speed: float = 1.0
    height: float = 2.0
    start_offset: float = 0.0


class ScenarioSection(_Section):
    base_stations: list[BaseStationSection]
    noise_power: float = 0.0
    n_snapshots: int = 1
    snapshot_period: float = 0.075
    velocity: float = 0.0
    trajectory: TrajectorySection | None = None
    timing_offset: float = 0.0
    store_channels: bool = True


class ManifoldSection(_Section):
    """Receive array: a synthetic stacked UCA, an isotropic array or an EADF file."""

    kind: Literal["stacked_uca", "isotropic", "eadf_file"] = "stacked_uca"
    rings: int = 4
    per_ring: int = 16
    radius: float = 0.05
    ring_spacing: float = 0.03
    f_c: float = 2.66e9
    cross_pol: float = 1.0
    n_az: int = 31
    n_el: int = 15
    grid: tuple[int, int] = (64, 32)
    switch_interval: float = 5e-4
    n_antennas: int = 8
    path: str | None = None


class IcSection(_Section):
    iterations: int = 5
    alpha: float = 0.05
    rank: int | None = None
    energy_fraction: float = 0.999
    bias_correction: bool = True
    refresh_period: int = 20
    reference_delay: float = 0.0
    derotate: bool = True
    toa_oversampling: int = 16
    initial_correlation: Literal["identity", "delay_window"] = "delay_window"
    delay_window: tuple[float, float] = (2.34e-6, 4.69e-6)


class RimaxSection(_Section):
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
    ports: list[int] | None = None


class EvalSection(_Section):
    gates: tuple[float, float, float] = (2.0, 5.0, 5.0)
    crlb_threshold: float = 3.0


class RunConfig(_Section):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    manifold: ManifoldSection = Field(default_factory=ManifoldSection)
    scenario: ScenarioSection | None = None
    ic: IcSection = Field(default_factory=IcSection)
    rimax: RimaxSection = Field(default_factory=RimaxSection)
    eval: EvalSection = Field(default_factory=EvalSection)


def _format_errors(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data, source="<config>"):
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_errors(exc)}") from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, str(path))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg, *sections):
    """sha256 of the canonical JSON of the whole config or the named sections."""
    data = cfg.model_dump(mode="json")
    if sections:
        data = {k: data[k] for k in sections}
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


# --- conversion to library objects -------------------------------------------------

def _complex(pairs):
    return None if pairs is None else np.array([complex(*p) for p in pairs], complex)


def to_paths(sec):
    return PathSet(sec.tau_s, np.radians(sec.azimuth_deg), np.radians(sec.elevation_deg),
                   _complex(sec.gamma_hh), _complex(sec.gamma_vh), _complex(sec.gamma_hv),
                   _complex(sec.gamma_vv))


def to_crs(sec):
    d = sec.model_dump()
    if d["crs_symbols"] is not None:
        d["crs_symbols"] = tuple(d["crs_symbols"])
    return CrsConfig(**d)


def to_base_station(sec):
    return BaseStation(
        crs=to_crs(sec.crs), paths=None if sec.paths is None else to_paths(sec.paths),
        position=tuple(sec.position), los=sec.los,
        scatterers=[Scatterer(tuple(s.position), complex(*s.reflection)) for s in sec.scatterers],
        amplitude=sec.amplitude, ref_distance=sec.ref_distance, xpd_db=sec.xpd_db,
        b_th=tuple(sec.b_th), b_tv=tuple(sec.b_tv), dmc=DmcParams(**sec.dmc.model_dump()))


def to_scenario(cfg, seed=None):
    sc = cfg.scenario
    if sc is None:
        raise ConfigError("config has no 'scenario' section")
    bss = [to_base_station(b) for b in sc.base_stations]
    if sc.trajectory is None and any(b.paths is None for b in bss):
        raise ConfigError("static scenarios need explicit 'paths' for every base station")
    traj = None if sc.trajectory is None else Trajectory(
        np.asarray(sc.trajectory.waypoints, float), sc.trajectory.speed, sc.trajectory.height,
        sc.trajectory.start_offset)
    return ScenarioConfig(bss, noise_power=sc.noise_power, n_snapshots=sc.n_snapshots,
                          snapshot_period=sc.snapshot_period, velocity=sc.velocity, trajectory=traj,
                          timing_offset=sc.timing_offset, seed=cfg.seed if seed is None else seed,
                          store_channels=sc.store_channels)


def to_manifold(sec, base_dir=None):
    if sec.kind == "stacked_uca":
        arr = StackedUCA(sec.rings, sec.per_ring, sec.radius, sec.ring_spacing, sec.f_c, sec.cross_pol)
        return stacked_uca_manifold(arr, sec.n_az, sec.n_el, sec.switch_interval, tuple(sec.grid))
    if sec.kind == "isotropic":
        return isotropic_manifold(sec.n_antennas, sec.switch_interval, sec.f_c)
    if sec.path is None:
        raise ConfigError("manifold.path is required for kind 'eadf_file'")
    path = Path(sec.path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return read_eadf(path)


def to_ic(sec):
    d = sec.model_dump()
    d["delay_window"] = tuple(d["delay_window"])
    return IcConfig(**d)


def to_rimax(sec):
    d = sec.model_dump()
    d.pop("ports")
    return RimaxConfig(**d)
