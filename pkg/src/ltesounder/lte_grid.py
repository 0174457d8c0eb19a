"""LTE cell-specific reference signals (CRS).

Pseudo-random QPSK sequences and resource-element mapping per 3GPP TS 36.211
(Rel-8 numerology), plus the per-antenna stacking used by the switched-array
receiver model: antenna ``m`` is active during slot ``m mod 20``.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError

N_RB_MAX = 110
GOLD_NC = 1600


@dataclass(frozen=True)
class CrsConfig:
    """Static CRS configuration of one cell.

    ``crs_symbols`` selects which of the port-0/1 CRS OFDM symbols of a slot
    are logged; ``None`` means all of them ({0, 4} for normal CP).
    """

    cell_id: int
    n_ports: int = 1
    n_subcarriers: int = 1200
    subcarrier_spacing: float = 15e3
    cp_type: str = "normal"
    n_slots_per_frame: int = 20
    crs_symbols: tuple | None = None

    def __post_init__(self):
        if not 0 <= self.cell_id < 504:
            raise ConfigError(f"cell_id must be in [0, 504), got {self.cell_id}")
        if self.n_ports not in (1, 2, 4):
            raise ConfigError(f"n_ports must be 1, 2 or 4, got {self.n_ports}")
        if self.n_subcarriers <= 0 or self.n_subcarriers % 12:
            raise ConfigError("n_subcarriers must be a positive multiple of 12")
        if self.n_subcarriers // 12 > N_RB_MAX:
            raise ConfigError(f"at most {N_RB_MAX} resource blocks are supported")
        if self.cp_type not in ("normal", "extended"):
            raise ConfigError(f"cp_type must be 'normal' or 'extended', got {self.cp_type!r}")
        if self.subcarrier_spacing <= 0:
            raise ConfigError("subcarrier_spacing must be positive")
        if self.crs_symbols is not None:
            object.__setattr__(self, "crs_symbols", tuple(sorted(set(self.crs_symbols))))
            allowed = (0, self.n_symbols - 3)
            if not self.crs_symbols or any(s not in allowed for s in self.crs_symbols):
                raise ConfigError(f"crs_symbols must be a non-empty subset of {allowed}")

    @property
    def n_rb(self):
        return self.n_subcarriers // 12

    @property
    def n_symbols(self):
        """OFDM symbols per slot."""
        return 7 if self.cp_type == "normal" else 6

    @property
    def v_shift(self):
        return self.cell_id % 6

    @property
    def symbol_duration(self):
        return 1.0 / self.subcarrier_spacing

    def symbols_for_port(self, port):
        """CRS-bearing symbol indices of ``port`` within a slot."""
        if not 0 <= port < self.n_ports:
            raise ConfigError(f"port {port} not configured (n_ports={self.n_ports})")
        if port in (0, 1):
            if self.crs_symbols is not None:
                return self.crs_symbols
            return (0, self.n_symbols - 3)
        return (1,)


def gold_sequence(c_init, length):
    """Length-31 Gold sequence c(n) of TS 36.211 section 7.2."""
    total = length + GOLD_NC
    x1 = np.zeros(total + 31, dtype=np.uint8)
    x2 = np.zeros(total + 31, dtype=np.uint8)
    x1[0] = 1
    x2[:31] = (int(c_init) >> np.arange(31)) & 1
    for n in range(total):
        x1[n + 31] = x1[n + 3] ^ x1[n]
        x2[n + 31] = x2[n + 3] ^ x2[n + 2] ^ x2[n + 1] ^ x2[n]
    return x1[GOLD_NC:GOLD_NC + length] ^ x2[GOLD_NC:GOLD_NC + length]


@lru_cache(maxsize=4096)
def _crs_base_sequence(cell_id, slot, symbol, n_cp):
    c_init = (2 ** 10) * (7 * (slot + 1) + symbol + 1) * (2 * cell_id + 1) + 2 * cell_id + n_cp
    c = gold_sequence(c_init, 4 * N_RB_MAX).astype(float)
    seq = ((1 - 2 * c[0::2]) + 1j * (1 - 2 * c[1::2])) / np.sqrt(2)
    seq.setflags(write=False)
    return seq


def _validate(cfg, slot, symbol, port):
    if not 0 <= slot < cfg.n_slots_per_frame:
        raise ConfigError(f"slot must be in [0, {cfg.n_slots_per_frame}), got {slot}")
    if symbol not in cfg.symbols_for_port(port):
        raise ConfigError(f"symbol {symbol} carries no CRS for port {port} ({cfg.cp_type} CP)")


def _v(port, symbol, slot):
    if port == 0:
        return 0 if symbol == 0 else 3
    if port == 1:
        return 3 if symbol == 0 else 0
    if port == 2:
        return 3 * (slot % 2)
    return 3 + 3 * (slot % 2)


def generate_crs_sequence(cfg, slot, symbol, port):
    """CRS symbols of one port in one OFDM symbol, ordered by subcarrier.

    Returns ``2 * n_rb`` unit-modulus QPSK values; the matching subcarrier
    indices come from :func:`crs_indices`.
    """
    _validate(cfg, slot, symbol, port)
    n_cp = 1 if cfg.cp_type == "normal" else 0
    base = _crs_base_sequence(cfg.cell_id, slot, symbol, n_cp)
    offset = N_RB_MAX - cfg.n_rb
    return base[offset:offset + 2 * cfg.n_rb].copy()


def crs_indices(cfg, port, symbol, slot=0):
    """Subcarrier indices (0-based, ``[0, n_subcarriers)``) of a port's CRS."""
    _validate(cfg, slot, symbol, port)
    k0 = (_v(port, symbol, slot) + cfg.v_shift) % 6
    return k0 + 6 * np.arange(2 * cfg.n_rb)


@dataclass(frozen=True)
class CrsGrid:
    """CRS of one cell for every (port, slot, symbol) of a frame."""

    cfg: CrsConfig
    entries: dict = field(repr=False)

    def __getitem__(self, key):
        return self.entries[key]

    def slot_vector(self, port, slot):
        """All CRS of ``port`` in ``slot``, ordered by subcarrier."""
        _, order, symbols = _slot_layout(self.cfg, port, slot)
        values = np.concatenate([self.entries[(port, slot, s)][1] for s in symbols])
        return values[order]


def build_crs_grid(cfg):
    entries = {}
    for port in range(cfg.n_ports):
        for slot in range(cfg.n_slots_per_frame):
            for symbol in cfg.symbols_for_port(port):
                entries[(port, slot, symbol)] = (
                    crs_indices(cfg, port, symbol, slot),
                    generate_crs_sequence(cfg, slot, symbol, port),
                )
    return CrsGrid(cfg, entries)


def _slot_layout(cfg, port, slot):
    symbols = cfg.symbols_for_port(port)
    ks = np.concatenate([crs_indices(cfg, port, s, slot) for s in symbols])
    ls = np.concatenate([np.full(2 * cfg.n_rb, s) for s in symbols])
    order = np.argsort(ks, kind="stable")
    return np.stack([ls[order], ks[order]], axis=1), order, symbols


def port_resource_elements(cfg, port, slot=0):
    """(symbol, subcarrier) pairs carrying ``port``'s CRS in a slot.

    Rows are sorted by subcarrier, which is the frequency order used for the
    per-antenna channel vectors everywhere downstream.
    """
    return _slot_layout(cfg, port, slot)[0]


def slot_invariant(cfg, port):
    """True when the port's resource elements are the same in every slot."""
    ref = port_resource_elements(cfg, port, 0)
    return all(
        np.array_equal(ref, port_resource_elements(cfg, port, s))
        for s in range(1, cfg.n_slots_per_frame)
    )


def comb_spacing(cfg, port):
    """Frequency spacing (Hz) of the port's per-slot CRS comb.

    Raises ConfigError when the comb is not uniform in frequency.
    """
    ks = port_resource_elements(cfg, port)[:, 1]
    steps = np.unique(np.diff(ks))
    if steps.size != 1:
        raise ConfigError(f"port {port} CRS comb is not uniform: steps {steps.tolist()}")
    return float(steps[0]) * cfg.subcarrier_spacing


def assemble_reference_vector(grid, M, port=0):
    """Stack the CRS seen by ``M`` switched antennas (block m = slot m mod 20)."""
    if port >= grid.cfg.n_ports:
        raise ConfigError(f"grid has {grid.cfg.n_ports} ports, requested port {port}")
    if M < 1:
        raise ConfigError("M must be at least 1")
    n_slots = grid.cfg.n_slots_per_frame
    blocks = [grid.slot_vector(port, m % n_slots) for m in range(M)]
    return np.concatenate(blocks)


def reference_matrix(grid, M, port=0):
    """Same as :func:`assemble_reference_vector`, reshaped to (M, N_f)."""
    return assemble_reference_vector(grid, M, port).reshape(M, -1)


@dataclass(frozen=True)
class ObservationLayout:
    """Resource elements observed for one port across several cells.

    ``resource_elements`` is the sorted union (by subcarrier, then symbol) of
    every cell's CRS REs for the port; ``positions[q]`` maps cell q's own
    frequency-ordered CRS vector into that union.
    """

    port: int
    resource_elements: np.ndarray
    positions: tuple

    @property
    def size(self):
        return self.resource_elements.shape[0]


def observation_layout(cfgs, port):
    """Build the :class:`ObservationLayout` of ``port`` for cells ``cfgs``."""
    per_cell = [port_resource_elements(cfg, port) for cfg in cfgs]
    for cfg in cfgs:
        if not slot_invariant(cfg, port):
            raise ConfigError(
                f"port {port} of cell {cfg.cell_id} has slot-dependent CRS positions; "
                "only ports 0 and 1 are supported by the receiver model")
    union = np.unique(np.concatenate(per_cell), axis=0)
    union = union[np.lexsort((union[:, 0], union[:, 1]))]
    lookup = {(int(l), int(k)): i for i, (l, k) in enumerate(union)}
    positions = tuple(
        np.array([lookup[(int(l), int(k))] for l, k in re]) for re in per_cell)
    return ObservationLayout(port, union, positions)
