"""On-disk formats: EADF calibration files and snapshot containers.

Binary arrays are little-endian complex64, row-major, preceded by a magic
tag and a dimension header. A snapshot container is a directory holding
``manifest.json``, one or more ``*.bin`` arrays and ``truth.json``.
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .lte_grid import CrsConfig
from .manifold import ArrayManifold
from .synth import DmcParams, PathSet, SnapshotSet

FORMAT_VERSION = 1
EADF_MAGIC = b"EADF1\x00\x00\x00"
ARRAY_MAGIC = b"CHSND1\x00\x00"
C64 = np.dtype("<c8")


# --- raw arrays ------------------------------------------------------------------

def write_array(path, data):
    """Write a complex array as magic + ndim + dims + complex64 payload."""
    data = np.ascontiguousarray(data, dtype=C64)
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.tobytes())


def read_array(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: missing array file")
    raw = path.read_bytes()
    if raw[:len(ARRAY_MAGIC)] != ARRAY_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(ARRAY_MAGIC)]!r}")
    off = len(ARRAY_MAGIC)
    try:
        (ndim,) = struct.unpack_from("<I", raw, off)
        if ndim > 16:
            raise FormatError(f"{path}: implausible rank {ndim}")
        dims = struct.unpack_from(f"<{ndim}Q", raw, off + 4)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    off += 4 + 8 * ndim
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - off != n * C64.itemsize:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, header implies {n * C64.itemsize}")
    data = np.frombuffer(raw, dtype=C64, offset=off, count=n).reshape(dims)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values")
    return data.astype(complex)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- EADF ------------------------------------------------------------------------

def write_eadf(path, manifold):
    """Store a manifold's EADF matrices, switching times and carrier."""
    G_f = manifold.G_f
    n_f, n_tau = (0, 0) if G_f is None else G_f.shape
    with open(path, "wb") as fh:
        fh.write(EADF_MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, manifold.M, manifold.n_az, manifold.n_el, n_f, n_tau))
        fh.write(struct.pack("<2d", manifold.f_c, manifold.T0))
        fh.write(np.asarray(manifold.t, dtype="<f8").tobytes())
        for G in (manifold.G_RH, manifold.G_RV) + (() if G_f is None else (G_f,)):
            fh.write(np.ascontiguousarray(G, dtype=C64).tobytes())


def read_eadf(path):
    path = Path(path)
    raw = path.read_bytes() if path.is_file() else b""
    if raw[:len(EADF_MAGIC)] != EADF_MAGIC:
        raise FormatError(f"{path}: not an EADF1 file")
    off = len(EADF_MAGIC)
    try:
        version, M, n_az, n_el, n_f, n_tau = struct.unpack_from("<6I", raw, off)
        f_c, T0 = struct.unpack_from("<2d", raw, off + 24)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported EADF version {version}")
    off += 40
    n_modes = n_az * n_el
    expected = 8 * M + C64.itemsize * (2 * M * n_modes + n_f * n_tau)
    if len(raw) - off != expected:
        raise FormatError(f"{path}: payload size mismatch")
    t = np.frombuffer(raw, "<f8", M, off).astype(float)
    off += 8 * M

    def take(rows, cols):
        nonlocal off
        out = np.frombuffer(raw, C64, rows * cols, off).reshape(rows, cols).astype(complex)
        off += C64.itemsize * rows * cols
        return out

    G_RH, G_RV = take(M, n_modes), take(M, n_modes)
    G_f = take(n_f, n_tau) if n_f else None
    return ArrayManifold(G_RH, G_RV, n_az, n_el, t, T0=T0, f_c=f_c, G_f=G_f,
                         meta={"source": str(path)})


# --- snapshot containers ------------------------------------------------------------

def _cell_dict(cfg):
    return dataclasses.asdict(cfg)


def _cell_from(d):
    d = dict(d)
    if d.get("crs_symbols") is not None:
        d["crs_symbols"] = tuple(d["crs_symbols"])
    return CrsConfig(**d)


def _truth_dict(ss):
    return {
        "velocity": ss.velocity.tolist(),
        "times": ss.times.tolist(),
        "positions": None if ss.positions is None else ss.positions.tolist(),
        "headings": None if ss.headings is None else ss.headings.tolist(),
        "dmc": [d.as_dict() for d in ss.dmc],
        "paths": [[ps.to_records() for ps in snap] for snap in ss.truth],
    }


def _load_truth(truth, S, Q):
    paths = truth.get("paths") or [[[] for _ in range(Q)] for _ in range(S)]
    return dict(
        velocity=np.asarray(truth.get("velocity", [0.0] * S), dtype=float),
        times=np.asarray(truth.get("times", [0.0] * S), dtype=float),
        truth=[[PathSet.from_records(r) for r in snap] for snap in paths],
        dmc=[DmcParams(**d) for d in truth.get("dmc", [{}] * Q)],
        positions=None if truth.get("positions") is None else np.asarray(truth["positions"]),
        headings=None if truth.get("headings") is None else np.asarray(truth["headings"]),
    )


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: missing")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _check_manifest(manifest, component, path):
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    if manifest.get("component") != component:
        raise FormatError(f"{path}: expected a {component!r} container, found {manifest.get('component')!r}")


def write_snapshots(directory, ss, config=None):
    """Write a raw observation container; returns the y.bin digest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "y.bin", ss.y)
    if ss.h_true is not None:
        write_array(out / "h_true.bin", ss.h_true)
    truth = _truth_dict(ss)
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    manifest = {
        "format_version": FORMAT_VERSION,
        "component": "raw",
        "dims": {"snapshots": ss.y.shape[0], "antennas": ss.y.shape[1], "ports": ss.y.shape[2],
                 "subcarriers": ss.y.shape[3]},
        "cells": [_cell_dict(c) for c in ss.cells],
        "resource_elements": ss.resource_elements.tolist(),
        "delay_spacing": ss.delay_spacing,
        "noise_power": ss.noise_power,
        "seed": ss.seed,
        "config": config,
        "meta": ss.meta,
        "truth": truth,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return file_digest(out / "y.bin")


def read_snapshots(directory):
    d = Path(directory)
    manifest = _read_json(d / "manifest.json")
    _check_manifest(manifest, "raw", d)
    y = read_array(d / "y.bin")
    dims = manifest["dims"]
    expect = (dims["snapshots"], dims["antennas"], dims["ports"], dims["subcarriers"])
    if y.shape != expect:
        raise FormatError(f"{d}: y.bin shape {y.shape} disagrees with manifest {expect}")
    cells = [_cell_from(c) for c in manifest["cells"]]
    truth = _load_truth(_read_json(d / "truth.json"), y.shape[0], len(cells))
    h_true = read_array(d / "h_true.bin") if (d / "h_true.bin").is_file() else None
    return SnapshotSet(
        y=y, cells=cells, resource_elements=np.asarray(manifest["resource_elements"], dtype=int),
        noise_power=manifest["noise_power"], seed=manifest["seed"],
        delay_spacing=manifest["delay_spacing"], h_true=h_true, meta=manifest.get("meta", {}),
        **truth)


@dataclass
class SeparatedChannels:
    """Per-cell channel estimates: h[q] has shape (S, M, P, N_f)."""

    h: list
    cells: list
    delay_spacing: float
    velocity: np.ndarray
    truth: list = field(default_factory=list)
    dmc: list = field(default_factory=list)
    times: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_snapshots(cls, ss, h):
        return cls(h=list(h), cells=list(ss.cells), delay_spacing=ss.delay_spacing,
                   velocity=ss.velocity, truth=ss.truth, dmc=ss.dmc, times=ss.times,
                   meta=dict(ss.meta))


def write_separated(directory, sep):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for q, h in enumerate(sep.h):
        write_array(out / f"y_bs{q}.bin", h)
        digests[f"y_bs{q}.bin"] = file_digest(out / f"y_bs{q}.bin")
    truth = {
        "velocity": np.asarray(sep.velocity).tolist(),
        "times": None if sep.times is None else np.asarray(sep.times).tolist(),
        "dmc": [d.as_dict() for d in sep.dmc],
        "paths": [[ps.to_records() for ps in snap] for snap in sep.truth],
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    S, M, P, n_f = sep.h[0].shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "component": "hsep",
        "dims": {"cells": len(sep.h), "snapshots": S, "antennas": M, "ports": P, "subcarriers": n_f},
        "cells": [_cell_dict(c) for c in sep.cells],
        "delay_spacing": sep.delay_spacing,
        "meta": sep.meta,
        "digests": digests,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return digests


def read_separated(directory):
    d = Path(directory)
    manifest = _read_json(d / "manifest.json")
    _check_manifest(manifest, "hsep", d)
    dims = manifest["dims"]
    h = []
    for q in range(dims["cells"]):
        arr = read_array(d / f"y_bs{q}.bin")
        if arr.shape != (dims["snapshots"], dims["antennas"], dims["ports"], dims["subcarriers"]):
            raise FormatError(f"{d}: y_bs{q}.bin has shape {arr.shape}")
        h.append(arr)
    cells = [_cell_from(c) for c in manifest["cells"]]
    truth = _load_truth(_read_json(d / "truth.json"), dims["snapshots"], len(cells))
    return SeparatedChannels(h=h, cells=cells, delay_spacing=manifest["delay_spacing"],
                             velocity=truth["velocity"], truth=truth["truth"], dmc=truth["dmc"],
                             times=truth["times"], meta=manifest.get("meta", {}))


def container_component(directory):
    return _read_json(Path(directory) / "manifest.json").get("component")


def read_truth(directory):
    """Ground truth of a raw or hsep container without loading the arrays.

    Returns the keyword dict of :class:`SnapshotSet` truth fields plus
    ``has_velocity`` (False when the container carries no velocity record).
    """
    d = Path(directory)
    manifest = _read_json(d / "manifest.json")
    if manifest.get("component") not in ("raw", "hsep"):
        raise FormatError(f"{d}: not a snapshot container")
    _check_manifest(manifest, manifest["component"], d)
    raw = _read_json(d / "truth.json")
    out = _load_truth(raw, manifest["dims"]["snapshots"], len(manifest["cells"]))
    out["has_velocity"] = raw.get("velocity") is not None
    return out
