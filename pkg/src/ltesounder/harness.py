"""Evaluation: path matching, error statistics, CRLB comparison, drive sweeps.

Delay errors are measured in delay bins (1 / (N_f * delay_spacing) seconds)
for gating and reported in seconds; angular errors are wrapped onto the
circle and reported in degrees.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .icancel import IcConfig, cancel_interference
from .manifold import wrap_angle
from .rimax import RimaxConfig, SpEstimate, estimate_snapshots
from .synth import PathSet, synthesize

PARAMS = ("tau", "azimuth", "elevation")
UNITS = ("s", "deg", "deg")
GATES = (2.0, 5.0, 5.0)


def path_parameters(paths):
    """(tau s, azimuth rad, elevation rad) of an SpEstimate, PathSet or record list."""
    if isinstance(paths, SpEstimate):
        if paths.L == 0:
            return np.zeros(0), np.zeros(0), np.zeros(0)
        return paths.sp.tau, paths.sp.azimuth, paths.sp.elevation
    if isinstance(paths, PathSet):
        return paths.tau, paths.azimuth, paths.elevation
    recs = list(paths)
    return (np.array([r["tau_s"] for r in recs], float),
            np.radians(np.array([r["azimuth_deg"] for r in recs], float)),
            np.radians(np.array([r["elevation_deg"] for r in recs], float)))


@dataclass
class Assignment:
    """Matched (estimate, truth) index pairs and their signed errors.

    errors[k] = estimate - truth as (seconds, degrees, degrees).
    """

    pairs: np.ndarray
    errors: np.ndarray
    cost: float
    misses: np.ndarray
    false_alarms: np.ndarray


def _differences(est, truth):
    te, pe, ee = path_parameters(est)
    tt, pt, et = path_parameters(truth)
    return (te[:, None] - tt[None, :],
            np.degrees(wrap_angle(pe[:, None] - pt[None, :])),
            np.degrees(wrap_angle(ee[:, None] - et[None, :])))


def match_paths(est, truth, delay_bin, gates=GATES, weights=(1.0, 1.0, 1.0)):
    """One-to-one assignment of estimated to true paths.

    Cost of a pair is ``sum_k w_k (err_k / gate_k)^2`` with the delay error
    in bins; pairs with any |err_k| > gate_k are inadmissible.  The result
    has the largest possible number of admissible pairs and, among those,
    minimum total cost.
    """
    dt, dp, de = _differences(est, truth)
    n_est, n_true = dt.shape
    if n_est == 0 or n_true == 0:
        return Assignment(np.zeros((0, 2), int), np.zeros((0, 3)), 0.0,
                          np.arange(n_true), np.arange(n_est))
    norm = (np.abs(dt) / delay_bin / gates[0], np.abs(dp) / gates[1], np.abs(de) / gates[2])
    cost = sum(w * x ** 2 for w, x in zip(weights, norm))
    ok = np.all([x <= 1.0 for x in norm], axis=0)
    big = 1.0 + 2.0 * float(np.sum(np.where(ok, cost, 0.0)))
    rows, cols = linear_sum_assignment(np.where(ok, cost, big))
    keep = ok[rows, cols]
    rows, cols = rows[keep], cols[keep]
    errors = np.column_stack([dt[rows, cols], dp[rows, cols], de[rows, cols]]) if rows.size else np.zeros((0, 3))
    return Assignment(np.column_stack([rows, cols]).astype(int), errors, float(cost[rows, cols].sum()),
                      np.setdiff1d(np.arange(n_true), cols), np.setdiff1d(np.arange(n_est), rows))


@dataclass
class EvalReport:
    """Matched pairs, error statistics and detection counts.

    Statistics are in seconds (delay) and degrees (angles); ``crlb`` holds
    the mean CRLB variance per parameter over matched pairs.
    """

    pairs: list = field(default_factory=list)
    rmse: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)
    crlb: dict = field(default_factory=dict)
    n_truth: int = 0
    detections: int = 0
    misses: int = 0
    false_alarms: int = 0
    ic_nmse: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary(self):
        return {"rmse": self.rmse, "bias": self.bias, "crlb": self.crlb, "n_truth": self.n_truth,
                "detections": self.detections, "misses": self.misses,
                "false_alarms": self.false_alarms, "ic_nmse": self.ic_nmse, "meta": self.meta,
                "efficiency": crlb_compare(self, threshold=self.meta.get("crlb_threshold", 3.0))}

    def write(self, directory):
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "pairs.csv", self.pairs, _PAIR_FIELDS)
        (out / "report.json").write_text(json.dumps(_jsonable(self.summary()), indent=1))


_PAIR_FIELDS = ["snapshot", "bs", "port", "est_id", "truth_id", "err_tau_s", "err_azimuth_deg",
                "err_elevation_deg", "crlb_tau_s2", "crlb_azimuth_deg2", "crlb_elevation_deg2"]


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not np.isfinite(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_csv(path, rows, fields=None):
    rows = list(rows)
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = int(v)
            except ValueError:
                try:
                    r[k] = float(v)
                except ValueError:
                    pass
    return rows


def _record_crlb(rec):
    """CRLB variances of a path record in (s^2, deg^2, deg^2)."""
    return (rec.get("crlb_tau_s2", np.nan),
            np.degrees(np.sqrt(rec.get("crlb_azimuth_rad2", np.nan))) ** 2,
            np.degrees(np.sqrt(rec.get("crlb_elevation_rad2", np.nan))) ** 2)


def evaluate(records, truth, delay_bin, gates=GATES, ic_nmse=None, meta=None):
    """Score path records against truth[snapshot][bs] PathSets.

    Every (snapshot, bs, port) group of records is matched independently;
    groups with no records count all of their true paths as misses.
    """
    groups = {}
    for r in records:
        groups.setdefault((int(r["snapshot"]), int(r["bs"]), int(r.get("port", 0))), []).append(r)
    ports = sorted({k[2] for k in groups}) or [0]
    rep = EvalReport(ic_nmse=list(ic_nmse or []), meta=dict(meta or {}))
    errs, crlbs = [], []
    for s, per_bs in enumerate(truth):
        for q, ps in enumerate(per_bs):
            for p in ports:
                recs = groups.get((s, q, p), [])
                a = match_paths(recs, ps, delay_bin, gates)
                rep.n_truth += ps.tau.size
                rep.detections += len(a.pairs)
                rep.misses += len(a.misses)
                rep.false_alarms += len(a.false_alarms)
                for (i, j), e in zip(a.pairs, a.errors):
                    c = _record_crlb(recs[i])
                    errs.append(e)
                    crlbs.append(c)
                    rep.pairs.append(dict(zip(_PAIR_FIELDS, (s, q, p, recs[i].get("path_id", i), int(j),
                                                            *e, *c))))
    errs = np.array(errs).reshape(-1, 3)
    crlbs = np.array(crlbs, float).reshape(-1, 3)
    for k, name in enumerate(PARAMS):
        if errs.shape[0]:
            rep.rmse[name] = float(np.sqrt(np.mean(errs[:, k] ** 2)))
            rep.bias[name] = float(np.mean(errs[:, k]))
            rep.crlb[name] = float(np.mean(crlbs[:, k]))
        else:
            rep.rmse[name] = rep.bias[name] = rep.crlb[name] = float("nan")
    return rep


def crlb_compare(report, fim_diags=None, threshold=3.0):
    """RMSE / sqrt(CRLB) per parameter.

    ``fim_diags`` optionally overrides the report's CRLB: an array of
    per-pair CRLB variances (K, 3) or a mapping parameter -> variance.
    A ratio is unavailable when the bound is singular or non-finite; it is
    flagged when unavailable or above ``threshold``.
    """
    if fim_diags is None:
        bound = report.crlb
    elif isinstance(fim_diags, dict):
        bound = fim_diags
    else:
        arr = np.asarray(fim_diags, float).reshape(-1, 3)
        bound = {name: float(np.mean(arr[:, k])) for k, name in enumerate(PARAMS)}
    out = {}
    for name in PARAMS:
        b = bound.get(name, np.nan)
        rmse = report.rmse.get(name, np.nan)
        available = bool(np.isfinite(b) and b > 0 and np.isfinite(rmse))
        ratio = rmse / np.sqrt(b) if available else float("nan")
        out[name] = {"ratio": float(ratio), "available": available,
                     "flag": (not available) or ratio > threshold}
    return out


# --- drive sweeps ---------------------------------------------------------------

@dataclass
class SweepResult:
    """Heat-map tables and tracks of a trajectory sweep."""

    delay_power: list
    azimuth_power: list
    truth_track: list
    estimated_track: list
    records: list
    report: EvalReport
    meta: dict = field(default_factory=dict)

    def write(self, directory):
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "delay_power.csv", self.delay_power,
                  ["snapshot", "time_s", "bs", "path_id", "tau_s", "power_db"])
        write_csv(out / "azimuth_power.csv", self.azimuth_power,
                  ["snapshot", "time_s", "bs", "path_id", "azimuth_deg", "power_db"])
        write_csv(out / "truth_track.csv", self.truth_track)
        write_csv(out / "estimated_track.csv", self.estimated_track)
        write_csv(out / "paths.csv", self.records)
        self.report.write(out)
        (out / "sweep.json").write_text(json.dumps(_jsonable({"meta": self.meta,
                                                              "summary": self.report.summary()}), indent=1))


def track_path(ps):
    """Index of the first-arriving path (the LOS in geometric scenarios)."""
    return int(np.argmin(ps.tau)) if ps.tau.size else None


def separate_cells(ss, ic_cfg=None, threads=1):
    """Per-cell channel estimates (Q, S, M, P, N_f) and the IC result (or None)."""
    if len(ss.cells) == 1:
        return ss.demask(0)[None], None
    res = cancel_interference(ss.y, ss.cells, ic_cfg or IcConfig(), ss.delay_spacing,
                              h_true=ss.h_true, threads=threads)
    return res.h, res


def trajectory_sweep(cfg, manifold, ic_cfg=None, rimax_cfg=None, threads=1, port=0, gates=GATES):
    """Simulate a drive, separate the cells, estimate paths and tabulate tracks."""
    ss = synthesize(cfg, manifold)
    h, ic = separate_cells(ss, ic_cfg, threads)
    n_f = h.shape[-1]
    delay_bin = 1.0 / (n_f * ss.delay_spacing)
    records = []
    for q in range(len(ss.cells)):
        recs, _ = estimate_snapshots(h[q], manifold, rimax_cfg, ss.velocity, ss.delay_spacing,
                                     ports=[port], threads=threads, bs=q)
        records.extend(recs)
    delay_power, azimuth_power, truth_track, est_track = [], [], [], []
    for r in records:
        t = float(ss.times[r["snapshot"]])
        delay_power.append({"snapshot": r["snapshot"], "time_s": t, "bs": r["bs"], "path_id": r["path_id"],
                            "tau_s": r["tau_s"], "power_db": r["power_db"]})
        azimuth_power.append({"snapshot": r["snapshot"], "time_s": t, "bs": r["bs"],
                              "path_id": r["path_id"], "azimuth_deg": r["azimuth_deg"],
                              "power_db": r["power_db"]})
    for s, per_bs in enumerate(ss.truth):
        for q, ps in enumerate(per_bs):
            k = track_path(ps)
            if k is None:
                continue
            los = PathSet(ps.tau[[k]], ps.azimuth[[k]], ps.elevation[[k]], ps.gamma_hh[[k]])
            truth_track.append({"snapshot": s, "time_s": float(ss.times[s]), "bs": q,
                                "tau_s": float(los.tau[0]),
                                "azimuth_deg": float(np.degrees(los.azimuth[0])),
                                "elevation_deg": float(np.degrees(los.elevation[0]))})
            recs = [r for r in records if r["snapshot"] == s and r["bs"] == q]
            a = match_paths(recs, los, delay_bin, gates)
            row = {"snapshot": s, "time_s": float(ss.times[s]), "bs": q, "matched": bool(len(a.pairs)),
                   "tau_s": np.nan, "azimuth_deg": np.nan, "elevation_deg": np.nan, "power_db": np.nan}
            if len(a.pairs):
                r = recs[a.pairs[0, 0]]
                row.update(tau_s=r["tau_s"], azimuth_deg=r["azimuth_deg"],
                           elevation_deg=r["elevation_deg"], power_db=r["power_db"])
            est_track.append(row)
    nmse = [] if ic is None or ic.error is None else ic.nmse().tolist()
    report = evaluate(records, ss.truth, delay_bin, gates, ic_nmse=nmse,
                      meta={"snapshots": len(ss.truth), "cells": [c.cell_id for c in ss.cells],
                            "seed": cfg.seed})
    meta = {"mode": cfg.mode, "snapshots": len(ss.truth), "delay_bin_s": delay_bin,
            "cells": [c.cell_id for c in ss.cells], "seed": cfg.seed}
    return SweepResult(delay_power, azimuth_power, truth_track, est_track, records, report, meta)
