"""Command-line driver: synth -> ic -> estimate -> eval, singly or chained.

Every command writes ``run_manifest.json`` into its output directory.  The
pipeline keeps one sub-directory per stage plus a ``stage.json`` marker; a
re-run skips every stage whose hash (config section, seed, version and
parent stage) and output digests still match.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import (
    RunConfig,
    canonical_json,
    config_hash,
    load_config,
    to_ic,
    to_manifold,
    to_rimax,
    to_scenario,
)
from .container import (
    SeparatedChannels,
    container_component,
    file_digest,
    read_eadf,
    read_separated,
    read_snapshots,
    read_truth,
    write_eadf,
    write_separated,
    write_snapshots,
)
from .errors import ConfigError, FormatError, NumericalError, SounderError
from .harness import evaluate, write_csv
from .icancel import cancel_interference
from .rimax import estimate_snapshots
from .synth import synthesize

log = logging.getLogger("ltesounder")

STAGES = ("synth", "ic", "estimate", "eval")
# config sections each stage depends on
STAGE_SECTIONS = {"synth": ("manifold", "scenario", "seed"), "ic": ("ic",),
                  "estimate": ("manifold", "rimax"), "eval": ("eval",)}
EADF_NAME = "manifold.eadf"
TELEMETRY_FIELDS = ["snapshot", "iteration", "residual_energy"]


@dataclass
class RunManifest:
    """Provenance of one command or pipeline run."""

    command: str
    config_hash: str
    seed: int
    version: str = __version__
    deterministic: bool = True
    threads: int = 1
    stages: dict = field(default_factory=dict)

    def write(self, directory):
        Path(directory, "run_manifest.json").write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def read(cls, directory):
        return cls(**json.loads(Path(directory, "run_manifest.json").read_text()))


def stage_hash(cfg, stage, parent=""):
    data = cfg.model_dump(mode="json")
    body = {"stage": stage, "version": __version__, "parent": parent,
            "config": {k: data[k] for k in STAGE_SECTIONS[stage]}}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def resolve_threads(value):
    if value is None:
        env = os.environ.get("SOUNDER_THREADS")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"SOUNDER_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError(f"thread count must be at least 1, got {value}")
    return value


def float_policy(deterministic):
    """Single-threaded BLAS in deterministic mode, so reductions have a fixed order."""
    return threadpool_limits(limits=1) if deterministic else nullcontext()


def _digests(directory, names):
    return {n: file_digest(Path(directory) / n) for n in names if (Path(directory) / n).is_file()}


# --- stages ----------------------------------------------------------------------

def run_synth(cfg, out, threads=1):
    out = Path(out)
    manifold = to_manifold(cfg.manifold)
    ss = synthesize(to_scenario(cfg), manifold)
    write_snapshots(out, ss, config=cfg.model_dump(mode="json"))
    write_eadf(out / EADF_NAME, manifold)
    log.info("synth: %d snapshots, %d antennas, %d cells -> %s", ss.y.shape[0], ss.y.shape[1],
             len(ss.cells), out)
    return {"inputs": [], "outputs": [str(out)], "digests": _digests(out, ["y.bin", "h_true.bin", EADF_NAME])}


def run_ic(cfg, input_dir, out, threads=1):
    out = Path(out)
    ss = read_snapshots(input_dir)
    telemetry = []
    if len(ss.cells) == 1:
        h = ss.demask(0)[None]
    else:
        res = cancel_interference(ss.y, ss.cells, to_ic(cfg.ic), ss.delay_spacing, h_true=ss.h_true,
                                  threads=threads)
        h = res.h
        telemetry = res.telemetry()
        if res.error is not None:
            ss.meta["ic_nmse"] = res.nmse().tolist()
    digests = write_separated(out, SeparatedChannels.from_snapshots(ss, h))
    fields = TELEMETRY_FIELDS + [f"nmse_bs{q}" for q in range(len(ss.cells))
                                 if telemetry and f"nmse_bs{q}" in telemetry[0]]
    write_csv(out / "telemetry.csv", telemetry, fields)
    if Path(input_dir, EADF_NAME).is_file():
        shutil.copyfile(Path(input_dir, EADF_NAME), out / EADF_NAME)
    log.info("ic: %d cells separated -> %s", len(ss.cells), out)
    return {"inputs": [str(input_dir)], "outputs": [str(out)],
            "digests": {**digests, **_digests(out, ["telemetry.csv"])}}


def _load_channels(input_dir):
    """Per-cell channels, delay spacing and metadata from a raw or hsep container."""
    kind = container_component(input_dir)
    if kind == "hsep":
        sep = read_separated(input_dir)
        return sep.h, sep.delay_spacing, sep.meta
    if kind == "raw":
        ss = read_snapshots(input_dir)
        if len(ss.cells) > 1:
            log.warning("raw container holds %d cells; estimating without interference cancellation",
                        len(ss.cells))
        return [ss.demask(q) for q in range(len(ss.cells))], ss.delay_spacing, ss.meta
    raise FormatError(f"{input_dir}: unsupported container component {kind!r}")


def run_estimate(cfg, input_dir, out, threads=1, manifold=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    h, spacing, meta = _load_channels(input_dir)
    truth = read_truth(input_dir)
    velocity = truth["velocity"]
    if not truth["has_velocity"]:
        log.warning("%s carries no velocity metadata; assuming a static receiver (v = 0)", input_dir)
        velocity = np.zeros(h[0].shape[0])
    if manifold is None:
        eadf = Path(input_dir, EADF_NAME)
        manifold = read_eadf(eadf) if eadf.is_file() else to_manifold(cfg.manifold)
    if manifold.M != h[0].shape[1]:
        raise ConfigError(f"manifold has {manifold.M} antennas, data has {h[0].shape[1]}")
    rcfg = to_rimax(cfg.rimax)
    records, dmc = [], []
    for q, hq in enumerate(h):
        recs, results = estimate_snapshots(hq, manifold, rcfg, velocity, spacing, ports=cfg.rimax.ports,
                                           threads=threads, bs=q)
        records.extend(recs)
        for (s, p), (_, d, diag) in results.items():
            dmc.append({"snapshot": s, "bs": q, "port": p, **d.as_dict(),
                        "loglik": float(diag["loglik"][-1]) if diag["loglik"] else float("nan")})
    n_f = h[0].shape[-1]
    info = {"delay_spacing": spacing, "n_f": n_f, "delay_bin_s": 1.0 / (n_f * spacing),
            "cells": len(h), "snapshots": h[0].shape[0], "velocity_available": truth["has_velocity"],
            "ic_nmse": meta.get("ic_nmse", [])}
    write_csv(out / "paths.csv", records, PATH_FIELDS)
    write_csv(out / "dmc.csv", dmc, DMC_FIELDS)
    (out / "paths.json").write_text(json.dumps({"meta": info, "paths": records, "dmc": dmc}, indent=1))
    log.info("estimate: %d paths over %d snapshot blocks -> %s", len(records), len(dmc), out)
    return {"inputs": [str(input_dir)], "outputs": [str(out)],
            "digests": _digests(out, ["paths.csv", "dmc.csv", "paths.json"])}


PATH_FIELDS = ["snapshot", "bs", "port", "path_id", "tau_s", "azimuth_deg", "elevation_deg", "abs_gamma_h",
               "abs_gamma_v", "power_db", "reliability", "crlb_tau_s2", "crlb_azimuth_rad2",
               "crlb_elevation_rad2"]
DMC_FIELDS = ["snapshot", "bs", "port", "alpha1", "beta_d", "tau_d", "sigma2", "loglik"]


def read_estimates(directory):
    path = Path(directory, "paths.json")
    if not path.is_file():
        raise FormatError(f"{directory}: no paths.json estimate file")
    try:
        data = json.loads(path.read_text())
        return data["meta"], data["paths"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: malformed estimate file ({exc})") from None


def run_eval(cfg, estimates_dir, truth_dir, out, threads=1):
    out = Path(out)
    meta, records = read_estimates(estimates_dir)
    truth = read_truth(truth_dir)["truth"]
    report = evaluate(records, truth, meta["delay_bin_s"], cfg.eval.gates, ic_nmse=meta.get("ic_nmse"),
                      meta={"crlb_threshold": cfg.eval.crlb_threshold, "snapshots": len(truth),
                            "delay_bin_s": meta["delay_bin_s"]})
    report.write(out)
    rows = [{k: r[k] for k in ("snapshot", "bs", "path_id", "tau_s", "power_db")} for r in records]
    write_csv(out / "delay_power.csv", rows, ["snapshot", "bs", "path_id", "tau_s", "power_db"])
    rows = [{k: r[k] for k in ("snapshot", "bs", "path_id", "azimuth_deg", "power_db")} for r in records]
    write_csv(out / "azimuth_power.csv", rows, ["snapshot", "bs", "path_id", "azimuth_deg", "power_db"])
    log.info("eval: %d/%d paths detected, %d false alarms", report.detections, report.n_truth,
             report.false_alarms)
    return {"inputs": [str(estimates_dir), str(truth_dir)], "outputs": [str(out)],
            "digests": _digests(out, ["pairs.csv", "report.json", "delay_power.csv", "azimuth_power.csv"])}


# --- pipeline ------------------------------------------------------------------

def _stage_complete(directory, h):
    marker = Path(directory, "stage.json")
    if not marker.is_file():
        return None
    try:
        info = json.loads(marker.read_text())
    except json.JSONDecodeError:
        return None
    if info.get("hash") != h:
        return None
    if _digests(directory, info.get("digests", {})) != info.get("digests"):
        return None
    return info


def run_pipeline(cfg, out, threads=1, deterministic=True, manifest=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = {s: out / s for s in STAGES}
    runners = {
        "synth": lambda: run_synth(cfg, dirs["synth"], threads),
        "ic": lambda: run_ic(cfg, dirs["synth"], dirs["ic"], threads),
        "estimate": lambda: run_estimate(cfg, dirs["ic"], dirs["estimate"], threads),
        "eval": lambda: run_eval(cfg, dirs["estimate"], dirs["ic"], dirs["eval"], threads),
    }
    manifest = manifest or RunManifest("pipeline", config_hash(cfg), cfg.seed, deterministic=deterministic,
                                       threads=threads)
    parent = ""
    for stage in STAGES:
        h = stage_hash(cfg, stage, parent)
        done = _stage_complete(dirs[stage], h)
        if done is not None:
            log.info("%s: up to date, skipped", stage)
            manifest.stages[stage] = {**done, "resumed": True}
        else:
            if dirs[stage].exists():
                shutil.rmtree(dirs[stage])
            t0 = time.perf_counter()
            info = runners[stage]()
            info = {"hash": h, "parent": parent, "seconds": time.perf_counter() - t0, **info}
            Path(dirs[stage], "stage.json").write_text(json.dumps(info, indent=1))
            manifest.stages[stage] = {**info, "resumed": False}
        manifest.write(out)
        parent = h
    return manifest


# --- argument handling ------------------------------------------------------------

def _common(p, config_required=False):
    p.add_argument("--config", type=Path, required=config_required, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (default: $SOUNDER_THREADS or 1)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=True,
                      help="fixed reduction order; bitwise reproducible (default)")
    mode.add_argument("--fast", dest="deterministic", action="store_false",
                      help="allow multi-threaded BLAS; not bitwise reproducible")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="ltesounder", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="simulate a scenario into a raw container")
    _common(p, config_required=True)
    p = sub.add_parser("ic", help="separate per-cell channels")
    _common(p)
    p.add_argument("--input", type=Path, required=True, help="raw container")
    p = sub.add_parser("estimate", help="estimate specular paths and DMC per snapshot")
    _common(p)
    p.add_argument("--input", type=Path, required=True, help="hsep or raw container")
    p.add_argument("--manifold", type=Path, help="EADF file (default: the container's, else the config's)")
    p = sub.add_parser("eval", help="score estimates against ground truth")
    _common(p)
    p.add_argument("--estimates", type=Path, required=True, help="estimate directory")
    p.add_argument("--truth", type=Path, required=True, help="container holding the ground truth")
    p = sub.add_parser("pipeline", help="run synth, ic, estimate and eval with resume")
    _common(p, config_required=True)
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def dispatch(args):
    cfg = _config(args)
    threads = resolve_threads(args.threads)
    if args.command == "pipeline":
        with float_policy(args.deterministic):
            run_pipeline(cfg, args.out, threads, args.deterministic)
        return
    manifest = RunManifest(args.command, config_hash(cfg), cfg.seed, deterministic=args.deterministic,
                           threads=threads)
    t0 = time.perf_counter()
    with float_policy(args.deterministic):
        if args.command == "synth":
            info = run_synth(cfg, args.out, threads)
        elif args.command == "ic":
            info = run_ic(cfg, args.input, args.out, threads)
        elif args.command == "estimate":
            manifold = read_eadf(args.manifold) if args.manifold else None
            if manifold is None and args.config and not Path(args.input, EADF_NAME).is_file():
                manifold = to_manifold(cfg.manifold, args.config.parent)
            info = run_estimate(cfg, args.input, args.out, threads, manifold)
        else:
            info = run_eval(cfg, args.estimates, args.truth, args.out, threads)
    manifest.stages[args.command] = {"seconds": time.perf_counter() - t0, **info}
    manifest.write(args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except SounderError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        log.error("numerical failure: %s", exc)
        return NumericalError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
