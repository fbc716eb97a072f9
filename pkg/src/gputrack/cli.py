"""Command-line entry point: synthesis, extraction, tracking, evaluation and reports.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Errors are reported as one JSON line on stderr with ``code``, ``message`` and
``context`` fields.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import mcmc, smc, synthgen
from .extract import ExtractionConfig, extract_from_manifest, read_observations, write_observations
from .metrics import evaluate, read_ground_truth, read_report, write_report
from .model import PRESET_PETS, PRESET_SYNTHETIC, Hyperparams
from .report import line_chart, svg_document
from .tracks import read_tracks, state_to_tracks, tracks_to_boxes, write_tracks

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PRESETS = {"synthetic": PRESET_SYNTHETIC, "pets": PRESET_PETS}
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Validated parameters of one command, echoed into output headers."""

    command: str
    params: dict

    def header(self) -> dict:
        return {"command": self.command, "config": self.params, "seed": self.params.get("seed")}


# ----------------------------------------------------------------------------- parser


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _add_hyper_args(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="synthetic",
                   help="hyperparameter preset; explicit flags override it")
    p.add_argument("--alpha", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--M", type=int)
    p.add_argument("--kappa0", type=float)
    p.add_argument("--nu0", type=float)
    p.add_argument("--q0", type=float, help="uniform Dirichlet concentration per hue bin")
    p.add_argument("--aux-trials", type=int)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gputrack", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"gputrack {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scenario")
    p.add_argument("scenario", choices=synthgen.SCENARIOS)
    p.add_argument("out")

    p = sub.add_parser("extract", help="frames -> observations (JSON lines)")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--tau", type=int, default=ExtractionConfig.diff_threshold, help="difference threshold")
    p.add_argument("--L", type=int, default=ExtractionConfig().L, help="odd patch side length")
    p.add_argument("--V", type=int, default=ExtractionConfig.hue_bins, help="hue bins")
    p.add_argument("--cap", type=int, default=ExtractionConfig.max_obs_per_frame,
                   help="max observations per frame (0 disables)")
    p.add_argument("--scale", type=_positive_float, default=None, help="pixels per scene unit")
    p.add_argument("--saturation-floor", type=float, default=ExtractionConfig.saturation_floor)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("track-mcmc", help="Gibbs sampler -> MAP state")
    p.add_argument("obs")
    p.add_argument("out")
    p.add_argument("--sweeps", type=int, default=200)
    p.add_argument("--init", choices=mcmc.INIT_STRATEGIES, default="sequential-urn")
    p.add_argument("--lifetime-slack", type=int, default=50)
    p.add_argument("--diagnostics", help="per-sweep CSV path")
    p.add_argument("--timing", action="store_true", help="add wall time to the diagnostics CSV")
    _add_hyper_args(p)

    p = sub.add_parser("track-smc", help="particle filter -> MAP state")
    p.add_argument("obs")
    p.add_argument("out")
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--gibbs-sweeps", type=int, default=3)
    p.add_argument("--resample", choices=smc.RESAMPLE_MODES, default="every-step")
    p.add_argument("--ess-fraction", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--diagnostics", help="per-frame CSV path")
    p.add_argument("--timing", action="store_true", help="add wall time to the diagnostics CSV")
    _add_hyper_args(p)

    p = sub.add_parser("tracks", help="MAP state -> per-object tracks")
    p.add_argument("state")
    p.add_argument("out")
    p.add_argument("--confidence", type=float, default=0.5)

    p = sub.add_parser("eval", help="score tracks against ground truth")
    p.add_argument("tracks")
    p.add_argument("gt")
    p.add_argument("report")
    p.add_argument("--csv", help="per-frame FDA CSV path")

    p = sub.add_parser("report", help="SVG charts from reports and confidence sweeps")
    p.add_argument("inputs", nargs="+", help="report JSON and/or sweep CSV files, then the output SVG")

    p = sub.add_parser("sweep-confidence", help="SFDA/ATA over a grid of confidence levels")
    p.add_argument("state")
    p.add_argument("gt")
    p.add_argument("out")
    p.add_argument("--grid", type=float, nargs="+", default=list(DEFAULT_GRID))
    return ap


# ----------------------------------------------------------------------------- config


def hyper_from_args(args) -> Hyperparams:
    base = PRESETS[args.preset]
    changes = {}
    for name in ("alpha", "rho", "M", "kappa0", "nu0"):
        v = getattr(args, name)
        if v is not None:
            changes[name] = v
    if args.q0 is not None:
        changes["q0"] = np.full(base.V, float(args.q0))
    if args.aux_trials is not None:
        changes["aux_trials"] = args.aux_trials
    try:
        return base.replace(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def extraction_from_args(args) -> ExtractionConfig:
    if args.L < 1 or args.L % 2 == 0:
        raise ConfigError(f"--L must be a positive odd integer, got {args.L}")
    try:
        return ExtractionConfig(diff_threshold=args.tau, patch_half_width=(args.L - 1) // 2, hue_bins=args.V,
                                max_obs_per_frame=args.cap or None, saturation_floor=args.saturation_floor,
                                spatial_scale=args.scale, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _config(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load(fn, path):
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    try:
        return fn(path)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _geometry(state):
    obs_meta = state.meta.get("observations", {})
    try:
        width, height = int(obs_meta["width"]), int(obs_meta["height"])
        extraction = ExtractionConfig(**obs_meta["extraction"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError("state file lacks the observation geometry (width, height, extraction)") from exc
    return width, height, extraction


# ----------------------------------------------------------------------------- commands


def cmd_synth(args):
    manifest = synthgen.generate_scenario(args.scenario, args.out)
    print(manifest)


def cmd_extract(args):
    cfg = extraction_from_args(args)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    obs = _load(lambda p: extract_from_manifest(p, cfg, workers=args.workers), args.manifest)
    run = RunConfig("extract", {**cfg.to_dict(), "manifest": str(args.manifest)})
    write_observations(args.out, obs, {"run": run.header()})
    print(f"{obs.N} observations over {obs.T} frames")


def _read_obs(path):
    obs = _load(read_observations, path)
    if obs.N == 0:
        raise DataError(f"{path}: no observations")
    return obs


def _finish_state(state, obs, run: RunConfig, out):
    state.meta["observations"] = {k: obs.meta[k] for k in ("width", "height", "extraction") if k in obs.meta}
    state.meta["run"] = run.header()
    mcmc.write_state(out, state, run.params)


def cmd_track_mcmc(args):
    hyper = hyper_from_args(args)
    obs = _read_obs(args.obs)
    hyper = _config(hyper.with_bins, obs.V)
    cfg = _config(mcmc.McmcConfig, sweeps=args.sweeps, seed=args.seed, hyper=hyper, init_strategy=args.init,
                  lifetime_slack=args.lifetime_slack)
    run = RunConfig("track-mcmc", {**cfg.to_dict(), "preset": args.preset, "obs": str(args.obs)})
    res = mcmc.run_mcmc(obs, cfg)
    _finish_state(res.map_state, obs, run, args.out)
    if args.diagnostics:
        mcmc.write_diagnostics(args.diagnostics, res.diagnostics, run.params, include_timing=args.timing)
    print(f"MAP log joint {res.map_state.log_score:.3f} with {len(res.map_state.labels)} clusters")


def cmd_track_smc(args):
    hyper = hyper_from_args(args)
    obs = _read_obs(args.obs)
    hyper = _config(hyper.with_bins, obs.V)
    cfg = _config(smc.SmcConfig, particles=args.particles, gibbs_sweeps=args.gibbs_sweeps,
                  resample_mode=args.resample, ess_fraction=args.ess_fraction, seed=args.seed, hyper=hyper,
                  workers=args.workers)
    params = {**cfg.to_dict(), "preset": args.preset, "obs": str(args.obs)}
    params.pop("workers", None)  # results do not depend on the worker count
    run = RunConfig("track-smc", params)
    res = smc.run_smc(obs, cfg)
    _finish_state(res.map_state, obs, run, args.out)
    if args.diagnostics:
        smc.write_diagnostics(args.diagnostics, res.diagnostics, run.params, include_timing=args.timing)
    print(f"MAP score {res.map_state.log_score:.3f} with {len(res.map_state.labels)} clusters")


def _check_confidence(c):
    if not 0 < c < 1:
        raise ConfigError(f"confidence must lie in (0, 1), got {c}")


def cmd_tracks(args):
    _check_confidence(args.confidence)
    state = _load(mcmc.read_state, args.state)
    width, height, extraction = _geometry(state)
    tracks = state_to_tracks(state, args.confidence, width, height, extraction)
    run = RunConfig("tracks", {"confidence": args.confidence, "state": str(args.state),
                               "seed": state.meta.get("run", {}).get("seed")})
    write_tracks(args.out, tracks, run.header())
    print(f"{len(tracks)} tracks")


def cmd_eval(args):
    tracks = _load(read_tracks, args.tracks)
    gt = _load(read_ground_truth, args.gt)
    header = json.loads(Path(args.tracks).read_text()).get("header", {})
    meta = RunConfig("eval", {"tracks": str(args.tracks), "gt": str(args.gt),
                              "confidence": header.get("config", {}).get("confidence"),
                              "seed": header.get("seed")}).header()
    rep = evaluate(gt, tracks, meta)
    write_report(args.report, rep, args.csv)
    print(f"SFDA {rep.sfda:.4f} ATA {rep.ata:.4f}")


def sweep_rows(state, gt, grid):
    width, height, extraction = _geometry(state)
    rows = []
    for c in grid:
        _check_confidence(c)
        rep = evaluate(gt, tracks_to_boxes(state_to_tracks(state, c, width, height, extraction)))
        rows.append((float(c), rep.sfda, rep.ata))
    return rows


def cmd_sweep(args):
    state = _load(mcmc.read_state, args.state)
    gt = _load(read_ground_truth, args.gt)
    rows = sweep_rows(state, gt, args.grid)
    run = RunConfig("sweep-confidence", {"state": str(args.state), "gt": str(args.gt), "grid": list(args.grid),
                                         "seed": state.meta.get("run", {}).get("seed")})
    with open(args.out, "w", newline="") as fh:
        fh.write("# " + json.dumps({"tool": "gputrack", "version": __version__, **run.header()},
                                   sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["confidence", "sfda", "ata"])
        for c, s, a in rows:
            w.writerow([repr(c), repr(s), repr(a)])
    best = max(rows, key=lambda r: r[2])
    print(f"best ATA {best[2]:.4f} at confidence {best[0]}")


def _read_sweep_csv(path):
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append((float(rec["confidence"]), float(rec["sfda"]), float(rec["ata"])))
    if not rows:
        raise ValueError(f"{path}: empty sweep")
    return rows


def cmd_report(args):
    if len(args.inputs) < 2:
        raise ConfigError("report needs at least one input and an output path")
    *inputs, out = args.inputs
    fda_series, sweep_series, confidence_points = [], [], []
    for path in inputs:
        if path.endswith(".csv"):
            rows = _load(_read_sweep_csv, path)
            name = Path(path).stem
            sweep_series.append((f"{name} SFDA", [r[0] for r in rows], [r[1] for r in rows]))
            sweep_series.append((f"{name} ATA", [r[0] for r in rows], [r[2] for r in rows]))
            continue
        doc = _load(read_report, path)
        try:
            rep = doc["report"]
            per = sorted((int(t), float(v)) for t, v in rep["fda_per_frame"].items())
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed report ({exc})") from exc
        fda_series.append((Path(path).stem, [t for t, _ in per], [v for _, v in per]))
        conf = doc.get("header", {}).get("config", {}).get("confidence")
        if conf is not None:
            confidence_points.append((float(conf), float(rep["sfda"]), float(rep["ata"])))
    if len(confidence_points) >= 2:
        confidence_points.sort()
        sweep_series.append(("reports SFDA", [p[0] for p in confidence_points], [p[1] for p in confidence_points]))
        sweep_series.append(("reports ATA", [p[0] for p in confidence_points], [p[2] for p in confidence_points]))
    groups, y = [], 0.0
    if fda_series:
        groups.append(line_chart(fda_series, "FDA per frame", "frame", "FDA", 0, y))
        y += 270
    if sweep_series:
        groups.append(line_chart(sweep_series, "SFDA and ATA against confidence", "confidence", "score", 0, y))
        y += 270
    comment = json.dumps({"tool": "gputrack", "version": __version__, "inputs": inputs}, sort_keys=True)
    Path(out).write_text(svg_document(groups, 560, max(y, 270), comment))
    print(out)


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "track-mcmc": cmd_track_mcmc,
    "track-smc": cmd_track_smc,
    "tracks": cmd_tracks,
    "eval": cmd_eval,
    "report": cmd_report,
    "sweep-confidence": cmd_sweep,
}


def _fail(code: int, message: str, context: str) -> int:
    print(json.dumps({"code": code, "message": message, "context": context}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; map its failures to the configuration code
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc), args.command)
    except (DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, str(exc), args.command)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc), args.command)
    return EXIT_OK
