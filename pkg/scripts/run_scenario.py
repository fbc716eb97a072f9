"""Render a synthetic scenario and run the full command-line pipeline on it.

Usage: python3 scripts/run_scenario.py cross-reverse out/ --sampler mcmc --sweeps 200
Produces observations, the MAP state, tracks, an evaluation report, a
confidence sweep and an SVG chart inside the output directory.
"""
import argparse
import sys
from pathlib import Path

from gputrack import cli, synthgen


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario", choices=synthgen.SCENARIOS)
    ap.add_argument("out")
    ap.add_argument("--sampler", choices=("mcmc", "smc"), default="mcmc")
    ap.add_argument("--sweeps", type=int, default=200, help="MCMC sweeps")
    ap.add_argument("--particles", type=int, default=100, help="SMC particles")
    ap.add_argument("--cap", type=int, default=300, help="observations per frame")
    ap.add_argument("--confidence", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = out / "scene"
    steps = [
        ["synth", args.scenario, scene],
        ["extract", scene / "manifest.json", out / "obs.jsonl", "--cap", args.cap, "--workers", args.workers],
    ]
    if args.sampler == "mcmc":
        steps.append(["track-mcmc", out / "obs.jsonl", out / "state.json", "--sweeps", args.sweeps,
                      "--seed", args.seed, "--diagnostics", out / "diagnostics.csv"])
    else:
        steps.append(["track-smc", out / "obs.jsonl", out / "state.json", "--particles", args.particles,
                      "--seed", args.seed, "--workers", args.workers, "--diagnostics", out / "diagnostics.csv"])
    steps += [
        ["tracks", out / "state.json", out / "tracks.json", "--confidence", args.confidence],
        ["eval", out / "tracks.json", scene / "gt.json", out / "report.json", "--csv", out / "fda.csv"],
        ["sweep-confidence", out / "state.json", scene / "gt.json", out / "sweep.csv"],
        ["report", out / "report.json", out / "sweep.csv", out / "chart.svg"],
    ]
    for step in steps:
        print("$ gputrack " + " ".join(str(a) for a in step), flush=True)
        code = cli.main([str(a) for a in step])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
