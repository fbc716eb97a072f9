"""Compare both samplers on the two-frame toy problem against exhaustive enumeration.

Usage: python3 scripts/toy_oracle_check.py [--sweeps 100000] [--particles 2000 --reps 50]
Prints the enumerated posterior next to the MCMC partition frequencies and
the SMC weighted cluster-count estimate.
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import toy_oracle  # noqa: E402
from conftest import TOY_HYPER, TOY_SLACK, toy_observations  # noqa: E402
from gputrack import mcmc, smc  # noqa: E402


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sweeps", type=int, default=100_000)
    ap.add_argument("--particles", type=int, default=2000)
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    parts, dels, counts = toy_oracle.posterior()
    print(f"enumeration {time.perf_counter() - t0:.1f}s")

    freq = {}

    def record(state, diag):
        key = toy_oracle.canonical_partition(state.assign.tolist())
        freq[key] = freq.get(key, 0) + 1

    mcmc.run_mcmc(toy_observations(), mcmc.McmcConfig(sweeps=args.sweeps, seed=0, hyper=TOY_HYPER,
                                                      lifetime_slack=TOY_SLACK), callback=record)
    print("partition                      exact    mcmc")
    for key, p in sorted(parts.items(), key=lambda kv: -kv[1]):
        print(f"{str(key):30s} {p:.4f}   {freq.get(key, 0) / args.sweeps:.4f}")

    est = {}
    for r in range(args.reps):
        res = smc.run_smc(toy_observations(), smc.SmcConfig(particles=args.particles, gibbs_sweeps=3, seed=r,
                                                            hyper=TOY_HYPER))
        for k, w in zip(res.final_K, np.exp(res.final_log_weights)):
            est[int(k)] = est.get(int(k), 0.0) + w / args.reps
    print("clusters  exact    smc")
    for k in sorted(set(counts) | set(est)):
        print(f"{k:8d}  {counts.get(k, 0.0):.4f}   {est.get(k, 0.0):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
