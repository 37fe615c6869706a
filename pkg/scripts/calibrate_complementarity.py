"""Run the latitude-binned block-matching comparison on calibration seeds and freeze thresholds.

The acceptance suite reads calibration/complementarity.json and replays the
protocol on a disjoint set of seeds.
"""
import argparse
import json
import os
import time

from panoflow import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--min-monotone", type=int, default=8)
    ap.add_argument("--min-tricyl-wins", type=int, default=7)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "calibration", "complementarity.json"))
    args = ap.parse_args()

    protocol = ex.ComplementarityProtocol()
    trials = []
    for seed in args.seeds:
        t0 = time.time()
        trial = ex.complementarity_trial(seed, protocol)
        trials.append(trial)
        bins = " ".join(f"{e:.2f}" for e in trial.equirect_bins)
        print(
            f"seed {seed:3d}  E bins [{bins}]  high-lat E {trial.equirect_high:.2f} C {trial.tricyl_high:.2f}"
            f"  monotone={trial.monotone} C-wins={trial.tricyl_wins_high}  ({time.time() - t0:.1f}s)"
        )
    record = ex.calibration_record(protocol, trials, args.min_monotone, args.min_tricyl_wins)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as f:
        json.dump(record, f, indent=2)
    obs = record["observed"]
    print(f"monotone {obs['monotone']}/{len(trials)}, tri-cylinder wins {obs['tricyl_wins_high']}/{len(trials)} -> {args.out}")


if __name__ == "__main__":
    main()
