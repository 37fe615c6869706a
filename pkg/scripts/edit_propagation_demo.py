"""Carry a disc sprite through 30 ground-truth frames and report centroid drift per frame."""
import argparse

from panoflow import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=30)
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--schedule", choices=("city", "eft"), default="city")
    args = ap.parse_args()

    track = ex.edit_drift_trial(args.seed, args.frames, args.width, schedule=args.schedule)
    worst = 0.0
    for t, (cen, ref, err) in enumerate(track):
        if t:
            worst = max(worst, err / t)
        where = "lost" if cen is None else f"({cen[0]:7.2f}, {cen[1]:7.2f})"
        print(f"frame {t:3d}  centroid {where}  reference ({ref[0]:7.2f}, {ref[1]:7.2f})  error {err:.3f} px")
    print(f"max drift {worst:.4f} px/frame")


if __name__ == "__main__":
    main()
