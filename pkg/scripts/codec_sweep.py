"""Sweep the orientation codec over bin counts and target widths.

Prints the worst round-trip error (encode then soft-argmax decode) for each
(bins, sigma) pair. Sigma is in bin units.
"""
import argparse
import math

from bevsup.orientation import OrientationCodec, sweep_round_trip


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bins", default="8,18,36,72")
    ap.add_argument("--sigmas", default="0.5,1,2,4")
    ap.add_argument("--angles", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'bins':>5} {'sigma':>6} {'max_err_rad':>12} {'max_err_deg':>12}")
    for b in (int(x) for x in args.bins.split(",")):
        for s in (float(x) for x in args.sigmas.split(",")):
            err = sweep_round_trip(OrientationCodec(b, s), args.angles, args.seed)
            print(f"{b:5d} {s:6.2f} {err:12.3e} {math.degrees(err):12.3e}")


if __name__ == "__main__":
    main()
