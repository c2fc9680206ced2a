"""Train the toy layout and situation heads and print held-out metrics.

With several noise scales the script also reports how predicted sigma tracks
the per-sample observation noise.
"""
import argparse
import json

from bevsup.trainer import ExperimentSpec, TaskSpec, TrainConfig, run_toy_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=500)
    ap.add_argument("--noise-scales", default="0.01,0.5")
    ap.add_argument("--extent", type=float, default=1.0)
    ap.add_argument("--curves", help="optional CSV path for the situation loss curve")
    args = ap.parse_args()

    cfg = TrainConfig(seed=args.seed, steps=args.steps)
    exp = ExperimentSpec(n_train=args.n_train, n_test=args.n_test,
                         noise_scales=tuple(float(s) for s in args.noise_scales.split(",")),
                         task=TaskSpec(extent=args.extent))
    metrics, curves = run_toy_experiment(cfg, exp)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    if args.curves:
        c = curves["situation"]
        with open(args.curves, "w") as fh:
            fh.write("step,ori,pos,total\n")
            for i, (o, p, t) in enumerate(zip(c["ori"], c["pos"], c["total"])):
                fh.write(f"{i},{o!r},{p!r},{t!r}\n")


if __name__ == "__main__":
    main()
