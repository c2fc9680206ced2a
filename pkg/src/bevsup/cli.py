"""Command-line entry point.

Exit codes: 0 success, 1 a quantitative check failed, 2 bad input.
All structured output is JSON with sorted keys, so reruns diff cleanly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bev import MaskPolicy, build_bev_ground_truth, derive_frame0_up, gravity_rotation, save_bev
from .evaluation import (RecordMismatchError, build_records, gt_to_bev, position_metrics, read_ground_truth,
                         read_predictions, uncertainty_partition, write_per_sample_csv, write_predictions)
from .gradcheck import loss_gradient_errors
from .losses import LossWeights
from .orientation import ROUND_TRIP_BOUND, OrientationCodec, sweep_round_trip
from .scene import SceneError, load_scene, patch_grid, sample_frames
from .synth import SynthSpec, make_scene, to_sequence, write_synth
from .trainer import ExperimentSpec, TaskSpec, TrainConfig, TrainingDivergedError, run_toy_experiment

log = logging.getLogger("bevsup")

GRADCHECK_TOL = 1e-4
EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad flags or input files; maps to exit code 2."""


@dataclass(frozen=True)
class CliConfig:
    subcommand: str
    seed: int = 0
    out: str | None = None
    policy: MaskPolicy = field(default_factory=MaskPolicy)
    codec: OrientationCodec = field(default_factory=OrientationCodec)
    weights: LossWeights = field(default_factory=LossWeights)
    patch_size: int = 14
    frames: int = 32
    verbosity: int = 0

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "CliConfig":
        try:
            cfg = cls(subcommand=args.cmd, seed=args.seed, out=args.out,
                      policy=MaskPolicy(args.rel_std_threshold, args.min_valid_fraction),
                      codec=OrientationCodec(args.bins, args.sigma_ori),
                      weights=LossWeights(args.lambda_bev, args.lambda_sit, args.lambda_ori),
                      patch_size=args.patch_size, frames=args.frames, verbosity=args.verbose)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if cfg.patch_size < 1:
            raise InputError("--patch-size must be >= 1")
        if cfg.frames < 1:
            raise InputError("--frames must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "policy": asdict(self.policy),
                "codec": self.codec.header(), "weights": asdict(self.weights),
                "patch_size": self.patch_size, "frames": self.frames}


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def _emit(obj, path: str | Path | None = None) -> None:
    text = _dumps(obj)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


def _load(path: str):
    try:
        return load_scene(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None


# -- subcommands ---------------------------------------------------------------

def cmd_bevgt(cfg: CliConfig, args) -> int:
    if not args.scene or len(args.scene) != 1:
        raise InputError("bevgt needs exactly one --scene manifest")
    if cfg.out is None:
        raise InputError("bevgt needs --out")
    seq = sample_frames(_load(args.scene[0]), cfg.frames)
    spec = patch_grid(seq.frames[0].intrinsics, cfg.patch_size)
    gt = build_bev_ground_truth(seq, spec, cfg.policy)
    save_bev(gt, cfg.out)
    total = gt.n_patches
    summary = {"scene_id": gt.scene_id, "frames": [f.index for f in gt.frames],
               "valid": gt.n_valid, "masked": total - gt.n_valid, "out": str(cfg.out)}
    print(_dumps(summary))
    return EXIT_OK


def _scene_rotations(paths):
    scenes, r_aligns = {}, {}
    for p in paths:
        seq = _load(p)
        if seq.scene_id in scenes:
            raise InputError(f"scene {seq.scene_id!r} given twice")
        scenes[seq.scene_id] = seq
        r_aligns[seq.scene_id] = gravity_rotation(derive_frame0_up(seq))
    return scenes, r_aligns


def cmd_eval(cfg: CliConfig, args) -> int:
    if not (args.pred and args.gt and args.scene):
        raise InputError("eval needs --pred, --gt and at least one --scene")
    header, preds = read_predictions(args.pred)
    codec = cfg.codec.header()
    if header is not None and "codec" in header and header["codec"] != codec:
        raise InputError(f"{args.pred}: codec header {header['codec']} does not match {codec}")
    gts = read_ground_truth(args.gt)
    scenes, r_aligns = _scene_rotations(args.scene)
    records = build_records(preds, gts, scenes, r_aligns)
    result = {"codec": codec, "metrics": position_metrics(records).to_dict()}
    if args.partition:
        result["partition"] = uncertainty_partition(records).to_dict()
    if args.per_sample:
        write_per_sample_csv(args.per_sample, records)
    _emit(result, cfg.out)
    return EXIT_OK


def _noisy_predictions(scene, rng, pos_noise: float, yaw_noise_deg: float):
    seq = to_sequence(scene)
    r_align = gravity_rotation(derive_frame0_up(seq))
    rows = []
    for a in scene.agent_poses:
        bev, yaw = gt_to_bev(a, seq, r_align)
        dx, dz = rng.normal(0.0, pos_noise, size=2) if pos_noise > 0 else (0.0, 0.0)
        dy = math.radians(rng.normal(0.0, yaw_noise_deg)) if yaw_noise_deg > 0 else 0.0
        lv = 2.0 * math.log(max(pos_noise, 1e-3))
        rows.append({"sample_id": a.sample_id, "scene_id": a.scene_id,
                     "pred": {"x": float(bev[0] + dx), "z": float(bev[1] + dz), "log_var_x": lv, "log_var_z": lv,
                              "yaw": float(math.remainder(yaw + dy, 2 * math.pi))}})
    return rows


def cmd_synth(cfg: CliConfig, args) -> int:
    if cfg.out is None:
        raise InputError("synth needs --out")
    if args.n_scenes < 1:
        raise InputError("--n-scenes must be >= 1")
    out = Path(cfg.out)
    spec = SynthSpec(n_frames=args.scene_frames)
    rng = np.random.default_rng(cfg.seed)
    listing, preds = [], []
    for k in range(args.n_scenes):
        seed = cfg.seed * 1000 + k
        scene = make_scene(seed, spec)
        manifest, gt_path = write_synth(scene, out / scene.scene_id)
        listing.append({"scene_id": scene.scene_id, "manifest": str(manifest), "gt": str(gt_path)})
        preds.extend(_noisy_predictions(scene, rng, args.pred_noise, args.yaw_noise))
    write_predictions(out / "pred.jsonl", preds, cfg.codec.header())
    gt_all = out / "gt.jsonl"
    gt_all.write_text("".join(Path(s["gt"]).read_text() for s in listing))
    index = {"scenes": listing, "pred": str(out / "pred.jsonl"), "gt": str(gt_all), "seed": cfg.seed}
    _emit(index, out / "index.json")
    return EXIT_OK


def cmd_gradcheck(cfg: CliConfig, args) -> int:
    errs = loss_gradient_errors(n=args.instances, seed=cfg.seed, codec=cfg.codec, weights=cfg.weights)
    ok = all(v <= GRADCHECK_TOL for v in errs.values())
    _emit({"max_relative_error": errs, "tolerance": GRADCHECK_TOL, "instances": args.instances,
           "seed": cfg.seed, "passed": ok}, cfg.out)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_codec(cfg: CliConfig, args) -> int:
    bound = args.bound
    if bound is None:
        bound = ROUND_TRIP_BOUND if cfg.codec == OrientationCodec() else math.radians(1.0)
    err = sweep_round_trip(cfg.codec, args.angles, cfg.seed)
    ok = err <= bound
    _emit({"codec": cfg.codec.header(), "angles": args.angles, "seed": cfg.seed,
           "max_error_rad": err, "max_error_deg": math.degrees(err), "bound_rad": bound, "passed": ok}, cfg.out)
    return EXIT_OK if ok else EXIT_CHECK


def _write_curve(path: Path, curves: dict[str, np.ndarray]) -> None:
    names = sorted(curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + names)
        for i in range(len(curves[names[0]])):
            w.writerow([i] + [repr(float(curves[n][i])) for n in names])


def _parse_scales(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise InputError(f"--noise-scales must be comma-separated numbers, got {text!r}") from None
    if not vals or any(not (v >= 0 and math.isfinite(v)) for v in vals):
        raise InputError("--noise-scales needs one or more finite values >= 0")
    return vals


def cmd_train(cfg: CliConfig, args) -> int:
    if cfg.out is None:
        raise InputError("train needs --out")
    try:
        tcfg = TrainConfig(lr=args.lr, steps=args.steps, seed=cfg.seed, weights=cfg.weights, codec=cfg.codec,
                           hidden=args.hidden, grad_clip=args.grad_clip if args.grad_clip > 0 else None)
        exp = ExperimentSpec(n_train=args.n_train, n_test=args.n_test,
                             noise_scales=_parse_scales(args.noise_scales), task=TaskSpec(extent=args.extent))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        metrics, curves = run_toy_experiment(tcfg, exp)
    except TrainingDivergedError as exc:
        log.error("%s", exc)
        return EXIT_CHECK
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_curve(out / "curve_layout.csv", curves["layout"])
    _write_curve(out / "curve_situation.csv", curves["situation"])
    meta = {"cli": cfg.to_dict(), "train": tcfg.to_dict(), "experiment": exp.to_dict(),
            "codec": cfg.codec.header()}
    (out / "metadata.json").write_text(_dumps(meta) + "\n")
    _emit(metrics, out / "metrics.json")
    return EXIT_OK


COMMANDS = {"bevgt": cmd_bevgt, "eval": cmd_eval, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck, "codec": cmd_codec, "train": cmd_train}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--bins", type=int, default=36)
    common.add_argument("--sigma-ori", "--sigma", dest="sigma_ori", type=float, default=2.0,
                        help="target spread in bin widths")
    common.add_argument("--lambda-bev", type=float, default=0.05)
    common.add_argument("--lambda-sit", type=float, default=0.075)
    common.add_argument("--lambda-ori", type=float, default=3.5)
    common.add_argument("--patch-size", type=int, default=14)
    common.add_argument("--rel-std-threshold", type=float, default=0.15)
    common.add_argument("--min-valid-fraction", type=float, default=0.5)
    common.add_argument("--frames", type=int, default=32, help="frames kept by uniform sampling")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="bevsup", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("bevgt", parents=[common], help="BEV ground truth for one scene")
    s.add_argument("--scene", action="append")

    s = sub.add_parser("eval", parents=[common], help="localization metrics")
    s.add_argument("--scene", action="append")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--per-sample", help="write a per-sample CSV here")
    s.add_argument("--partition", "--appendix-d", dest="partition", action="store_true",
                   help="add the success/failure uncertainty summary")

    s = sub.add_parser("synth", parents=[common], help="synthetic scenes with exact geometry")
    s.add_argument("--n-scenes", type=int, default=1)
    s.add_argument("--scene-frames", type=int, default=8)
    s.add_argument("--pred-noise", type=float, default=0.0, help="position noise (m) in the emitted predictions")
    s.add_argument("--yaw-noise", type=float, default=0.0, help="yaw noise (deg) in the emitted predictions")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--instances", type=int, default=1000)

    s = sub.add_parser("codec", parents=[common], help="orientation codec round-trip sweep")
    s.add_argument("--angles", type=int, default=10_000)
    s.add_argument("--bound", type=float, default=None, help="pass/fail bound in radians")

    s = sub.add_parser("train", parents=[common], help="toy training run")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--grad-clip", type=float, default=1.0, help="0 disables clipping")
    s.add_argument("--n-train", type=int, default=512)
    s.add_argument("--n-test", type=int, default=256)
    s.add_argument("--noise-scales", default="0.0")
    s.add_argument("--extent", type=float, default=0.5)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = CliConfig.from_args(args)
        return COMMANDS[args.cmd](cfg, args)
    except RecordMismatchError as exc:
        print(f"error: sample ids do not match: {exc}", file=sys.stderr)
    except (InputError, SceneError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
