"""Language-based localization metrics in the first-frame BEV frame.

Ground-truth agent poses live in the dataset's world frame. They are mapped
into the BEV frame with the first camera pose and the gravity rotation, using
rotation and translation only, before any error is measured.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bev import project_bev
from .orientation import wrap, wrap_deg
from .scene import SceneSequence

POS_THRESHOLDS_M = (0.5, 1.0)
ANG_THRESHOLDS_DEG = (15.0, 30.0)
SUCCESS_POS_M = 1.0
SUCCESS_ANG_DEG = 45.0


class DegenerateHeadingError(ValueError):
    pass


class RecordMismatchError(ValueError):
    def __init__(self, missing_pred: Sequence[str], missing_gt: Sequence[str]):
        self.missing_pred = sorted(missing_pred)
        self.missing_gt = sorted(missing_gt)
        parts = []
        if self.missing_pred:
            parts.append(f"no prediction for: {', '.join(self.missing_pred)}")
        if self.missing_gt:
            parts.append(f"no ground truth for: {', '.join(self.missing_gt)}")
        super().__init__("; ".join(parts))


@dataclass(frozen=True)
class AgentPoseGT:
    sample_id: str
    scene_id: str
    position: tuple[float, float, float]
    yaw: float


@dataclass(frozen=True)
class LocalizationRecord:
    sample_id: str
    pred_bev: tuple[float, float]
    pred_log_var: tuple[float, float]
    pred_yaw: float
    gt_bev: tuple[float, float]
    gt_yaw: float

    @property
    def pos_err(self) -> float:
        return math.hypot(self.pred_bev[0] - self.gt_bev[0], self.pred_bev[1] - self.gt_bev[1])

    @property
    def ang_err_deg(self) -> float:
        # differencing in degrees keeps e.g. 179 vs -179 at exactly 2
        return abs(wrap_deg(math.degrees(self.pred_yaw) - math.degrees(self.gt_yaw)))

    @property
    def sigma_pos(self) -> float:
        return math.hypot(math.exp(0.5 * self.pred_log_var[0]), math.exp(0.5 * self.pred_log_var[1]))

    @property
    def success(self) -> bool:
        return self.pos_err <= SUCCESS_POS_M and self.ang_err_deg <= SUCCESS_ANG_DEG


@dataclass(frozen=True)
class MetricsReport:
    acc_0_5m: float
    acc_1_0m: float
    acc_15deg: float
    acc_30deg: float
    n: int
    mean_pos_err: float
    mean_ang_err: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroupStats:
    count: int
    mean_pos_err: float | None
    mean_sigma_pos: float | None


@dataclass(frozen=True)
class PartitionSummary:
    success: GroupStats
    failure: GroupStats
    success_ids: tuple[str, ...]
    failure_ids: tuple[str, ...]

    @property
    def failure_empty(self) -> bool:
        return self.failure.count == 0

    @property
    def success_empty(self) -> bool:
        return self.success.count == 0

    def to_dict(self) -> dict:
        return {"criterion": {"pos_err_m_le": SUCCESS_POS_M, "ang_err_deg_le": SUCCESS_ANG_DEG},
                "success": asdict(self.success), "failure": asdict(self.failure),
                "success_empty": self.success_empty, "failure_empty": self.failure_empty}


def horizontal_basis(up) -> tuple[np.ndarray, np.ndarray]:
    """Right-handed (e1, e2) spanning the plane orthogonal to ``up``; yaw is measured from e1 toward e2."""
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ref @ up) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ up) * up
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(up, e1)


def world_heading(yaw: float, up) -> np.ndarray:
    e1, e2 = horizontal_basis(up)
    return math.cos(yaw) * e1 + math.sin(yaw) * e2


def gt_to_bev(gt: AgentPoseGT, seq: SceneSequence, r_align) -> tuple[np.ndarray, float]:
    if gt.scene_id != seq.scene_id:
        raise ValueError(f"sample {gt.sample_id} belongs to {gt.scene_id!r}, not {seq.scene_id!r}")
    R_a = np.asarray(r_align, dtype=np.float64)
    pose_0 = seq.frames[0].pose
    p0 = (np.asarray(gt.position, dtype=np.float64) - pose_0.translation) @ pose_0.rotation
    bev = project_bev(R_a @ p0)
    h = project_bev(R_a @ (pose_0.rotation.T @ world_heading(gt.yaw, seq.up_axis)))
    norm = float(np.hypot(h[0], h[1]))
    if norm < 1e-9:
        raise DegenerateHeadingError(f"sample {gt.sample_id}: heading is vertical in the BEV frame")
    return bev, wrap(math.atan2(h[1] / norm, h[0] / norm))


def _pct(mask: np.ndarray) -> float:
    return 100.0 * int(mask.sum()) / mask.size


def position_metrics(records: Sequence[LocalizationRecord]) -> MetricsReport:
    if not records:
        raise ValueError("position_metrics needs at least one record")
    pos = np.array([r.pos_err for r in records])
    ang = np.array([r.ang_err_deg for r in records])
    return MetricsReport(
        acc_0_5m=_pct(pos <= POS_THRESHOLDS_M[0]),
        acc_1_0m=_pct(pos <= POS_THRESHOLDS_M[1]),
        acc_15deg=_pct(ang <= ANG_THRESHOLDS_DEG[0]),
        acc_30deg=_pct(ang <= ANG_THRESHOLDS_DEG[1]),
        n=len(records),
        mean_pos_err=float(np.sort(pos).sum() / pos.size),
        mean_ang_err=float(np.sort(ang).sum() / ang.size),
    )


def _group(records: list[LocalizationRecord]) -> GroupStats:
    if not records:
        return GroupStats(0, None, None)
    return GroupStats(len(records),
                      float(np.mean([r.pos_err for r in records])),
                      float(np.mean([r.sigma_pos for r in records])))


def uncertainty_partition(records: Sequence[LocalizationRecord]) -> PartitionSummary:
    """Split by success (<= 1.0 m and <= 45 deg) and summarize sigma_pos per group."""
    if not records:
        raise ValueError("uncertainty_partition needs at least one record")
    ok = [r for r in records if r.success]
    bad = [r for r in records if not r.success]
    return PartitionSummary(_group(ok), _group(bad),
                            tuple(r.sample_id for r in ok), tuple(r.sample_id for r in bad))


def rigid_align_2d(src, dst) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares rotation + translation (no scale) mapping src onto dst.

    Returns (R, t, max residual) with ``dst ~= src @ R.T + t``.
    """
    a = np.asarray(src, dtype=np.float64)
    b = np.asarray(dst, dtype=np.float64)
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    t = cb - R @ ca
    resid = np.linalg.norm(a @ R.T + t - b, axis=1)
    return R, t, float(resid.max()) if len(resid) else 0.0


# -- files ---------------------------------------------------------------------

def _read_jsonl(path: str | Path) -> tuple[dict | None, list[dict]]:
    header = None
    rows = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
        if "header" in obj and "sample_id" not in obj:
            header = obj["header"]
            continue
        rows.append(obj)
    return header, rows


def read_predictions(path: str | Path) -> tuple[dict | None, dict[str, dict]]:
    header, rows = _read_jsonl(path)
    out = {}
    for r in rows:
        try:
            p = r["pred"]
            out[str(r["sample_id"])] = {
                "scene_id": str(r["scene_id"]),
                "bev": (float(p["x"]), float(p["z"])),
                "log_var": (float(p["log_var_x"]), float(p["log_var_z"])),
                "yaw": float(p["yaw"]),
            }
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed prediction record {r!r}: {exc}") from None
    return header, out


def read_ground_truth(path: str | Path) -> dict[str, AgentPoseGT]:
    _, rows = _read_jsonl(path)
    out = {}
    for r in rows:
        try:
            pos = tuple(float(x) for x in r["pos"])
            if len(pos) != 3:
                raise ValueError("pos needs 3 values")
            out[str(r["sample_id"])] = AgentPoseGT(str(r["sample_id"]), str(r["scene_id"]), pos, float(r["yaw"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed ground-truth record {r!r}: {exc}") from None
    return out


def write_predictions(path: str | Path, preds: Iterable[dict], codec_header: dict | None = None) -> None:
    lines = []
    if codec_header is not None:
        lines.append(json.dumps({"header": {"codec": codec_header}}))
    for p in preds:
        lines.append(json.dumps(p))
    Path(path).write_text("\n".join(lines) + "\n")


def write_ground_truth(path: str | Path, gts: Iterable[AgentPoseGT]) -> None:
    lines = [json.dumps({"sample_id": g.sample_id, "scene_id": g.scene_id,
                         "pos": list(g.position), "yaw": g.yaw}) for g in gts]
    Path(path).write_text("\n".join(lines) + "\n")


def build_records(preds: dict[str, dict], gts: dict[str, AgentPoseGT],
                  scenes: dict[str, SceneSequence], r_aligns: dict[str, np.ndarray]) -> list[LocalizationRecord]:
    missing_pred = set(gts) - set(preds)
    missing_gt = set(preds) - set(gts)
    if missing_pred or missing_gt:
        raise RecordMismatchError(list(missing_pred), list(missing_gt))
    records = []
    for sid in sorted(gts):
        g, p = gts[sid], preds[sid]
        if g.scene_id not in scenes:
            raise ValueError(f"sample {sid}: scene {g.scene_id!r} not provided")
        bev, yaw = gt_to_bev(g, scenes[g.scene_id], r_aligns[g.scene_id])
        records.append(LocalizationRecord(sid, p["bev"], p["log_var"], p["yaw"],
                                          (float(bev[0]), float(bev[1])), yaw))
    return records


def write_per_sample_csv(path: str | Path, records: Sequence[LocalizationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "pos_err_m", "ang_err_deg", "sigma_pos", "success"])
        for r in records:
            w.writerow([r.sample_id, repr(r.pos_err), repr(r.ang_err_deg), repr(r.sigma_pos), int(r.success)])
