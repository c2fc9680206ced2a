"""BEV ground truth from depth and pose.

Each patch center is lifted at the patch's median depth, moved into the
first frame's camera coordinates, rotated so world up becomes camera -y,
and flattened to the (x, z) ground plane.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import DepthMap, Intrinsics, PatchGridSpec, Pose, SceneSequence

VERTICAL = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class MaskPolicy:
    rel_std_threshold: float = 0.15
    min_valid_fraction: float = 0.5

    def __post_init__(self):
        if not self.rel_std_threshold > 0:
            raise ValueError(f"rel_std_threshold must be > 0, got {self.rel_std_threshold}")
        if not 0.0 <= self.min_valid_fraction <= 1.0:
            raise ValueError(f"min_valid_fraction must lie in [0, 1], got {self.min_valid_fraction}")


@dataclass(frozen=True, eq=False)
class BevFrame:
    index: int
    rows: np.ndarray      # (N,) patch row
    cols: np.ndarray      # (N,) patch col
    xz: np.ndarray        # (N, 2) meters; NaN where invalid
    valid: np.ndarray     # (N,) bool


@dataclass(frozen=True, eq=False)
class BevGroundTruth:
    scene_id: str
    frames: tuple[BevFrame, ...]
    r_align: np.ndarray

    def frame(self, index: int) -> BevFrame:
        for f in self.frames:
            if f.index == index:
                return f
        raise KeyError(index)

    @property
    def n_valid(self) -> int:
        return int(sum(f.valid.sum() for f in self.frames))

    @property
    def n_patches(self) -> int:
        return int(sum(f.valid.size for f in self.frames))


def backproject(u, v, depth, intr: Intrinsics) -> np.ndarray:
    """``depth * K^-1 [u, v, 1]``; broadcasts over array inputs."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("backproject needs positive depth")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d * np.ones_like(u)], axis=-1)


def project(p_cam, intr: Intrinsics) -> np.ndarray:
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    return np.stack([intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy], axis=-1)


def patch_depth_stats(depth: DepthMap, spec: PatchGridSpec, r: int, c: int) -> tuple[float, float, float]:
    """(lower median, std / median, valid fraction) over the positive pixels of patch (r, c)."""
    if not (0 <= r < spec.grid_h and 0 <= c < spec.grid_w):
        raise IndexError(f"patch ({r}, {c}) outside {spec.grid_h}x{spec.grid_w} grid")
    P = spec.patch_size
    block = depth.values[r * P:(r + 1) * P, c * P:(c + 1) * P].astype(np.float64).ravel()
    good = np.sort(block[block > 0])
    frac = good.size / block.size
    if good.size == 0:
        return 0.0, 0.0, 0.0
    median = float(good[(good.size - 1) // 2])
    rel = float(good.std() / median) if median > 0 else 0.0
    return median, rel, frac


def _grid_stats(depth: DepthMap, spec: PatchGridSpec):
    """Vectorized patch_depth_stats over the whole grid, row-major patch order."""
    P, gh, gw = spec.patch_size, spec.grid_h, spec.grid_w
    d = depth.values[:gh * P, :gw * P].astype(np.float64)
    blocks = d.reshape(gh, P, gw, P).transpose(0, 2, 1, 3).reshape(gh * gw, P * P)
    good = blocks > 0
    n = good.sum(axis=1)
    keyed = np.sort(np.where(good, blocks, np.inf), axis=1)
    med = np.where(n > 0, keyed[np.arange(len(n)), np.maximum(n - 1, 0) // 2], 0.0)
    safe_n = np.maximum(n, 1)
    mean = np.where(good, blocks, 0.0).sum(axis=1) / safe_n
    var = (np.where(good, blocks - mean[:, None], 0.0) ** 2).sum(axis=1) / safe_n
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(med > 0, np.sqrt(var) / med, 0.0)
    return med, rel, n / (P * P)


def to_canonical(p_cam, pose_i: Pose, pose_0: Pose) -> np.ndarray:
    """Apply ``T_{0<-i} = T_{w<-0}^-1 T_{w<-i}`` to camera-frame points (3,) or (N, 3)."""
    p_world = pose_i.apply(p_cam)
    return (p_world - pose_0.translation) @ pose_0.rotation


def gravity_rotation(up) -> np.ndarray:
    """Minimal rotation taking ``up`` onto camera -y (axis-angle form)."""
    up = np.asarray(up, dtype=np.float64)
    if abs(np.linalg.norm(up) - 1.0) > 1e-6:
        raise ValueError(f"up vector must be unit length, got norm {np.linalg.norm(up):.9g}")
    axis = np.cross(up, VERTICAL)
    s = np.linalg.norm(axis)
    c = float(up @ VERTICAL)
    if s < 1e-9:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])
    k = axis / s
    angle = np.arctan2(s, c)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def derive_frame0_up(seq: SceneSequence) -> np.ndarray:
    up = seq.frames[0].pose.rotation.T @ seq.up_axis
    return up / np.linalg.norm(up)


def project_bev(p_lvl) -> np.ndarray:
    p = np.asarray(p_lvl, dtype=np.float64)
    return p[..., [0, 2]]


def alignment_rotation(seq: SceneSequence) -> np.ndarray:
    return gravity_rotation(derive_frame0_up(seq))


def build_bev_ground_truth(seq: SceneSequence, spec: PatchGridSpec,
                           policy: MaskPolicy = MaskPolicy()) -> BevGroundTruth:
    if len(seq.frames) == 0:
        raise ValueError("empty sequence")
    pose_0 = seq.frames[0].pose
    r_align = alignment_rotation(seq)
    centers = spec.centers()
    rows = np.repeat(np.arange(spec.grid_h), spec.grid_w)
    cols = np.tile(np.arange(spec.grid_w), spec.grid_h)
    out = []
    for f in seq.frames:
        med, rel, frac = _grid_stats(f.depth, spec)
        valid = (frac > 0) & (frac >= policy.min_valid_fraction) & (rel <= policy.rel_std_threshold)
        xz = np.full((spec.n_patches, 2), np.nan)
        if valid.any():
            p_cam = backproject(centers[valid, 0], centers[valid, 1], med[valid], f.intrinsics)
            p_lvl = to_canonical(p_cam, f.pose, pose_0) @ r_align.T
            xz[valid] = project_bev(p_lvl)
        out.append(BevFrame(f.index, rows.copy(), cols.copy(), xz, valid))
    return BevGroundTruth(seq.scene_id, tuple(out), r_align)


def save_bev(gt: BevGroundTruth, path: str | Path) -> None:
    frames = []
    for f in gt.frames:
        patches = []
        for r, c, (x, z), ok in zip(f.rows.tolist(), f.cols.tolist(), f.xz.tolist(), f.valid.tolist()):
            patches.append({"r": r, "c": c, "x": x if ok else None, "z": z if ok else None, "valid": ok})
        frames.append({"index": f.index, "patches": patches})
    doc = {"scene_id": gt.scene_id, "r_align": gt.r_align.ravel().tolist(), "frames": frames}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_bev(path: str | Path) -> BevGroundTruth:
    doc = json.loads(Path(path).read_text())
    frames = []
    for f in doc["frames"]:
        ps = f["patches"]
        xz = np.array([[p["x"] if p["valid"] else np.nan, p["z"] if p["valid"] else np.nan] for p in ps],
                      dtype=np.float64).reshape(-1, 2)
        frames.append(BevFrame(int(f["index"]),
                               np.array([p["r"] for p in ps], dtype=int),
                               np.array([p["c"] for p in ps], dtype=int),
                               xz, np.array([bool(p["valid"]) for p in ps], dtype=bool)))
    return BevGroundTruth(doc["scene_id"], tuple(frames), np.array(doc["r_align"], dtype=np.float64).reshape(3, 3))
