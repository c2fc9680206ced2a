"""Synthetic box rooms with exact geometry.

Scenes are built from axis-aligned planes (floor, ceiling, walls) and boxes,
so every pixel's surface point is known in closed form. ``render_depth`` is
the vectorized renderer; ``cast_ray`` and ``analytic_bev`` are scalar routes
used as oracles against it and against the BEV pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .evaluation import AgentPoseGT, write_ground_truth
from .scene import DepthMap, Frame, Intrinsics, PatchGridSpec, Pose, SceneSequence, save_scene

HIT_EPS = 1e-9
UP = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class Plane:
    """Infinite plane ``X[axis] == offset``."""

    axis: int
    offset: float
    kind: str = "wall"


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    kind: str = "box"

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")

    def contains_xy(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (self.lo[0] - margin <= x <= self.hi[0] + margin
                and self.lo[1] - margin <= y <= self.hi[1] + margin)


Primitive = Union[Plane, Box]


@dataclass(frozen=True)
class SynthSpec:
    room_extent: tuple[float, float] = (3.0, 10.0)
    room_height: tuple[float, float] = (2.5, 3.0)
    n_boxes: tuple[int, int] = (3, 10)
    box_size: tuple[float, float] = (0.3, 1.2)
    box_height: tuple[float, float] = (0.3, 1.5)
    n_frames: int = 8
    max_step: float = 0.5              # meters between consecutive frames
    max_yaw_step: float = math.radians(30.0)
    max_tilt: float = math.radians(8.0)
    snap_fraction: float = 0.5         # share of frames (after the first) looking along a wall normal
    camera_height: tuple[float, float] = (1.2, 1.7)
    wall_margin: float = 0.4
    n_agents: int = 8


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=80.0, fy=80.0, cx=56.0, cy=42.0, width=112, height=84)


@dataclass(frozen=True, eq=False)
class SynthScene:
    primitives: tuple
    trajectory: tuple
    agent_poses: tuple = ()
    seed: int = 0
    scene_id: str = "synth"
    up_axis: tuple[float, float, float] = UP
    intrinsics: Intrinsics = field(default_factory=default_intrinsics)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "trajectory", tuple(self.trajectory))
        object.__setattr__(self, "agent_poses", tuple(self.agent_poses))

    @property
    def planes(self) -> list[Plane]:
        return [p for p in self.primitives if isinstance(p, Plane)]

    @property
    def boxes(self) -> list[Box]:
        return [p for p in self.primitives if isinstance(p, Box)]

    def __eq__(self, other):
        if not isinstance(other, SynthScene):
            return NotImplemented
        return (self.primitives == other.primitives and self.agent_poses == other.agent_poses
                and self.trajectory == other.trajectory and self.seed == other.seed
                and self.scene_id == other.scene_id and self.up_axis == other.up_axis
                and self.intrinsics == other.intrinsics)


# -- rotations -----------------------------------------------------------------

def _cos_sin(angle: float) -> tuple[float, float]:
    """cos/sin that are exact at multiples of 90 degrees."""
    q = angle / (math.pi / 2)
    k = round(q)
    if abs(q - k) < 1e-12:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k % 4]
    return math.cos(angle), math.sin(angle)


def camera_rotation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Camera-to-world rotation for a z-up world; the level camera looks along (cos yaw, sin yaw, 0)."""
    c, s = _cos_sin(yaw)
    level = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    cp, sp = _cos_sin(pitch)
    cr, sr = _cos_sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return level @ rx @ rz


def yaw_about_up(angle: float) -> np.ndarray:
    c, s = _cos_sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- rendering -----------------------------------------------------------------

def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with unit z through pixel centers."""
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)


def _plane_hits(plane: Plane, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    da = d[..., plane.axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.offset - o[plane.axis]) / da
    return np.where((da != 0) & (t > HIT_EPS), t, np.inf)


def _box_hits(box: Box, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    t_near = np.full(d.shape[:-1], -np.inf)
    t_far = np.full(d.shape[:-1], np.inf)
    for a in range(3):
        da = d[..., a]
        lo, hi = box.lo[a] - o[a], box.hi[a] - o[a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1, t2 = lo / da, hi / da
        par = da == 0
        inside = lo <= 0 <= hi
        t1 = np.where(par, -np.inf if inside else np.inf, t1)
        t2 = np.where(par, np.inf if inside else -np.inf, t2)
        t_near = np.maximum(t_near, np.minimum(t1, t2))
        t_far = np.minimum(t_far, np.maximum(t1, t2))
    hit = t_near <= t_far
    t = np.where(t_near > HIT_EPS, t_near, t_far)
    return np.where(hit & (t > HIT_EPS), t, np.inf)


def render_depth(scene: SynthScene, pose: Pose, intr: Intrinsics | None = None, return_labels: bool = False):
    """z-depth image of ``scene`` seen from ``pose``; 0 where nothing is hit.

    With ``return_labels`` also returns the per-pixel primitive index (-1 on miss).
    """
    intr = intr or scene.intrinsics
    d = pixel_rays(intr) @ pose.rotation.T
    o = pose.translation
    best = np.full(d.shape[:-1], np.inf)
    label = np.full(d.shape[:-1], -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        t = _plane_hits(prim, o, d) if isinstance(prim, Plane) else _box_hits(prim, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        label = np.where(closer, k, label)
    # camera-frame ray z is 1, so the ray parameter already is z-depth
    depth = DepthMap(np.where(np.isfinite(best), best, 0.0))
    return (depth, label) if return_labels else depth


def patch_primitives(scene: SynthScene, pose: Pose, spec: PatchGridSpec, intr: Intrinsics | None = None) -> np.ndarray:
    """Per-patch primitive index in row-major order; -1 where a patch sees several or none."""
    _, lab = render_depth(scene, pose, intr, return_labels=True)
    P = spec.patch_size
    blocks = lab[:spec.grid_h * P, :spec.grid_w * P].reshape(spec.grid_h, P, spec.grid_w, P)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(-1, P * P)
    same = (blocks == blocks[:, :1]).all(axis=1)
    return np.where(same, blocks[:, 0], -1)


def cast_ray(scene: SynthScene, origin, direction) -> tuple[float, int] | None:
    """Scalar nearest positive hit: (ray parameter, primitive index), or None."""
    o = [float(x) for x in origin]
    d = [float(x) for x in direction]
    best, best_k = math.inf, -1
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Plane):
            da = d[prim.axis]
            if da == 0.0:
                continue
            t = (prim.offset - o[prim.axis]) / da
            if HIT_EPS < t < best:
                best, best_k = t, k
            continue
        t0, t1 = -math.inf, math.inf
        for a in range(3):
            if d[a] == 0.0:
                if not prim.lo[a] <= o[a] <= prim.hi[a]:
                    t0, t1 = math.inf, -math.inf
                    break
                continue
            ta = (prim.lo[a] - o[a]) / d[a]
            tb = (prim.hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            continue
        t = t0 if t0 > HIT_EPS else t1
        if HIT_EPS < t < best:
            best, best_k = t, k
    return None if best_k < 0 else (best, best_k)


def _align_closed_form(up0: np.ndarray) -> np.ndarray:
    """Rotation taking up0 to (0, -1, 0) via R = I + [v]x + [v]x^2 / (1 + c)."""
    g = np.array([0.0, -1.0, 0.0])
    v = np.cross(up0, g)
    c = float(up0 @ g)
    if np.linalg.norm(v) < 1e-9:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    V = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + V + V @ V / (1.0 + c)


def world_to_bev(scene: SynthScene, X, pose_0: Pose) -> np.ndarray:
    """BEV coordinates of world point X, via homogeneous matrices."""
    T0_inv = np.linalg.inv(pose_0.matrix())
    p0 = (T0_inv @ np.append(np.asarray(X, dtype=np.float64), 1.0))[:3]
    up0 = T0_inv[:3, :3] @ np.asarray(scene.up_axis, dtype=np.float64)
    p_lvl = _align_closed_form(up0 / np.linalg.norm(up0)) @ p0
    return np.array([p_lvl[0], p_lvl[2]])


def surface_point(scene: SynthScene, pose: Pose, intr: Intrinsics, u: float, v: float):
    """World point and primitive index under continuous pixel (u, v), or None."""
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d = pose.rotation @ d_cam
    hit = cast_ray(scene, pose.translation, d)
    if hit is None:
        return None
    t, k = hit
    return pose.translation + t * d, k


def analytic_bev(scene: SynthScene, pose_i: Pose, intr: Intrinsics | None, u: float, v: float,
                 pose_0: Pose | None = None) -> np.ndarray | None:
    """Exact BEV coordinate of the surface under pixel (u, v) of a camera at ``pose_i``."""
    intr = intr or scene.intrinsics
    pose_0 = pose_0 if pose_0 is not None else scene.trajectory[0]
    hit = surface_point(scene, pose_i, intr, u, v)
    if hit is None:
        return None
    return world_to_bev(scene, hit[0], pose_0)


# -- scene generation ----------------------------------------------------------

def _free(x: float, y: float, boxes: Sequence[Box], room: tuple[float, float], margin: float) -> bool:
    if not (margin <= x <= room[0] - margin and margin <= y <= room[1] - margin):
        return False
    return not any(b.contains_xy(x, y, margin=0.25) for b in boxes)


def _sample_free(rng: np.random.Generator, boxes, room, margin) -> tuple[float, float]:
    for _ in range(10_000):
        x = rng.uniform(margin, room[0] - margin)
        y = rng.uniform(margin, room[1] - margin)
        if _free(x, y, boxes, room, margin):
            return x, y
    raise RuntimeError("could not find free floor space")


def make_scene(seed: int, spec: SynthSpec = SynthSpec(), scene_id: str | None = None) -> SynthScene:
    """Deterministic random room with boxes, a camera walk and agent poses."""
    rng = np.random.default_rng(seed)
    lx, ly = (float(rng.uniform(*spec.room_extent)) for _ in range(2))
    height = float(rng.uniform(*spec.room_height))
    prims: list[Primitive] = [
        Plane(2, 0.0, "floor"), Plane(2, height, "ceiling"),
        Plane(0, 0.0, "wall"), Plane(0, lx, "wall"), Plane(1, 0.0, "wall"), Plane(1, ly, "wall"),
    ]
    boxes: list[Box] = []
    n_boxes = int(rng.integers(spec.n_boxes[0], spec.n_boxes[1] + 1))
    for _ in range(n_boxes):
        sx, sy = rng.uniform(*spec.box_size, size=2)
        sz = rng.uniform(*spec.box_height)
        x0 = rng.uniform(0.0, lx - sx)
        y0 = rng.uniform(0.0, ly - sy)
        boxes.append(Box((float(x0), float(y0), 0.0), (float(x0 + sx), float(y0 + sy), float(sz))))
    prims.extend(boxes)

    room = (lx, ly)
    x, y = _sample_free(rng, boxes, room, spec.wall_margin)
    yaw = float(rng.uniform(-math.pi, math.pi))
    trajectory = []
    for k in range(spec.n_frames):
        if k > 0:
            for _ in range(200):
                r = spec.max_step * math.sqrt(rng.uniform())
                phi = rng.uniform(-math.pi, math.pi)
                nx, ny = x + r * math.cos(phi), y + r * math.sin(phi)
                if _free(nx, ny, boxes, room, spec.wall_margin):
                    x, y = nx, ny
                    break
            yaw = float(np.mod(yaw + rng.uniform(-spec.max_yaw_step, spec.max_yaw_step) + math.pi,
                               2 * math.pi) - math.pi)
        z = float(rng.uniform(*spec.camera_height))
        pitch, roll = rng.uniform(-spec.max_tilt, spec.max_tilt, size=2)
        snap = k > 0 and rng.uniform() < spec.snap_fraction
        if snap:
            R = camera_rotation(round(yaw / (math.pi / 2)) * (math.pi / 2))
        else:
            R = camera_rotation(yaw, float(pitch), float(roll))
        trajectory.append(Pose(R, np.array([x, y, z])))

    sid = scene_id or f"synth_{seed:04d}"
    agents = []
    for a in range(spec.n_agents):
        ax, ay = _sample_free(rng, boxes, room, spec.wall_margin)
        agents.append(AgentPoseGT(f"{sid}_a{a:03d}", sid, (ax, ay, 0.0), float(rng.uniform(-math.pi, math.pi))))
    return SynthScene(tuple(prims), tuple(trajectory), tuple(agents), seed, sid)


def transform_scene_poses(scene: SynthScene, angle: float, shift) -> SynthScene:
    """Apply one world rotation about +z plus translation to geometry-free pose data.

    Only the trajectory and agent poses move; this is meant for invariance checks
    on the pipeline, not for re-rendering.
    """
    G = Pose(yaw_about_up(angle), np.asarray(shift, dtype=np.float64))
    traj = tuple(G @ p for p in scene.trajectory)
    agents = tuple(AgentPoseGT(a.sample_id, a.scene_id, tuple(G.apply(np.array(a.position)).tolist()),
                               float(np.mod(a.yaw + angle + math.pi, 2 * math.pi) - math.pi))
                   for a in scene.agent_poses)
    return SynthScene(scene.primitives, traj, agents, scene.seed, scene.scene_id, scene.up_axis, scene.intrinsics)


def to_sequence(scene: SynthScene, intr: Intrinsics | None = None) -> SceneSequence:
    intr = intr or scene.intrinsics
    frames = tuple(Frame(i, intr, pose, render_depth(scene, pose, intr)) for i, pose in enumerate(scene.trajectory))
    return SceneSequence(scene.scene_id, frames, np.array(scene.up_axis, dtype=np.float64))


def write_synth(scene: SynthScene, out_dir: str | Path) -> tuple[Path, Path]:
    """Write manifest + depth files and the agent ground truth; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = save_scene(to_sequence(scene), out_dir / "manifest.json")
    gt_path = out_dir / "gt.jsonl"
    write_ground_truth(gt_path, scene.agent_poses)
    return manifest, gt_path
