"""Geometric scene types, manifest I/O and frame sampling.

A scene on disk is a JSON manifest plus one raw depth file per frame. Depth
files carry a 16-byte header (``b"BEVD"``, width, height, reserved; all
little-endian u32) followed by ``width * height`` little-endian float32
values in row-major order. Depth 0 marks an invalid pixel.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEPTH_MAGIC = b"BEVD"
_HEADER = struct.Struct("<4sIII")
ORTHO_TOL = 1e-9


class SceneError(ValueError):
    """Invalid scene content. ``frame`` is the offending frame index, if any."""

    def __init__(self, message: str, frame: int | None = None, path: str | None = None):
        prefix = []
        if frame is not None:
            prefix.append(f"frame {frame}")
        if path is not None:
            prefix.append(str(path))
        full = f"{': '.join(prefix)}: {message}" if prefix else message
        super().__init__(full)
        self.frame = frame
        self.path = path


def _frozen(a, shape, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise SceneError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform ``x_world = R @ x_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise SceneError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise SceneError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise SceneError(f"rotation determinant is {np.linalg.det(R):.6g}, expected +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major z-depth in meters, stored as float32 to match the file payload."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise SceneError(f"depth must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SceneError("depth contains non-finite values")
        if np.any(v < 0):
            raise SceneError("depth contains negative values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.values.shape == other.values.shape and self.values.tobytes() == other.values.tobytes()

    __hash__ = None


@dataclass(frozen=True)
class Frame:
    index: int
    intrinsics: Intrinsics
    pose: Pose
    depth: DepthMap

    def __post_init__(self):
        if (self.depth.width, self.depth.height) != (self.intrinsics.width, self.intrinsics.height):
            raise SceneError(
                f"depth is {self.depth.width}x{self.depth.height} but intrinsics declare "
                f"{self.intrinsics.width}x{self.intrinsics.height}", frame=self.index)


@dataclass(frozen=True, eq=False)
class SceneSequence:
    scene_id: str
    frames: tuple[Frame, ...]
    up_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise SceneError(f"scene {self.scene_id!r} has no frames")
        for prev, cur in zip(frames, frames[1:]):
            if cur.index <= prev.index:
                raise SceneError("frame indices must be strictly increasing", frame=cur.index)
        up = _frozen(self.up_axis, (3,))
        if abs(np.linalg.norm(up) - 1.0) > ORTHO_TOL:
            raise SceneError(f"up_axis must be a unit vector, got norm {np.linalg.norm(up):.12g}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "up_axis", up)

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, SceneSequence):
            return NotImplemented
        return (self.scene_id == other.scene_id
                and np.array_equal(self.up_axis, other.up_axis)
                and self.frames == other.frames)

    __hash__ = None


@dataclass(frozen=True)
class PatchGridSpec:
    patch_size: int
    grid_w: int
    grid_h: int

    @property
    def n_patches(self) -> int:
        return self.grid_w * self.grid_h

    def center(self, r: int, c: int) -> tuple[float, float]:
        """Continuous pixel coordinates (u, v) of the center of patch (r, c)."""
        P = self.patch_size
        return c * P + P / 2, r * P + P / 2

    def centers(self) -> np.ndarray:
        """(grid_h * grid_w, 2) array of (u, v) in row-major patch order."""
        P = self.patch_size
        rr, cc = np.meshgrid(np.arange(self.grid_h), np.arange(self.grid_w), indexing="ij")
        return np.stack([cc.ravel() * P + P / 2, rr.ravel() * P + P / 2], axis=1).astype(np.float64)


def patch_grid(intr: Intrinsics, patch_size: int = 14) -> PatchGridSpec:
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if patch_size > intr.width or patch_size > intr.height:
        raise ValueError(f"patch_size {patch_size} exceeds image size {intr.width}x{intr.height}")
    return PatchGridSpec(patch_size, intr.width // patch_size, intr.height // patch_size)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_indices(m: int, n: int) -> list[int]:
    """Positions of ``n`` uniformly spaced frames out of ``m`` (always includes 0)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n >= m:
        return list(range(m))
    if n == 1:
        return [0]
    out: list[int] = []
    for i in range(n):
        k = _round_half_up(i * (m - 1) / (n - 1))
        if not out or k != out[-1]:
            out.append(k)
    return out


def sample_frames(seq: SceneSequence, n: int) -> SceneSequence:
    idx = sample_indices(len(seq.frames), n)
    return SceneSequence(seq.scene_id, tuple(seq.frames[i] for i in idx), seq.up_axis)


# -- depth files ---------------------------------------------------------------

def write_depth(path: str | Path, depth: DepthMap) -> None:
    h, w = depth.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        fh.write(depth.values.astype("<f4").tobytes(order="C"))


def read_depth(path: str | Path) -> DepthMap:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise SceneError("depth file shorter than its 16-byte header", path=str(path))
    magic, w, h, _ = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise SceneError(f"bad depth magic {magic!r}", path=str(path))
    expected = _HEADER.size + 4 * w * h
    if len(data) != expected:
        raise SceneError(f"depth payload is {len(data)} bytes, expected {expected} for {w}x{h}",
                         path=str(path))
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)
    try:
        return DepthMap(values.astype(np.float32))
    except SceneError as exc:
        raise SceneError(str(exc), path=str(path)) from None


# -- manifests -----------------------------------------------------------------

def _depth_name(frame: Frame) -> str:
    return f"depth_{frame.index:06d}.bin"


def save_scene(seq: SceneSequence, path: str | Path) -> Path:
    """Write ``seq`` as a manifest at ``path`` with depth files next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = []
    for f in seq.frames:
        name = _depth_name(f)
        write_depth(path.parent / name, f.depth)
        frames.append({
            "index": f.index,
            "intrinsics": f.intrinsics.to_dict(),
            "pose": {"rotation": f.pose.rotation.ravel().tolist(),
                     "translation": f.pose.translation.tolist()},
            "depth_file": name,
        })
    doc = {"scene_id": seq.scene_id, "up_axis": seq.up_axis.tolist(), "frames": frames}
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def _parse_frame(raw: dict, base: Path, pos: int) -> Frame:
    idx = raw.get("index", pos) if isinstance(raw, dict) else pos
    try:
        k = raw["intrinsics"]
        intr = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                          int(k["width"]), int(k["height"]))
        rot = raw["pose"]["rotation"]
        trans = raw["pose"]["translation"]
        if len(rot) != 9 or len(trans) != 3:
            raise SceneError("pose needs 9 rotation and 3 translation values")
        pose = Pose(np.array(rot, dtype=np.float64).reshape(3, 3), np.array(trans, dtype=np.float64))
        depth_path = base / raw["depth_file"]
        if not depth_path.exists():
            raise SceneError("depth file not found", path=str(depth_path))
        depth = read_depth(depth_path)
        return Frame(int(idx), intr, pose, depth)
    except SceneError as exc:
        if exc.frame is not None:
            raise
        raise SceneError(str(exc), frame=idx) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed frame entry ({type(exc).__name__}: {exc})", frame=idx) from None


def load_scene(path: str | Path) -> SceneSequence:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"manifest is not valid JSON: {exc}", path=str(path)) from None
    if not isinstance(doc, dict) or "frames" not in doc or "scene_id" not in doc:
        raise SceneError("manifest must be an object with scene_id and frames", path=str(path))
    frames = tuple(_parse_frame(raw, path.parent, i) for i, raw in enumerate(doc["frames"]))
    up = doc.get("up_axis", [0.0, 0.0, 1.0])
    return SceneSequence(str(doc["scene_id"]), frames, np.array(up, dtype=np.float64))


def make_sequence(scene_id: str, intr: Intrinsics, poses: Sequence[Pose],
                  depths: Sequence[DepthMap], up_axis=(0.0, 0.0, 1.0)) -> SceneSequence:
    frames = tuple(Frame(i, intr, p, d) for i, (p, d) in enumerate(zip(poses, depths)))
    return SceneSequence(scene_id, frames, np.asarray(up_axis, dtype=np.float64))
