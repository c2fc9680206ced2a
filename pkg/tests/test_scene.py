import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevsup.scene import (DepthMap, Frame, Intrinsics, Pose, SceneError, SceneSequence, load_scene,
                          make_sequence, patch_grid, read_depth, sample_frames, sample_indices, save_scene,
                          write_depth)

from conftest import random_pose


def _seq(rng, n_frames=2, w=16, h=12):
    intr = Intrinsics(20.0, 20.0, w / 2, h / 2, w, h)
    poses = [random_pose(rng) for _ in range(n_frames)]
    depths = [DepthMap(rng.uniform(0, 5, size=(h, w)) * (rng.uniform(size=(h, w)) > 0.1)) for _ in poses]
    return make_sequence("scene0", intr, poses, depths)


def test_pose_compose_inverse(rng):
    for _ in range(50):
        A, B = random_pose(rng), random_pose(rng)
        C = (A @ B) @ B.inverse()
        np.testing.assert_allclose(C.rotation, A.rotation, atol=1e-9)
        np.testing.assert_allclose(C.translation, A.translation, atol=1e-9)
        I = A @ A.inverse()
        np.testing.assert_allclose(I.matrix(), np.eye(4), atol=1e-9)


def test_pose_rejects_reflection():
    with pytest.raises(SceneError, match="determinant"):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(SceneError, match="orthonormal"):
        Pose(np.eye(3) * 1.01, np.zeros(3))


def test_pose_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.rotation[0, 0] = 2.0


@pytest.mark.parametrize("kwargs", [
    dict(fx=0.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4),
    dict(fx=1.0, fy=1.0, cx=4.0, cy=1.0, width=4, height=4),
    dict(fx=1.0, fy=1.0, cx=1.0, cy=-0.5, width=4, height=4),
])
def test_intrinsics_invariants(kwargs):
    with pytest.raises(SceneError):
        Intrinsics(**kwargs)


def test_depth_invariants():
    with pytest.raises(SceneError):
        DepthMap(np.array([[1.0, -1.0]]))
    with pytest.raises(SceneError):
        DepthMap(np.array([[1.0, np.nan]]))


def test_frame_size_mismatch():
    intr = Intrinsics(10, 10, 2, 2, 4, 4)
    with pytest.raises(SceneError, match="frame 3"):
        Frame(3, intr, Pose.identity(), DepthMap(np.ones((4, 5))))


def test_sequence_invariants(rng):
    seq = _seq(rng)
    with pytest.raises(SceneError, match="increasing"):
        SceneSequence("x", (seq.frames[1], seq.frames[0]))
    with pytest.raises(SceneError, match="no frames"):
        SceneSequence("x", ())
    with pytest.raises(SceneError, match="unit"):
        SceneSequence("x", seq.frames, np.array([0.0, 0.0, 2.0]))


def test_load_two_frames(tmp_path, rng):
    seq = _seq(rng, 2)
    path = save_scene(seq, tmp_path / "m.json")
    loaded = load_scene(path)
    assert len(loaded.frames) == 2
    assert loaded.scene_id == "scene0"


@pytest.mark.parametrize("seed", range(5))
def test_save_load_round_trip_bit_exact(tmp_path, seed):
    rng = np.random.default_rng(seed)
    seq = _seq(rng, n_frames=int(rng.integers(1, 5)), w=int(rng.integers(4, 30)), h=int(rng.integers(4, 30)))
    path = save_scene(seq, tmp_path / "scene.json")
    back = load_scene(path)
    assert back == seq
    for a, b in zip(seq.frames, back.frames):
        assert a.depth.values.tobytes() == b.depth.values.tobytes()
        assert a.pose.rotation.tobytes() == b.pose.rotation.tobytes()
        assert a.intrinsics == b.intrinsics


def test_load_reflection_names_frame(tmp_path, rng):
    seq = _seq(rng, 3)
    path = save_scene(seq, tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["frames"][1]["pose"]["rotation"] = [1, 0, 0, 0, 1, 0, 0, 0, -1]
    path.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="frame 1.*determinant"):
        load_scene(path)


def test_load_size_mismatch_names_frame(tmp_path, rng):
    seq = _seq(rng, 2)
    path = save_scene(seq, tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["frames"][0]["intrinsics"]["width"] = 17
    path.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="frame 0"):
        load_scene(path)


def test_load_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SceneError):
        load_scene(bad)
    bad.write_text(json.dumps({"scene_id": "s", "frames": [{"index": 4}]}))
    with pytest.raises(SceneError, match="frame 4"):
        load_scene(bad)


def test_depth_file_format(tmp_path):
    d = DepthMap(np.arange(6, dtype=np.float32).reshape(2, 3))
    write_depth(tmp_path / "d.bin", d)
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:4] == b"BEVD"
    assert struct.unpack("<III", raw[4:16]) == (3, 2, 0)
    assert np.frombuffer(raw[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert read_depth(tmp_path / "d.bin") == d


def test_depth_file_corrupt(tmp_path):
    p = tmp_path / "d.bin"
    p.write_bytes(b"XXXX" + struct.pack("<III", 2, 2, 0) + b"\0" * 16)
    with pytest.raises(SceneError, match="magic"):
        read_depth(p)
    p.write_bytes(b"BEVD" + struct.pack("<III", 2, 2, 0) + b"\0" * 12)
    with pytest.raises(SceneError, match="d.bin"):
        read_depth(p)


def test_sample_frames_endpoints(rng):
    assert sample_indices(64, 2) == [0, 63]
    assert sample_indices(5, 5) == [0, 1, 2, 3, 4]
    assert sample_indices(3, 10) == [0, 1, 2]
    assert sample_indices(7, 1) == [0]
    with pytest.raises(ValueError):
        sample_indices(5, 0)
    seq = _seq(rng, 5)
    assert sample_frames(seq, 5) == seq


def test_sample_frames_formula():
    got = sample_indices(100, 32)
    # direct evaluation of round-half-up(i * 99 / 31)
    expected = [int(np.floor(i * 99 / 31 + 0.5)) for i in range(32)]
    assert got == expected
    assert len(got) == 32 and got[0] == 0 and got[-1] == 99
    assert all(b > a for a, b in zip(got, got[1:]))


@given(st.integers(1, 400), st.integers(1, 400))
def test_sample_indices_properties(m, n):
    idx = sample_indices(m, n)
    assert idx[0] == 0
    assert idx == sorted(set(idx))
    assert all(0 <= i < m for i in idx)
    assert len(idx) == min(m, n)


@pytest.mark.parametrize("w,h,P,grid,center", [
    (384, 384, 14, (27, 27), (7.0, 7.0)),
    (384, 384, 384, (1, 1), (192.0, 192.0)),
    (640, 480, 16, (40, 30), (8.0, 8.0)),
])
def test_patch_grid(w, h, P, grid, center):
    spec = patch_grid(Intrinsics(100, 100, w / 2, h / 2, w, h), P)
    assert (spec.grid_w, spec.grid_h) == grid
    assert spec.center(0, 0) == center
    assert spec.centers().shape == (grid[0] * grid[1], 2)


def test_patch_grid_errors():
    intr = Intrinsics(100, 100, 10, 10, 20, 20)
    with pytest.raises(ValueError):
        patch_grid(intr, 0)
    with pytest.raises(ValueError):
        patch_grid(intr, 21)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_pose_composition_property(seed):
    rng = np.random.default_rng(seed)
    A, B = random_pose(rng), random_pose(rng)
    C = (A @ B) @ B.inverse()
    assert np.max(np.abs(C.matrix() - A.matrix())) < 1e-9
