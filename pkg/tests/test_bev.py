import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevsup.bev import (MaskPolicy, backproject, build_bev_ground_truth, derive_frame0_up, gravity_rotation,
                        load_bev, patch_depth_stats, project, project_bev, save_bev, to_canonical, _grid_stats)
from bevsup.scene import DepthMap, Intrinsics, PatchGridSpec, Pose, make_sequence, patch_grid
from bevsup.evaluation import rigid_align_2d
from bevsup.synth import Plane, SynthScene, camera_rotation, make_scene, render_depth, to_sequence, yaw_about_up

from conftest import random_pose, unit_vectors


def rodrigues(axis, angle):
    """Rotation matrix from the series-free Rodrigues formula, written out per element."""
    x, y, z = axis / np.linalg.norm(axis)
    c, s, C = math.cos(angle), math.sin(angle), 1 - math.cos(angle)
    return np.array([[c + x * x * C, x * y * C - z * s, x * z * C + y * s],
                     [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
                     [z * x * C - y * s, z * y * C + x * s, c + z * z * C]])


# -- backproject ---------------------------------------------------------------

def test_backproject_principal_ray(intr):
    np.testing.assert_array_equal(backproject(intr.cx, intr.cy, 3.0, intr), [0.0, 0.0, 3.0])


def test_backproject_similar_triangles():
    k = Intrinsics(100.0, 100.0, 0.0, 0.0, 200, 200)
    np.testing.assert_array_equal(backproject(100.0, 0.0, 2.0, k), [2.0, 0.0, 2.0])


def test_backproject_rejects_nonpositive(intr):
    with pytest.raises(ValueError):
        backproject(1.0, 1.0, 0.0, intr)


@settings(max_examples=200)
@given(st.floats(1, 1000), st.floats(1, 1000), st.floats(0, 0.999), st.floats(0, 0.999),
       st.floats(-1, 2), st.floats(-1, 2), st.floats(0.01, 100))
def test_backproject_project_round_trip(fx, fy, cxf, cyf, uf, vf, d):
    k = Intrinsics(fx, fy, cxf * 640, cyf * 480, 640, 480)
    u, v = uf * 640, vf * 480
    uv = project(backproject(u, v, d, k), k)
    assert abs(uv[0] - u) < 1e-9 and abs(uv[1] - v) < 1e-9


# -- patch statistics ------------------------------------------------------------

def _depth_with_patch(block):
    return DepthMap(np.asarray(block, dtype=np.float32))


def test_patch_stats_constant():
    spec = PatchGridSpec(4, 1, 1)
    assert patch_depth_stats(_depth_with_patch(np.full((4, 4), 2.0)), spec, 0, 0) == (2.0, 0.0, 1.0)


def test_patch_stats_all_zero():
    spec = PatchGridSpec(4, 1, 1)
    assert patch_depth_stats(_depth_with_patch(np.zeros((4, 4))), spec, 0, 0)[2] == 0.0


def test_patch_stats_two_values():
    block = np.ones((4, 4))
    block[2:] = 5.0
    med, rel, frac = patch_depth_stats(_depth_with_patch(block), PatchGridSpec(4, 1, 1), 0, 0)
    # population {1 x8, 5 x8}: lower median 1, std 2
    assert (med, rel, frac) == (1.0, 2.0, 1.0)


def test_patch_stats_ignores_invalid():
    block = np.array([[0, 3], [1, 2]], dtype=float)
    med, rel, frac = patch_depth_stats(_depth_with_patch(block), PatchGridSpec(2, 1, 1), 0, 0)
    assert med == 2.0 and frac == 0.75
    assert rel == pytest.approx(np.std([1, 2, 3]) / 2.0)


def test_patch_stats_out_of_grid():
    with pytest.raises(IndexError):
        patch_depth_stats(_depth_with_patch(np.ones((4, 4))), PatchGridSpec(4, 1, 1), 1, 0)


def test_grid_stats_match_scalar(rng):
    vals = rng.uniform(0.5, 4, size=(30, 45)) * (rng.uniform(size=(30, 45)) > 0.3)
    depth = DepthMap(vals)
    spec = PatchGridSpec(7, 6, 4)
    med, rel, frac = _grid_stats(depth, spec)
    for k in range(spec.n_patches):
        m, r, f = patch_depth_stats(depth, spec, k // spec.grid_w, k % spec.grid_w)
        assert med[k] == m and frac[k] == f
        assert rel[k] == pytest.approx(r, rel=1e-12, abs=1e-15)


# -- canonical transform ---------------------------------------------------------

def test_to_canonical_same_pose(rng):
    pose = random_pose(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(to_canonical(p, pose, pose), p, atol=1e-12)


def test_to_canonical_pure_translation():
    t = np.array([1.0, -2.0, 0.5])
    p = np.array([0.3, 0.2, 4.0])
    np.testing.assert_allclose(to_canonical(p, Pose(np.eye(3), t), Pose.identity()), p + t, atol=1e-15)


def test_to_canonical_matches_homogeneous(rng):
    for _ in range(100):
        pi, p0 = random_pose(rng), random_pose(rng)
        p = rng.normal(size=3) * 3
        T = np.linalg.inv(p0.matrix()) @ pi.matrix()
        expected = (T @ np.append(p, 1.0))[:3]
        np.testing.assert_allclose(to_canonical(p, pi, p0), expected, atol=1e-12)


# -- gravity ---------------------------------------------------------------------

def test_gravity_identity():
    np.testing.assert_array_equal(gravity_rotation([0.0, -1.0, 0.0]), np.eye(3))


def test_gravity_z_up_matches_rodrigues():
    R = gravity_rotation([0.0, 0.0, 1.0])
    np.testing.assert_allclose(R @ [0, 0, 1], [0, -1, 0], atol=1e-15)
    # minimal rotation: 90 degrees about (0,0,1) x (0,-1,0) = +x
    np.testing.assert_allclose(R, rodrigues(np.array([1.0, 0, 0]), math.pi / 2), atol=1e-15)


def test_gravity_antiparallel():
    R = gravity_rotation([0.0, 1.0, 0.0])
    np.testing.assert_allclose(R @ [0, 1, 0], [0, -1, 0], atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_gravity_rejects_non_unit():
    with pytest.raises(ValueError):
        gravity_rotation([0.0, 0.0, 2.0])


@settings(max_examples=300)
@given(unit_vectors())
def test_gravity_property(up):
    R = gravity_rotation(up)
    assert np.max(np.abs(R @ up - [0, -1, 0])) < 1e-9
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100)
@given(unit_vectors())
def test_gravity_is_rodrigues_of_axis_angle(up):
    g = np.array([0.0, -1.0, 0.0])
    axis = np.cross(up, g)
    if np.linalg.norm(axis) < 1e-6:
        return
    angle = math.acos(max(-1.0, min(1.0, float(up @ g))))
    np.testing.assert_allclose(gravity_rotation(up), rodrigues(axis, angle), atol=1e-7)


def test_derive_frame0_up_identity(intr):
    seq = make_sequence("s", intr, [Pose.identity()], [DepthMap(np.ones((48, 64)))])
    np.testing.assert_array_equal(derive_frame0_up(seq), [0, 0, 1])


def test_derive_frame0_up_rotated(intr):
    R = rodrigues(np.array([1.0, 0, 0]), math.pi / 2)
    seq = make_sequence("s", intr, [Pose(R, np.zeros(3))], [DepthMap(np.ones((48, 64)))])
    up = derive_frame0_up(seq)
    np.testing.assert_allclose(up, R.T @ [0, 0, 1], atol=1e-15)
    assert abs(np.linalg.norm(up) - 1) < 1e-12


def test_project_bev():
    np.testing.assert_array_equal(project_bev([1.0, 2.0, 3.0]), [1.0, 3.0])
    np.testing.assert_array_equal(project_bev([0.0, -5.0, 0.0]), [0.0, 0.0])


# -- full pipeline ---------------------------------------------------------------

def _wall_scene(up=(0.0, -1.0, 0.0), z=2.0, poses=None):
    return SynthScene((Plane(2, z),), tuple(poses or [Pose.identity()]), up_axis=up)


def test_flat_wall_single_frame():
    sc = _wall_scene()
    gt = build_bev_ground_truth(to_sequence(sc), patch_grid(sc.intrinsics, 14))
    f = gt.frames[0]
    assert f.valid.all()
    np.testing.assert_allclose(f.xz[:, 1], 2.0, atol=1e-6)
    np.testing.assert_array_equal(gt.r_align, np.eye(3))


def test_all_zero_depth_masks_everything(intr):
    seq = make_sequence("s", intr, [Pose.identity()], [DepthMap(np.zeros((48, 64)))])
    gt = build_bev_ground_truth(seq, patch_grid(intr, 8))
    assert not gt.frames[0].valid.any()
    assert np.isnan(gt.frames[0].xz).all()


def test_two_frames_ground_translation():
    shift = np.array([0.35, 0.0, 0.0])
    sc = _wall_scene(poses=[Pose.identity(), Pose(np.eye(3), shift)])
    gt = build_bev_ground_truth(to_sequence(sc), patch_grid(sc.intrinsics, 14))
    a, b = gt.frames
    assert a.valid.all() and b.valid.all()
    np.testing.assert_allclose(b.xz - a.xz, np.tile([0.35, 0.0], (len(a.xz), 1)), atol=1e-6)


def test_masking_rules(intr):
    d = np.full((48, 64), 2.0)
    d[:8, :8] = 0.0          # patch (0,0): nothing valid
    d[:8, 8:12] = 0.0        # patch (0,1): half valid
    d[8:16, :4] = 8.0        # patch (1,0): high variance
    seq = make_sequence("s", intr, [Pose.identity()], [DepthMap(d)])
    spec = patch_grid(intr, 8)
    f = build_bev_ground_truth(seq, spec).frames[0]
    valid = f.valid.reshape(spec.grid_h, spec.grid_w)
    assert not valid[0, 0]
    assert valid[0, 1]   # exactly 0.5 valid passes the >= 0.5 rule
    assert not valid[1, 0]
    f2 = build_bev_ground_truth(seq, spec, MaskPolicy(min_valid_fraction=0.6)).frames[0]
    assert not f2.valid.reshape(spec.grid_h, spec.grid_w)[0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_mask_monotone_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    intr = Intrinsics(50, 50, 16, 16, 32, 32)
    d = rng.uniform(0.5, 3, size=(32, 32)) * (rng.uniform(size=(32, 32)) > 0.2)
    seq = make_sequence("s", intr, [Pose.identity()], [DepthMap(d)])
    spec = patch_grid(intr, 4)
    lo, hi = sorted((t1, t2))
    v_lo = build_bev_ground_truth(seq, spec, MaskPolicy(rel_std_threshold=lo)).frames[0].valid
    v_hi = build_bev_ground_truth(seq, spec, MaskPolicy(rel_std_threshold=hi)).frames[0].valid
    assert not np.any(v_lo & ~v_hi)


def test_mask_policy_validation():
    with pytest.raises(ValueError):
        MaskPolicy(rel_std_threshold=0.0)
    with pytest.raises(ValueError):
        MaskPolicy(min_valid_fraction=1.5)


def test_determinism_and_json_round_trip(tmp_path):
    sc = make_scene(3)
    seq = to_sequence(sc)
    spec = patch_grid(sc.intrinsics, 14)
    a = build_bev_ground_truth(seq, spec)
    b = build_bev_ground_truth(seq, spec)
    save_bev(a, tmp_path / "a.json")
    save_bev(b, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = load_bev(tmp_path / "a.json")
    for fa, fb in zip(a.frames, back.frames):
        np.testing.assert_array_equal(fa.valid, fb.valid)
        np.testing.assert_array_equal(fa.xz[fa.valid], fb.xz[fb.valid])
    np.testing.assert_array_equal(back.r_align, a.r_align)


@pytest.mark.parametrize("seed", range(3))
def test_rigid_invariance_about_up(seed):
    rng = np.random.default_rng(seed)
    sc = make_scene(seed)
    seq = to_sequence(sc)
    spec = patch_grid(sc.intrinsics, 14)
    G = Pose(yaw_about_up(rng.uniform(-math.pi, math.pi)), rng.uniform(-20, 20, size=3))
    moved = make_sequence(seq.scene_id, sc.intrinsics, [G @ f.pose for f in seq.frames],
                          [f.depth for f in seq.frames])
    a = build_bev_ground_truth(seq, spec)
    b = build_bev_ground_truth(moved, spec)
    src = np.concatenate([f.xz[f.valid] for f in a.frames])
    dst = np.concatenate([f.xz[f.valid] for f in b.frames])
    assert np.array_equal(np.concatenate([f.valid for f in a.frames]),
                          np.concatenate([f.valid for f in b.frames]))
    R, t, _ = rigid_align_2d(src[[0, -1]], dst[[0, -1]])
    assert np.max(np.linalg.norm(src @ R.T + t - dst, axis=1)) < 1e-6


def test_level_camera_gravity_from_pose():
    # a z-up world seen by a level camera: r_align must map world up to -y
    R = camera_rotation(0.3)
    sc = SynthScene((Plane(0, 5.0),), (Pose(R, np.array([0.0, 0.0, 1.5])),))
    seq = to_sequence(sc)
    gt = build_bev_ground_truth(seq, patch_grid(sc.intrinsics, 14))
    np.testing.assert_allclose(gt.r_align @ (R.T @ [0, 0, 1]), [0, -1, 0], atol=1e-12)
