import numpy as np
import pytest

from egorender.body import (JOINT_INDEX, TARGET_NAMES, BodyError, JointTargets15, target_positions,
                            world_transforms)
from egorender.geometry import PinholeCamera, RigidTransform, axis_angle_to_matrix
from egorender.posecon import (PoseConError, PoseSource, ViewSpec, canonical_joints, construct_target_pose,
                               parse_view, set_head_rotation)
from egorender.raster import encode_iuv
from egorender.synthgen import head_rotation_from_ego


def _iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


def test_gt_joints_match_stored_views(small_ds, body):
    skel, mesh = body
    ious = []
    for f in range(0, len(small_ds), 4):
        rec = small_ds.load(f)
        head_rot = head_rotation_from_ego(rec.ego_camera, small_ds.cfg)
        for v in rec.views:
            iuv, pose, head = construct_target_pose(rec.joints, ViewSpec("global", camera=v.camera), skel, mesh,
                                                    head_rot)
            ious.append(_iou(iuv.mask, v.mask))
    assert min(ious) >= 0.95


def test_head_rotation_recovered_from_ego_camera(small_ds, body):
    skel, _ = body
    h = JOINT_INDEX["head"]
    for f in range(len(small_ds)):
        rec = small_ds.load(f, [])
        gt = world_transforms(skel, rec.pose)[0][h]
        np.testing.assert_allclose(head_rotation_from_ego(rec.ego_camera, small_ds.cfg), gt, atol=1e-12)


def test_set_head_rotation_keeps_targets(small_ds, body, rng):
    skel, _ = body
    pose = small_ds.load(5, []).pose
    Rh = axis_angle_to_matrix(rng.normal(size=3))
    out = set_head_rotation(skel, pose, Rh)
    rots, _ = world_transforms(skel, out)
    np.testing.assert_allclose(rots[JOINT_INDEX["head"]], Rh, atol=1e-12)
    np.testing.assert_allclose(target_positions(skel, out), target_positions(skel, pose), atol=1e-12)
    # the neck and head share the relative rotation equally
    n = JOINT_INDEX["neck"]
    np.testing.assert_allclose(out.rotations[n], out.rotations[JOINT_INDEX["head"]], atol=1e-12)
    with pytest.raises(PoseConError):
        set_head_rotation(skel, pose, np.full((3, 3), np.nan))


def test_local_mode_head_rotation_follows_yaw(small_ds, body):
    skel, mesh = body
    rec = small_ds.load(4, [])
    head_rot = head_rotation_from_ego(rec.ego_camera, small_ds.cfg)
    view = ViewSpec(azimuth=20.0, size=64, focal=80.0)
    a, _, _ = construct_target_pose(rec.joints, view, skel, mesh, head_rot)
    Y = RigidTransform(axis_angle_to_matrix([0.0, 1.1, 0.0]), np.array([0.5, 0.0, -1.0]))
    turned = JointTargets15(Y.apply(rec.joints.positions), rec.joints.confidence)
    b, _, _ = construct_target_pose(turned, view, skel, mesh, Y.rotation @ head_rot)
    assert _iou(a.mask, b.mask) > 0.99


def test_azimuth_sweep_never_empty(small_ds, body):
    skel, mesh = body
    joints = small_ds.load(0, []).joints
    counts = []
    for az in range(0, 360, 15):
        iuv, _, head = construct_target_pose(joints, ViewSpec(azimuth=az, size=64, focal=80.0), skel, mesh)
        counts.append(int(iuv.mask.sum()))
    counts = np.array(counts)
    assert counts.min() > 0
    # smooth: neighbouring 15 degree steps never change coverage by more than half
    ratio = counts / np.roll(counts, 1)
    assert ratio.max() < 1.5 and ratio.min() > 1 / 1.5


def test_local_mode_translation_invariant(small_ds, body):
    skel, mesh = body
    joints = small_ds.load(3, []).joints
    view = ViewSpec(azimuth=30.0, size=64, focal=80.0)
    a, _, ha = construct_target_pose(joints, view, skel, mesh)
    for off in ([1.0, 0.0, -2.0], [0.123, 0.5, 7.25]):
        b, _, hb = construct_target_pose(joints.translated(off), view, skel, mesh)
        assert np.array_equal(encode_iuv(a), encode_iuv(b))
        assert np.array_equal(a.depth, b.depth)


def test_local_mode_removes_yaw(small_ds):
    j = small_ds.load(1, []).joints
    c = canonical_joints(j)
    hip = c.positions[TARGET_NAMES.index("l_hip")] - c.positions[TARGET_NAMES.index("r_hip")]
    assert abs(hip[2]) < 1e-6 and hip[0] > 0
    mid = 0.5 * (c.positions[TARGET_NAMES.index("l_hip")] + c.positions[TARGET_NAMES.index("r_hip")])
    assert np.abs(mid).max() < 1e-6


def test_global_root_equals_inverse_camera_motion(small_ds, body):
    skel, mesh = body
    rec = small_ds.load(2, [0])
    cam = rec.views[0].camera
    M = RigidTransform(axis_angle_to_matrix([0.0, 0.4, 0.1]), np.array([0.3, 0.0, -0.2]))
    a, _, _ = construct_target_pose(rec.joints, ViewSpec("global", camera=cam, root=M), skel, mesh)
    moved = PinholeCamera(cam.focal, cam.principal_point, cam.image_size, cam.pose @ M)
    b, _, _ = construct_target_pose(rec.joints, ViewSpec("global", camera=moved), skel, mesh)
    assert np.array_equal(encode_iuv(a), encode_iuv(b))
    # the root transform places the body, so moving the joints by M is the same scene up to the IK fit
    moved_joints = JointTargets15(M.apply(rec.joints.positions), rec.joints.confidence)
    c, _, _ = construct_target_pose(moved_joints, ViewSpec("global", camera=cam), skel, mesh)
    assert _iou(a.mask, c.mask) > 0.95


def test_deterministic_and_head_pixel(small_ds, body):
    skel, mesh = body
    j = small_ds.load(0, []).joints
    v = ViewSpec(azimuth=0.0, elevation=10.0, size=64, focal=80.0)
    a, _, ha = construct_target_pose(j, v, skel, mesh)
    b, _, hb = construct_target_pose(j, v, skel, mesh)
    assert np.array_equal(encode_iuv(a), encode_iuv(b))
    assert ha is not None and np.array_equal(ha, hb)
    assert 0 <= ha[0] < 64 and 0 <= ha[1] < 64


def test_camera_behind_subject_is_not_an_error(small_ds, body):
    skel, mesh = body
    j = small_ds.load(0, []).joints
    from egorender.geometry import look_at
    cam = PinholeCamera((80.0, 80.0), (32.0, 32.0), (64, 64), look_at([0, 0, 3.0], [0, 0, 6.0]))
    iuv, _, head = construct_target_pose(j, ViewSpec("global", camera=cam), skel, mesh)
    assert iuv.mask.sum() == 0 and head is None


def test_bad_inputs():
    with pytest.raises(PoseConError):
        ViewSpec(distance=0.0)
    with pytest.raises(PoseConError):
        ViewSpec(coords="world")
    with pytest.raises(PoseConError):
        parse_view("az=10,zoom=2")
    v = parse_view("az=90,el=20,dist=2.5")
    assert (v.azimuth, v.elevation, v.distance) == (90.0, 20.0, 2.5)
    bad = JointTargets15(np.zeros((15, 3)))
    bad.positions[0, 0] = np.inf
    with pytest.raises(BodyError):
        canonical_joints(bad)


def test_pose_source(small_ds):
    gt = small_ds.load(0, []).joints
    assert PoseSource().joints(None, gt) is gt
    with pytest.raises(PoseConError):
        PoseSource().joints(None)
    with pytest.raises(PoseConError):
        PoseSource("estimator")
    est = PoseSource("estimator", lambda img: gt)
    assert est.joints(np.zeros((4, 4, 3))) is gt
