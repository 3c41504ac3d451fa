import math

import numpy as np
import pytest

from dsobench.dataset import SceneConfig, generate_scene, render_view
from dsobench.dataset.trajectory import camera_rotation
from dsobench.geometry import CameraIntrinsics, Pose
from dsobench.photometric import Frame, build_pyramid, select_pixels
from dsobench.tracking import (
    ReferenceView,
    Tracker,
    TrackerConfig,
    TrackingLost,
    TrackingResult,
    predict_pose,
    track_frame,
)

INTR = CameraIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240)
DOWN = camera_rotation(0.4, math.pi / 2)
ALT = 20.0


@pytest.fixture(scope="module")
def scene():
    # flat textured ground: looking straight down every pixel is at depth ALT
    return generate_scene(SceneConfig(n_boxes=0, n_ramps=0))


def shot(scene, pose, fid=0):
    img, depth = render_view(scene, pose, INTR)
    return Frame(fid, 0.1 * fid, img), depth


def reference(scene, pose, n=3000):
    frame, depth = shot(scene, pose)
    ys, xs, _ = select_pixels(frame, n)
    return ReferenceView(frame, pose, np.column_stack([xs, ys]).astype(float), 1.0 / depth[ys, xs])


@pytest.fixture(scope="module")
def pair(scene):
    P0 = Pose(DOWN, [60.0, 40.0, ALT])
    # 0.1 m along the camera x axis
    P1 = Pose(DOWN, P0.translation + 0.1 * DOWN[:, 0])
    frame1, _ = shot(scene, P1, 1)
    return reference(scene, P0), frame1, P0, P1


def test_self_tracking_identity(pair):
    ref, _, P0, _ = pair
    for mode in ("forward", "inverse"):
        res = track_frame(ref.frame, ref, P0, mode, INTR)
        assert np.linalg.norm(res.relative.log()) < 1e-6
        assert res.final_cost < 1e-10
        assert res.valid_residual_fraction == 1.0


def test_sideways_translation_recovered(pair):
    ref, frame1, P0, P1 = pair
    res = track_frame(frame1, ref, P0, "forward", INTR)
    true_rel = P1.inverse() @ P0
    err = res.relative.translation - true_rel.translation
    assert np.linalg.norm(err) < 0.02 * 0.1
    rot = (res.relative @ true_rel.inverse()).rotation_angle()
    assert math.degrees(rot) < 0.05
    # the world pose is the composition with the reference pose
    assert np.allclose(res.pose.matrix, (P0 @ res.relative.inverse()).matrix, atol=1e-12)


def test_forward_inverse_agree(pair):
    ref, frame1, P0, _ = pair
    fwd = track_frame(frame1, ref, P0, "forward", INTR)
    inv = track_frame(frame1, ref, P0, "inverse", INTR)
    diff = np.linalg.norm(fwd.relative.translation - inv.relative.translation)
    assert diff < 0.005 * np.linalg.norm(fwd.relative.translation)


def test_inverse_hessian_matches_forward_at_identity(pair):
    ref = pair[0]
    trackers = {}
    for mode in ("forward", "inverse"):
        t = Tracker(INTR, TrackerConfig(), mode)
        t.set_reference(ref)
        t._prepare()
        trackers[mode] = t
    for lvl in range(4):
        Lf = trackers["forward"]._levels[lvl]
        Li = trackers["inverse"]._levels[lvl]
        img = trackers["forward"]._ref_pyr[lvl]
        ev = trackers["forward"]._evaluate(Lf, img, Pose.identity(), np.zeros(2), ref.frame, True)
        Hf, _ = trackers["forward"]._normal_equations(Lf, ev)
        assert np.linalg.norm(Li.H - Hf) <= 1e-6 * np.linalg.norm(Hf)


def test_level_costs_non_increasing(scene, pair):
    ref, frame1, P0, _ = pair
    res = track_frame(frame1, ref, P0, "forward", INTR)
    assert len(res.level_costs) == 4 and res.iterations >= 1
    # accepted steps only: rerun the finest level and record each energy
    t = Tracker(INTR, TrackerConfig(max_iterations=1), "forward")
    t.set_reference(ref)
    t._prepare()
    L = t._levels[0]
    img = build_pyramid(frame1, 4)[0]
    T, aff = P0.inverse() @ P0, np.zeros(2)
    costs = [t._energy(L, t._evaluate(L, img, T, aff, frame1, False), aff)]
    for _ in range(15):
        T, aff, c, _ = t._optimize_level(L, img, frame1, T, aff)
        costs.append(c)
    assert np.all(np.diff(costs) <= 1e-12)


def test_result_invariants(pair):
    ref, frame1, P0, _ = pair
    res = track_frame(frame1, ref, P0, "inverse", INTR)
    assert res.final_cost >= 0 and 0 <= res.valid_residual_fraction <= 1 and res.duration > 0
    assert res.frame_id == 1 and res.mean_flow == pytest.approx(1.25, rel=0.05)
    with pytest.raises(ValueError):
        TrackingResult(0, Pose.identity(), 0, 0, -1.0, 0.5, 1e-3)
    with pytest.raises(ValueError):
        TrackingResult(0, Pose.identity(), 0, 0, 1.0, 1.5, 1e-3)


def test_tracking_lost_too_few_points(pair):
    ref = pair[0]
    small = ReferenceView(ref.frame, ref.pose, ref.pix[:40], ref.idepth[:40])
    with pytest.raises(TrackingLost, match="40 points"):
        track_frame(ref.frame, small, ref.pose, "forward", INTR)


def test_tracking_lost_out_of_view(pair):
    ref, _, P0, _ = pair
    # a guess that throws most points off the image
    far = Pose(P0.rotation, P0.translation + 15.0 * P0.rotation[:, 0])
    frame_far = Frame(5, 0.5, np.full((240, 320), 0.5))
    with pytest.raises(TrackingLost):
        track_frame(frame_far, ref, far, "forward", INTR)


def test_tracking_lost_divergence(scene, pair):
    ref, _, P0, _ = pair
    # high-contrast noise: no pose explains it and every damped retry fails
    noise = np.random.default_rng(3).uniform(0, 1, (240, 320))
    with pytest.raises(TrackingLost, match="diverged"):
        track_frame(Frame(6, 0.6, noise), ref, P0, "forward", INTR)


def test_tracking_lost_bad_guess_and_no_reference(pair):
    ref, frame1, _, _ = pair
    bad = Pose(np.eye(3), [np.nan, 0.0, 0.0])
    with pytest.raises(TrackingLost):
        track_frame(frame1, ref, bad, "forward", INTR)
    with pytest.raises(TrackingLost, match="no reference"):
        Tracker(INTR).track(frame1, Pose.identity())
    with pytest.raises(ValueError):
        Tracker(INTR, mode="sideways")


def test_predict_pose():
    assert np.array_equal(predict_pose([]).matrix, np.eye(4))
    a = Pose(camera_rotation(0.3, 0.5), [1.0, 2.0, 3.0])
    assert np.array_equal(predict_pose([a]).matrix, a.matrix)
    delta = np.array([0.5, -0.2, 0.1])
    b = Pose(a.rotation, a.translation + delta)
    c = predict_pose([a, b])
    assert np.allclose(c.translation, b.translation + delta, atol=1e-12)
    assert np.allclose(c.rotation, a.rotation, atol=1e-12)
    # constant screw motion is extrapolated exactly
    step = Pose.exp(np.array([0.1, 0.0, 0.3, 0.0, 0.02, 0.01]))
    p = [a, a @ step, a @ step @ step]
    assert np.allclose(predict_pose(p[:2]).matrix, p[2].matrix, atol=1e-12)
    res = TrackingResult(0, p[1], 0, 0, 0.0, 1.0, 1e-3)
    assert np.allclose(predict_pose([p[0], res]).matrix, p[2].matrix, atol=1e-12)


def test_tracker_reuses_precomputation(pair):
    ref, frame1, P0, _ = pair
    t = Tracker(INTR, mode="inverse")
    t.set_reference(ref)
    r1 = t.track(frame1, P0)
    H = t._levels[0].H
    r2 = t.track(frame1, P0)
    assert t._levels[0].H is H
    assert np.array_equal(r1.pose.matrix, r2.pose.matrix)
