import itertools

import numpy as np
import pytest

from panoslam.errors import TrackingLostError
from panoslam.geometry import PanoramicCamera, PoseSE3
from panoslam.sensor_sim import FrameObservations, SparseDepthMap, camera_pose
from panoslam.slam import (
    DEPTH_CREATED,
    NULL,
    TRIANGULATED,
    Frame,
    KeyFrame,
    MapState,
    TrackedMatches,
    decide_keyframe,
    depth_associate,
    insert_keyframe,
    local_bundle_adjust,
    map_new_points,
    track,
)
from panoslam.slam.mapping import association_decision
from panoslam.slam.tracking import angular_error, estimate_pose

CAM = PanoramicCamera(512, 256)


def landmarks(rng, n=300):
    # a street-like corridor around the x axis
    x = rng.uniform(-10, 40, n)
    y = rng.choice([-1, 1], n) * rng.uniform(4, 12, n)
    z = rng.uniform(0, 10, n)
    return np.column_stack([x, y, z])


def make_frame(index, pose, pts, descriptors=None, depth=None, noise=0.0, rng=None):
    p_cam = pose.inverse().apply(pts)
    px = CAM.project(p_cam)
    if noise:
        px = px + rng.normal(scale=noise, size=px.shape)
        px[:, 0] = np.mod(px[:, 0], CAM.width)
    ids = np.arange(len(pts)) if descriptors is None else np.asarray(descriptors)
    obs = FrameObservations(np.arange(len(pts)), ids, px)
    od = np.full(len(pts), np.nan) if depth is None else np.asarray(depth, dtype=float)
    return Frame(index, index * 0.25, obs, SparseDepthMap.empty(CAM.width, CAM.height), None, od,
                 CAM.bearing(px))


def exact_map(pts):
    m = MapState()
    for k, p in enumerate(pts):
        m.add_point(p, TRIANGULATED, k, 0, 0)
    return m


# -- tracking -----------------------------------------------------------------

def test_track_noiseless_recovers_pose():
    rng = np.random.default_rng(0)
    pts = landmarks(rng)
    m = exact_map(pts)
    gt = camera_pose((3.0, 0.4), 0.05)
    frame = make_frame(5, gt, pts)
    start = gt.retract(np.r_[rng.normal(scale=0.01, size=3), rng.normal(scale=0.2, size=3)])
    index = {k: k for k in range(len(pts))}
    matches, pose = track(frame, m, start, index)
    assert matches.count == len(pts)
    dt = np.linalg.norm(pose.translation - gt.translation)
    dr = np.linalg.norm((pose.inverse() @ gt).R - np.eye(3))
    assert dt < 1e-6 and dr < 1e-6


def test_track_all_null_is_lost():
    rng = np.random.default_rng(1)
    pts = landmarks(rng)
    frame = make_frame(1, camera_pose((0, 0), 0), pts)
    with pytest.raises(TrackingLostError) as exc:
        track(frame, exact_map(pts), PoseSE3.identity(), index={})
    assert exc.value.n_matches == 0


def test_track_too_few_matches_is_lost():
    rng = np.random.default_rng(2)
    pts = landmarks(rng)
    frame = make_frame(1, camera_pose((0, 0), 0), pts)
    with pytest.raises(TrackingLostError):
        track(frame, exact_map(pts), PoseSE3.identity(), index={k: k for k in range(5)})


def test_robust_beats_plain_least_squares_with_mismatches():
    rng = np.random.default_rng(3)
    pts = landmarks(rng, 400)
    gt = camera_pose((5.0, 0.0), 0.0)
    frame = make_frame(1, gt, pts, noise=0.5, rng=rng)
    # 10% of descriptors point at the wrong landmark
    desc = np.arange(len(pts))
    wrong = rng.choice(len(pts), len(pts) // 10, replace=False)
    desc[wrong] = rng.permutation(desc[wrong])
    brg = frame.bearings
    start = gt.retract(np.r_[np.zeros(3), 0.3, 0.0, 0.3])
    robust = estimate_pose(start, pts[desc], brg, robust=True)
    plain = estimate_pose(start, pts[desc], brg, robust=False)
    e_r = np.linalg.norm(robust.translation - gt.translation)
    e_p = np.linalg.norm(plain.translation - gt.translation)
    assert e_r < e_p


def test_track_rejects_gross_outliers():
    rng = np.random.default_rng(4)
    pts = landmarks(rng)
    m = exact_map(pts)
    gt = camera_pose((2.0, 0.0), 0.0)
    frame = make_frame(1, gt, pts)
    m.points[7].position = m.points[7].position + [0.0, 0.0, 5.0]
    matches, pose = track(frame, m, gt, {k: k for k in range(len(pts))})
    assert matches.point_ids[7] == NULL
    assert np.linalg.norm(pose.translation - gt.translation) < 1e-6


def test_repeated_descriptor_left_unmatched():
    rng = np.random.default_rng(5)
    pts = landmarks(rng)
    desc = np.arange(len(pts))
    desc[1] = desc[0]
    frame = make_frame(1, camera_pose((0, 0), 0), pts, descriptors=desc)
    matches, _ = track(frame, exact_map(pts), camera_pose((0, 0), 0), {k: k for k in range(len(pts))})
    assert matches.point_ids[0] == NULL and matches.point_ids[1] == NULL


# -- keyframes ----------------------------------------------------------------

def _map_with_keyframe(n_points=100):
    rng = np.random.default_rng(6)
    pts = landmarks(rng, n_points)
    m = exact_map(pts)
    frame = make_frame(0, camera_pose((0, 0), 0), pts)
    frame.pose = camera_pose((0, 0), 0)
    insert_keyframe(frame, TrackedMatches(np.arange(n_points)), m, n_points)
    return m, pts


def test_first_frame_is_keyframe():
    rng = np.random.default_rng(7)
    pts = landmarks(rng, 20)
    frame = make_frame(0, PoseSE3.identity(), pts)
    assert decide_keyframe(frame, TrackedMatches.empty(20), MapState())


def test_identical_frame_is_not_keyframe():
    m, pts = _map_with_keyframe()
    frame = make_frame(3, camera_pose((0, 0), 0), pts)
    assert not decide_keyframe(frame, TrackedMatches(np.arange(len(pts))), m)


def test_half_the_matches_is_keyframe():
    m, pts = _map_with_keyframe()
    frame = make_frame(3, camera_pose((0, 0), 0), pts)
    ids = np.arange(len(pts))
    ids[::2] = NULL
    assert decide_keyframe(frame, TrackedMatches(ids), m)


def test_gap_forces_keyframe():
    m, pts = _map_with_keyframe()
    frame = make_frame(10, camera_pose((0, 0), 0), pts)
    assert decide_keyframe(frame, TrackedMatches(np.arange(len(pts))), m)


# -- new points ---------------------------------------------------------------

def test_depth_created_point_inside_overlap():
    pose = camera_pose((1.0, 2.0), 0.3)
    pts = np.array([[10.0, 5.0, 1.0], [12.0, -6.0, 2.0], [8.0, 7.0, 3.0]])
    frame = make_frame(0, pose, pts, depth=[10.0, np.nan, np.nan])
    frame.pose = pose
    m = MapState()
    matches = TrackedMatches.empty(3)
    stats = map_new_points(frame, matches, m)
    assert stats.depth_created == 1 and stats.triangulated == 0
    p = m.points[matches.point_ids[0]]
    np.testing.assert_allclose(p.position, pose.apply(10.0 * frame.bearings[0]), atol=1e-12)
    assert p.origin == DEPTH_CREATED and p.last_assoc_depth == 10.0 and p.last_assoc_frame == 0
    # outside the overlap and never seen before: no point
    assert matches.point_ids[1] == NULL and matches.point_ids[2] == NULL


def test_triangulated_point_outside_overlap():
    rng = np.random.default_rng(8)
    x = np.array([[0.0, 30.0, 2.0]])
    pa = camera_pose((0.0, 0.0), 0.0)
    # 1.05 m baseline at 30 m range: about 2 degrees of parallax
    pb = camera_pose((1.05, 0.0), 0.0)
    m = MapState()
    fa = make_frame(0, pa, x, noise=0.05, rng=rng)
    fa.pose = pa
    insert_keyframe(fa, TrackedMatches.empty(1), m, 0)
    fb = make_frame(1, pb, x, noise=0.05, rng=rng)
    fb.pose = pb
    matches = TrackedMatches.empty(1)
    stats = map_new_points(fb, matches, m)
    assert stats.triangulated == 1
    p = m.points[matches.point_ids[0]]
    assert p.origin == TRIANGULATED and not p.depth_modified
    assert p.observations == [0, 1]
    # 0.05 px noise is about 0.03 degrees; at 2 degrees parallax that is ~0.5 m along the ray
    assert np.linalg.norm(p.position - x[0]) < 1.0


def test_triangulation_failure_adds_nothing():
    x = np.array([[0.0, 30.0, 2.0]])
    pa = camera_pose((0.0, 0.0), 0.0)
    m = MapState()
    fa = make_frame(0, pa, x)
    fa.pose = pa
    insert_keyframe(fa, TrackedMatches.empty(1), m, 0)
    fb = make_frame(1, pa, x)  # same viewpoint: zero parallax
    fb.pose = pa
    matches = TrackedMatches.empty(1)
    stats = map_new_points(fb, matches, m)
    assert stats.triangulated == 0 and stats.failed == 1 and len(m) == 0


# -- depth association ---------------------------------------------------------

def _assoc_setup(origin, offset, depth, last_depth=None, modified=False, theta=2.0):
    bearing = np.array([0.0, 0.0, 1.0])
    newp = depth * bearing
    m = MapState()
    p = m.add_point(newp + [offset, 0.0, 0.0], origin, 0, 0, 0, depth=last_depth)
    p.depth_modified = modified
    if origin == TRIANGULATED and last_depth is None:
        p.last_assoc_frame = None
    frame = make_frame(5, PoseSE3.identity(), np.array([[0.0, 0.0, 1.0]]), depth=[depth])
    frame.pose = PoseSE3.identity()
    before = p.position.copy()
    moved = depth_associate(frame, TrackedMatches(np.array([p.id])), m, theta)
    return p, before, newp, moved


def test_assoc_untouched_triangulated_close_moves():
    p, _, newp, moved = _assoc_setup(TRIANGULATED, 0.5, 10.0)
    assert moved == [p.id]
    np.testing.assert_allclose(p.position, newp)
    assert p.depth_modified and p.last_assoc_depth == 10.0 and p.last_assoc_frame == 5


def test_assoc_far_point_unchanged():
    p, before, _, moved = _assoc_setup(TRIANGULATED, 3.0, 10.0)
    assert moved == [] and np.array_equal(p.position, before) and not p.depth_modified


def test_assoc_modified_point_depth_rule():
    p, before, _, moved = _assoc_setup(TRIANGULATED, 0.5, 12.0, last_depth=8.0, modified=True)
    assert moved == [] and np.array_equal(p.position, before)
    p, _, newp, moved = _assoc_setup(TRIANGULATED, 0.5, 6.0, last_depth=8.0, modified=True)
    assert moved == [p.id]
    np.testing.assert_allclose(p.position, newp)
    assert p.last_assoc_depth == 6.0


def test_assoc_skips_slots_outside_overlap():
    m = MapState()
    p = m.add_point([0.0, 0.0, 10.2], TRIANGULATED, 0, 0, 0)
    frame = make_frame(1, PoseSE3.identity(), np.array([[0.0, 0.0, 1.0]]))
    frame.pose = PoseSE3.identity()
    assert depth_associate(frame, TrackedMatches(np.array([p.id])), m, 2.0) == []


def test_assoc_theta_must_be_positive():
    with pytest.raises(ValueError):
        _assoc_setup(TRIANGULATED, 0.5, 10.0, theta=0.0)


ALG1_CASES = list(itertools.product([True, False], ["triangulated-unmodified", "modified"], [True, False]))


@pytest.mark.parametrize("close,state,decreasing", ALG1_CASES)
def test_alg1_table(close, state, decreasing):
    offset = 0.5 if close else 3.0
    depth = 6.0 if decreasing else 12.0
    if state == "triangulated-unmodified":
        p, before, newp, moved = _assoc_setup(TRIANGULATED, offset, depth, last_depth=8.0, modified=False)
    else:
        p, before, newp, moved = _assoc_setup(DEPTH_CREATED, offset, depth, last_depth=8.0, modified=True)
    expected = close and (state == "triangulated-unmodified" or decreasing)
    assert bool(moved) == expected
    if expected:
        np.testing.assert_allclose(p.position, newp)
    else:
        assert np.array_equal(p.position, before)


def test_alg1_exactly_three_updates():
    updates = []
    for close, state, decreasing in ALG1_CASES:
        _, _, _, moved = _assoc_setup(TRIANGULATED if state == "triangulated-unmodified" else DEPTH_CREATED,
                                      0.5 if close else 3.0, 6.0 if decreasing else 12.0, last_depth=8.0,
                                      modified=state == "modified")
        updates.append(bool(moved))
    assert sum(updates) == 3


def test_association_decision_is_pure():
    m = MapState()
    p = m.add_point([0.0, 0.0, 10.5], TRIANGULATED, 0, 0, 0)
    assert association_decision(p, np.array([0.0, 0.0, 10.0]), 10.0, 2.0)
    assert not p.depth_modified and p.position[2] == 10.5


# -- local bundle adjustment ----------------------------------------------------

def _ba_map(noise=0.0, seed=9):
    rng = np.random.default_rng(seed)
    pts = landmarks(rng, 250)
    m = exact_map(pts)
    poses = [camera_pose((1.5 * k, 0.1 * k), 0.02 * k) for k in range(6)]
    for k, pose in enumerate(poses):
        f = make_frame(k, pose, pts, noise=noise, rng=rng)
        m.add_keyframe(KeyFrame(k, pose, f.descriptor_ids.copy(), f.bearings, np.arange(len(pts))))
    return m, poses, pts


def test_lba_restores_perturbed_keyframe():
    m, poses, _ = _ba_map()
    step = np.r_[np.zeros(3), 0.03, -0.03, 0.025]  # about 5 cm
    m.keyframes[4].pose = poses[4].retract(step)
    res = local_bundle_adjust(m, window=6, fixed=2, iterations=30)
    assert res.final_cost < res.initial_cost
    assert np.linalg.norm(m.keyframes[4].pose.translation - poses[4].translation) < 1e-4
    for k in (0, 1):
        assert m.keyframes[k].pose.isclose(poses[k], atol=0.0)


def test_lba_fixed_point():
    m, poses, pts = _ba_map()
    res = local_bundle_adjust(m, window=6, fixed=2)
    assert res.initial_cost - res.final_cost < 1e-12
    for kf, pose in zip(m.keyframes, poses):
        assert kf.pose.isclose(pose, atol=1e-9)


def test_lba_never_increases_cost_and_respects_frozen():
    m, _, pts = _ba_map(noise=0.5)
    frozen = [0, 1, 2]
    before = m.positions(frozen).copy()
    res = local_bundle_adjust(m, window=6, fixed=2, frozen=frozen)
    assert res.final_cost <= res.initial_cost
    np.testing.assert_array_equal(m.positions(frozen), before)
    assert res.n_poses == 4


def test_lba_single_keyframe_is_noop():
    m, _, _ = _ba_map()
    res = local_bundle_adjust(m, keyframes=[3])
    assert res.iterations == 0


def test_angular_error_zero_on_exact_data():
    rng = np.random.default_rng(10)
    pts = landmarks(rng, 50)
    pose = camera_pose((3, 1), 0.4)
    f = make_frame(0, pose, pts)
    assert np.max(angular_error(pose.R, pose.translation, pts, f.bearings)) < 1e-7
