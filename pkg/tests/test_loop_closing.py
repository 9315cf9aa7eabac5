import math

import numpy as np
import pytest

from panoslam.geometry import PoseSE3, Sim3, so3_exp
from panoslam.loop_closing import (
    PoseGraph,
    align_points,
    build_graph,
    close_loop,
    correct_map,
    detect_loop,
    format_loop_event,
    graph_cost,
    odometry_information,
    optimize_pose_graph,
)
from panoslam.sensor_sim import camera_pose
from panoslam.slam import TRIANGULATED, KeyFrame, MapState


def circle(n=100, drift=0.01, scale_drift=1.0, radius=10.0):
    """Ground-truth circle, drifting odometry and the dead-reckoned estimate."""
    true = []
    for k in range(n):
        a = 2.0 * math.pi * k / n
        true.append(Sim3.from_matrix(so3_exp([0, 0, a]), [radius * math.cos(a), radius * math.sin(a), 0.0]))
    meas = []
    for k in range(n - 1):
        rel = true[k].inverse() @ true[k + 1]
        bias = Sim3.from_matrix(so3_exp([0, 0, drift * 2 * math.pi / n]), rel.translation * drift,
                                scale_drift ** (1.0 / (n - 1)))
        meas.append(rel @ bias)
    est = [true[0]]
    for m in meas:
        est.append(est[-1] @ m)
    g = PoseGraph(list(est))
    for k, m in enumerate(meas):
        g.add_edge(k, k + 1, m)
    g.add_edge(0, n - 1, true[0].inverse() @ true[-1], 100.0, loop=True)
    return true, est, g


def test_drifting_circle_closes():
    true, est, g = circle()
    res = optimize_pose_graph(g)
    before = np.linalg.norm(est[-1].translation - true[-1].translation)
    after = np.linalg.norm(res.poses[-1].translation - true[-1].translation)
    assert before > 0.1
    assert after <= 0.1 * before
    assert res.poses[0].isclose(est[0], atol=0.0)
    assert res.converged and res.final_cost < res.initial_cost


def test_scale_drift_recovered():
    _, est, g = circle(drift=0.0, scale_drift=1.05)
    assert abs(est[-1].scale - 1.05) < 1e-9
    res = optimize_pose_graph(g)
    assert max(abs(p.scale - 1.0) for p in res.poses) < 0.01


def test_consistent_graph_is_fixed_point():
    _, est, g = circle(drift=0.0)
    res = optimize_pose_graph(g)
    assert res.final_cost < 1e-20
    for a, b in zip(res.poses, est):
        assert a.isclose(b, atol=1e-9)


def test_graph_connectivity():
    _, _, g = circle(n=10)
    assert g.is_connected()
    g2 = PoseGraph(g.nodes + [Sim3.identity()], g.edges)
    assert not g2.is_connected()


def test_edge_information_weights_cost():
    a, b = Sim3.identity(), Sim3.exp(np.r_[0, 0, 0, 1.0, 0, 0, 0.1])
    g = PoseGraph([a, b])
    g.add_edge(0, 1, Sim3.identity(), information=odometry_information(100.0))
    r = b.log()
    assert graph_cost(g.nodes, g.edges) == pytest.approx(r[:6] @ r[:6] + 100.0 * r[6] ** 2)


def test_fixed_node_only_graph():
    g = PoseGraph([Sim3.identity()], fixed=(0,))
    res = optimize_pose_graph(g)
    assert res.iterations == 0


# -- map fixtures -------------------------------------------------------------

def _add_keyframe(m, frame_index, pose, descriptors, world_points):
    pids = []
    for d, x in zip(descriptors, world_points):
        pids.append(m.add_point(x, TRIANGULATED, int(d), frame_index, frame_index).id)
    q = pose.inverse().apply(world_points)
    brg = q / np.linalg.norm(q, axis=1, keepdims=True)
    m.add_keyframe(KeyFrame(frame_index, pose, np.asarray(descriptors), brg, np.array(pids)))


def loop_map(n_kf=60, shared=200, drift=None, revisit_offset=(0.5, 0.3)):
    """Keyframes along a square; the last one revisits the first one's landmarks."""
    rng = np.random.default_rng(0)
    m = MapState()
    drift = drift or PoseSE3.identity()
    home = rng.uniform([-20, -20, 0], [20, 20, 10], size=(shared, 3))
    for k in range(n_kf):
        if k == 0:
            pose, desc, pts = camera_pose((0, 0), 0.0), np.arange(shared), home
        elif k == n_kf - 1:
            pose = drift @ camera_pose(revisit_offset, 0.1)
            desc, pts = np.arange(shared), drift.apply(home)
        else:
            a = 2 * math.pi * k / n_kf
            pose = camera_pose((60 * math.sin(a), 60 * (1 - math.cos(a))), a)
            pts = pose.translation + rng.uniform(-15, 15, size=(40, 3))
            desc = 10_000 + 40 * k + np.arange(40)
        _add_keyframe(m, 4 * k, pose, desc, pts)
    return m


def test_detect_loop_on_revisit():
    drift = PoseSE3.from_matrix(so3_exp([0, 0, 0.05]), [1.0, -0.5, 0.0])
    m = loop_map(drift=drift)
    cand = detect_loop(len(m.keyframes) - 1, m)
    assert cand is not None
    assert cand.match == 0 and cand.shared == 200 and cand.inliers == 200
    # relative pose of the two cameras, unaffected by the common drift
    truth = camera_pose((0, 0), 0.0).inverse() @ camera_pose((0.5, 0.3), 0.1)
    assert cand.relative.isclose(truth.to_sim3(), atol=1e-9)


def test_detect_loop_requires_separation_and_shared_count():
    m = loop_map()
    q = len(m.keyframes) - 1
    assert detect_loop(q, m, min_separation=q + 1) is None
    assert detect_loop(q, m, min_shared=201) is None


def test_detect_loop_too_few_shared():
    m = loop_map(shared=10)
    assert detect_loop(len(m.keyframes) - 1, m) is None


def test_detect_loop_distance_gate():
    m = loop_map(revisit_offset=(30.0, 0.0))
    q = len(m.keyframes) - 1
    assert detect_loop(q, m) is None
    assert detect_loop(q, m, max_distance=None) is not None


def test_straight_line_has_no_loop():
    rng = np.random.default_rng(1)
    m = MapState()
    for k in range(80):
        pose = camera_pose((5.0 * k, 0.0), 0.0)
        pts = pose.translation + rng.uniform(-15, 15, size=(40, 3))
        # neighbouring keyframes share half their descriptors
        _add_keyframe(m, k, pose, 20 * k + np.arange(40), pts)
    assert all(detect_loop(q, m) is None for q in range(len(m.keyframes)))


def test_align_points_degenerate():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    assert align_points(pts, pts) is None


def test_close_loop_corrects_map():
    drift = PoseSE3.from_matrix(so3_exp([0, 0, 0.05]), [1.0, -0.5, 0.0])
    m = loop_map(drift=drift)
    first = m.keyframes[0].pose
    cand = detect_loop(len(m.keyframes) - 1, m)
    result, new = close_loop(m, cand)
    assert result.final_cost < result.initial_cost
    assert m.keyframes[0].pose.isclose(first, atol=0.0)
    truth = camera_pose((0.5, 0.3), 0.1)
    err_before = np.linalg.norm((drift @ truth).translation - truth.translation)
    err_after = np.linalg.norm(m.keyframes[-1].pose.translation - truth.translation)
    assert err_after < 0.1 * err_before
    line = format_loop_event(236, 0, cand, result)
    assert line.startswith("loop query=236 match=0 shared=200")


def test_build_graph_structure():
    m = loop_map()
    cand = detect_loop(len(m.keyframes) - 1, m)
    g = build_graph(m, cand)
    assert len(g.edges) == len(m.keyframes)
    assert sum(e.loop for e in g.edges) == 1
    assert g.is_connected()


def test_correct_map_identity_and_shift():
    m = loop_map(n_kf=5)
    old = {kf.frame_index: kf.pose for kf in m.keyframes}
    before = {pid: p.position.copy() for pid, p in m.points.items()}
    correct_map(m, old, {k: p.to_sim3() for k, p in old.items()})
    for pid, p in m.points.items():
        np.testing.assert_allclose(p.position, before[pid], rtol=0, atol=1e-12)

    shift = Sim3.from_matrix(np.eye(3), [3.0, -2.0, 1.0])
    correct_map(m, old, {k: shift @ p.to_sim3() for k, p in old.items()})
    for pid, p in m.points.items():
        np.testing.assert_allclose(p.position, before[pid] + [3.0, -2.0, 1.0], atol=1e-9)
    for kf in m.keyframes:
        np.testing.assert_allclose(kf.pose.translation, old[kf.frame_index].translation + [3.0, -2.0, 1.0])
