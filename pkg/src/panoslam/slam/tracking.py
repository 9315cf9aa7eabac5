"""Motion-only pose estimation on bearing residuals, and the keyframe decision."""

from __future__ import annotations

import math

import numpy as np

from ..errors import TrackingLostError
from ..geometry import PoseSE3
from .types import NULL, Frame, MapState, TrackedMatches

HUBER_DEG = 0.5
REJECT_DEG = 3.0
MIN_MATCHES = 6
KEYFRAME_RATIO = 0.9
KEYFRAME_GAP = 10


def tangent_basis(bearings):
    """(n, 2, 3) orthonormal rows spanning the plane normal to each bearing."""
    b = np.asarray(bearings, dtype=float).reshape(-1, 3)
    helper = np.where(np.abs(b[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(b, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(b, e1)
    return np.stack([e1, e2], axis=1)


def bearing_residuals(R, t, points, basis):
    """Residuals r = E b_pred (n, 2) and d r / d q (n, 2, 3), q = R^T (p - t)."""
    q = (points - t) @ R
    n = np.linalg.norm(q, axis=1)
    b = q / n[:, None]
    r = np.einsum("nij,nj->ni", basis, b)
    P = (np.eye(3) - b[:, :, None] * b[:, None, :]) / n[:, None, None]
    return r, np.matmul(basis, P), q


def angular_error(R, t, points, bearings):
    """Angle (rad) between observed bearings and directions to the points."""
    q = (points - t) @ R
    cross = np.linalg.norm(np.cross(bearings, q), axis=1)
    return np.arctan2(cross, np.sum(bearings * q, axis=1))


def pose_jacobian(dr_dq, q):
    """Jacobian w.r.t. a right perturbation (omega, delta): dq = [q]x omega - delta."""
    Jw = np.matmul(dr_dq, _skew_many(q))
    return np.concatenate([Jw, -dr_dq], axis=2)


def _skew_many(v):
    z = np.zeros(len(v))
    return np.stack([
        np.stack([z, -v[:, 2], v[:, 1]], axis=1),
        np.stack([v[:, 2], z, -v[:, 0]], axis=1),
        np.stack([-v[:, 1], v[:, 0], z], axis=1),
    ], axis=1)


def huber_weights(r, delta):
    """IRLS weights for the Huber loss on residual norms."""
    norm = np.linalg.norm(r, axis=1)
    return np.where(norm <= delta, 1.0, delta / np.maximum(norm, 1e-300))


def huber_cost(r, delta):
    norm = np.linalg.norm(r, axis=1)
    return float(np.sum(np.where(norm <= delta, 0.5 * norm ** 2, delta * (norm - 0.5 * delta))))


def estimate_pose(pose: PoseSE3, points, bearings, robust=True, huber_deg=HUBER_DEG,
                  iterations=15, tol=1e-12):
    """Gauss-Newton on bearing residuals from ``pose``; returns the refined pose."""
    basis = tangent_basis(bearings)
    delta = math.radians(huber_deg)
    for _ in range(iterations):
        r, dr_dq, q = bearing_residuals(pose.R, pose.translation, points, basis)
        J = pose_jacobian(dr_dq, q).reshape(-1, 6)
        w = np.repeat(huber_weights(r, delta) if robust else np.ones(len(r)), 2)
        H = J.T @ (w[:, None] * J)
        g = -J.T @ (w * r.reshape(-1))
        try:
            dx = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        pose = pose.retract(dx)
        if float(dx @ dx) < tol:
            break
    return pose


def match_by_descriptor(frame: Frame, index) -> TrackedMatches:
    """Descriptor-id lookup; descriptors repeated within the frame stay unmatched."""
    desc = frame.descriptor_ids
    uniq, counts = np.unique(desc, return_counts=True)
    repeated = set(uniq[counts > 1].tolist())
    ids = np.array([NULL if d in repeated else index.get(d, NULL) for d in desc.tolist()], dtype=np.int64)
    return TrackedMatches(ids)


def track(frame: Frame, map: MapState, prev_pose: PoseSE3, index=None, robust=True,
          huber_deg=HUBER_DEG, reject_deg=REJECT_DEG, min_matches=MIN_MATCHES):
    """Match the frame against the map and estimate its pose.

    ``index`` maps descriptor ids to candidate map points (default: the
    local map of recent keyframes).  Gauss-Newton starts at ``prev_pose``;
    after convergence slots whose angular residual exceeds ``reject_deg``
    are cleared and the pose is re-estimated on the survivors.
    """
    if index is None:
        index = map.local_index()
    matches = match_by_descriptor(frame, index)
    sel = np.flatnonzero(matches.matched)
    if len(sel) < min_matches:
        raise TrackingLostError(frame.index, len(sel))
    pts = map.positions(matches.point_ids[sel])
    brg = frame.bearings[sel]
    pose = prev_pose
    reject = math.radians(reject_deg)
    for _ in range(2):
        pose = estimate_pose(pose, pts, brg, robust, huber_deg)
        ang = angular_error(pose.R, pose.translation, pts, brg)
        keep = ang <= reject
        if keep.all():
            break
        matches.point_ids[sel[~keep]] = NULL
        sel, pts, brg = sel[keep], pts[keep], brg[keep]
        if len(sel) < min_matches:
            raise TrackingLostError(frame.index, len(sel))
    return matches, pose


def decide_keyframe(frame: Frame, matches: TrackedMatches, map: MapState,
                    ratio=KEYFRAME_RATIO, gap_max=KEYFRAME_GAP):
    """Keyframe when the tracked count falls below ``ratio`` times the points
    held by the last keyframe, or ``gap_max`` frames have passed."""
    if not map.keyframes:
        return True
    last = map.keyframes[-1]
    if frame.index - last.frame_index >= gap_max:
        return True
    return matches.count < ratio * last.n_points
