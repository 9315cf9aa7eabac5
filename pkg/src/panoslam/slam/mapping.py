"""Map-point creation and the hybrid depth association."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import PARALLAX_MIN_DEG, triangulate_many
from .tracking import REJECT_DEG, angular_error
from .types import DEPTH_CREATED, TRIANGULATED, Frame, KeyFrame, MapState, TrackedMatches

DEFAULT_THETA = 2.0


@dataclass
class MappingStats:
    depth_created: int = 0
    triangulated: int = 0
    failed: int = 0


def map_new_points(frame: Frame, matches: TrackedMatches, map: MapState,
                   parallax_min_deg=PARALLAX_MIN_DEG, reject_deg=REJECT_DEG) -> MappingStats:
    """Create points for the keyframe's unmatched observations and register it.

    Inside the overlap region the point is the refined depth unprojected
    through the frame pose.  Outside, the observation is triangulated with
    the most recent earlier keyframe holding the same descriptor; the point
    is dropped when triangulation fails or its bearing error in either view
    exceeds ``reject_deg``.  ``matches`` is extended in place with the new
    point ids.
    """
    pose = frame.pose
    stats = MappingStats()
    desc = frame.descriptor_ids
    uniq, counts = np.unique(desc, return_counts=True)
    repeated = set(uniq[counts > 1].tolist())
    free = [i for i in np.flatnonzero(~matches.matched).tolist() if int(desc[i]) not in repeated]
    depth = frame.obs_depth

    tri_slots, partners = [], []
    for i in free:
        d = depth[i]
        if np.isfinite(d):
            p = map.add_point(pose.apply(d * frame.bearings[i]), DEPTH_CREATED, desc[i],
                              frame.index, frame.index, depth=float(d))
            matches.point_ids[i] = p.id
            stats.depth_created += 1
        else:
            hit = map.descriptor_keyframe.get(int(desc[i]))
            if hit is not None:
                tri_slots.append(i)
                partners.append(hit)

    if tri_slots:
        kfs = map.keyframes
        Rb = np.array([kfs[k].pose.R for k, _ in partners])
        tb = np.array([kfs[k].pose.translation for k, _ in partners])
        bb = np.array([kfs[k].bearings[s] for k, s in partners])
        ba = frame.bearings[tri_slots]
        pts = triangulate_many(pose.R, pose.translation, ba, Rb, tb, bb, parallax_min_deg)
        ok = np.isfinite(pts[:, 0])
        reject = math.radians(reject_deg)
        idx = np.flatnonzero(ok)
        if len(idx):
            err_a = angular_error(pose.R, pose.translation, pts[idx], ba[idx])
            qb = np.einsum("nji,nj->ni", Rb[idx], pts[idx] - tb[idx])
            err_b = np.arctan2(np.linalg.norm(np.cross(bb[idx], qb), axis=1), np.sum(bb[idx] * qb, axis=1))
            ok[idx[(err_a > reject) | (err_b > reject)]] = False
        for j, i in enumerate(tri_slots):
            if not ok[j]:
                stats.failed += 1
                continue
            p = map.add_point(pts[j], TRIANGULATED, desc[i], frame.index, frame.index)
            k, _ = partners[j]
            p.observations.insert(0, kfs[k].frame_index)
            matches.point_ids[i] = p.id
            stats.triangulated += 1
    return stats


def insert_keyframe(frame: Frame, matches: TrackedMatches, map: MapState, tracked: int) -> KeyFrame:
    kf = KeyFrame(frame.index, frame.pose, frame.descriptor_ids.copy(), frame.bearings,
                  matches.point_ids.copy(), tracked)
    map.add_keyframe(kf)
    frame.is_keyframe = True
    return kf


def association_decision(point, new_position, depth, theta):
    """The two acceptance policies for moving ``point`` to a depth-derived position."""
    if not np.linalg.norm(point.position - new_position) < theta:
        return False
    untouched_triangulation = point.origin == TRIANGULATED and not point.depth_modified
    closer = point.last_assoc_depth is not None and depth < point.last_assoc_depth
    return untouched_triangulation or closer


def depth_associate(frame: Frame, matches: TrackedMatches, map: MapState, theta=DEFAULT_THETA,
                    ref_keyframe=None):
    """Move tracked points onto the current refined depth where permitted.

    Slots without a match or outside the overlap region are skipped.  For
    the rest the candidate position is the refined depth unprojected
    through the frame pose; the point moves when it lies closer than
    ``theta`` and either it is a triangulated point never moved before, or
    the current depth is smaller than the one it was last set from.
    Returns the ids of the points that moved.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    pose = frame.pose
    ref = frame.index if ref_keyframe is None else ref_keyframe
    moved = []
    for i in np.flatnonzero(matches.matched).tolist():
        d = frame.obs_depth[i]
        if not np.isfinite(d):
            continue
        point = map.points[int(matches.point_ids[i])]
        newp = pose.apply(d * frame.bearings[i])
        if association_decision(point, newp, d, theta):
            point.position = newp
            point.depth_modified = True
            point.last_assoc_depth = float(d)
            point.last_assoc_frame = frame.index
            point.ref_keyframe = ref
            moved.append(point.id)
    return moved


def record_observations(frame: Frame, matches: TrackedMatches, map: MapState):
    for pid in matches.point_ids[matches.matched].tolist():
        obs = map.points[pid].observations
        if obs[-1] != frame.index:
            obs.append(frame.index)
