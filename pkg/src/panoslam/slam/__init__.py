"""Keyframe tracking, mapping, hybrid depth association and local bundle adjustment."""

from .bundle import BundleResult, local_bundle_adjust
from .mapping import (
    DEFAULT_THETA,
    MappingStats,
    association_decision,
    depth_associate,
    insert_keyframe,
    map_new_points,
    record_observations,
)
from .tracking import decide_keyframe, estimate_pose, match_by_descriptor, track
from .types import DEPTH_CREATED, NULL, TRIANGULATED, Frame, KeyFrame, MapPoint, MapState, TrackedMatches

__all__ = [
    "BundleResult", "DEFAULT_THETA", "DEPTH_CREATED", "Frame", "KeyFrame", "MapPoint", "MapState",
    "MappingStats", "NULL", "TRIANGULATED", "TrackedMatches", "association_decision", "decide_keyframe",
    "depth_associate", "estimate_pose", "insert_keyframe", "local_bundle_adjust", "map_new_points",
    "match_by_descriptor", "record_observations", "track",
]
