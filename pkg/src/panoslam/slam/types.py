"""Frames, map points, keyframes and the map container."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..depth_refine.maps import DenseDepthMap
from ..geometry import PanoramicCamera, PoseSE3
from ..sensor_sim import FrameObservations, SparseDepthMap

TRIANGULATED = "triangulated"
DEPTH_CREATED = "depth_created"
ORIGINS = (TRIANGULATED, DEPTH_CREATED)

NULL = -1  # empty slot in a TrackedMatches array


@dataclass
class Frame:
    """One time step of the sequence.

    ``obs_depth`` holds the refined depth read at each observation's pixel
    (NaN when the pixel is outside the overlap region); ``refined`` is the
    full map when it was computed.
    """

    index: int
    timestamp: float
    observations: FrameObservations
    sparse: SparseDepthMap
    overlap: np.ndarray
    obs_depth: np.ndarray
    bearings: np.ndarray
    refined: Optional[DenseDepthMap] = None
    pose: Optional[PoseSE3] = None
    is_keyframe: bool = False

    @classmethod
    def build(cls, index, timestamp, observations, sparse, overlap, cam: PanoramicCamera,
              obs_depth=None, refined: DenseDepthMap = None):
        """Assemble a frame; ``obs_depth`` defaults to sampling ``refined``."""
        px = observations.pixels
        inside = obs_pixel_mask(overlap, px)
        if obs_depth is None:
            obs_depth = np.full(len(px), np.nan)
            if refined is not None:
                obs_depth[inside] = refined.at(px[inside])
        obs_depth = np.where(inside, obs_depth, np.nan)
        return cls(index, timestamp, observations, sparse, overlap, obs_depth,
                   cam.bearing(px), refined)

    @property
    def descriptor_ids(self):
        return self.observations.descriptor_ids

    def __len__(self):
        return len(self.observations)

    def in_overlap(self):
        """Per-observation flag: pixel inside OR_t with a defined depth."""
        return np.isfinite(self.obs_depth)


def obs_pixel_mask(mask, pixels):
    """Look up a boolean image at continuous pixel positions (floor)."""
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    h, w = mask.shape
    cols = np.clip(np.floor(px[:, 0]).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(px[:, 1]).astype(np.int64), 0, h - 1)
    return mask[rows, cols]


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    origin: str
    descriptor_id: int
    ref_keyframe: int  # frame index of the creating or last-modifying keyframe
    depth_modified: bool = False
    last_assoc_depth: Optional[float] = None
    last_assoc_frame: Optional[int] = None
    observations: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class TrackedMatches:
    """Slot i holds the map-point id matched to observation i, or NULL."""

    point_ids: np.ndarray

    @classmethod
    def empty(cls, m):
        return cls(np.full(m, NULL, dtype=np.int64))

    def __len__(self):
        return len(self.point_ids)

    @property
    def matched(self):
        return self.point_ids != NULL

    @property
    def count(self):
        return int(np.count_nonzero(self.matched))


@dataclass
class KeyFrame:
    frame_index: int
    pose: PoseSE3
    descriptor_ids: np.ndarray
    bearings: np.ndarray
    point_ids: np.ndarray
    tracked: int = 0  # matches found by tracking before new points were added

    @property
    def n_points(self):
        return int(np.count_nonzero(self.point_ids != NULL))


@dataclass
class MapState:
    points: Dict[int, MapPoint] = field(default_factory=dict)
    keyframes: List[KeyFrame] = field(default_factory=list)
    next_point_id: int = 0
    # descriptor -> (keyframe list index, slot) of the latest keyframe that saw it
    descriptor_keyframe: Dict[int, Tuple[int, int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def add_point(self, position, origin, descriptor_id, ref_keyframe, frame_index,
                  depth=None) -> MapPoint:
        p = MapPoint(self.next_point_id, position, origin, int(descriptor_id), ref_keyframe,
                     last_assoc_depth=depth, last_assoc_frame=frame_index if depth is not None else None,
                     observations=[frame_index])
        self.points[p.id] = p
        self.next_point_id += 1
        return p

    def add_keyframe(self, kf: KeyFrame):
        k = len(self.keyframes)
        self.keyframes.append(kf)
        for slot, d in enumerate(kf.descriptor_ids.tolist()):
            self.descriptor_keyframe[d] = (k, slot)
        return k

    def keyframe_index(self, frame_index):
        for k in range(len(self.keyframes) - 1, -1, -1):
            if self.keyframes[k].frame_index == frame_index:
                return k
        raise KeyError(frame_index)

    def positions(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if not len(ids):
            return np.zeros((0, 3))
        return np.array([self.points[i].position for i in ids.tolist()])

    def local_index(self, window=5, extra_ids=()):
        """Descriptor -> point id over the recent keyframes (later entries win)."""
        index = {}
        for kf in self.keyframes[-window:]:
            sel = kf.point_ids != NULL
            index.update(zip(kf.descriptor_ids[sel].tolist(), kf.point_ids[sel].tolist()))
        for pid in extra_ids:
            index[self.points[pid].descriptor_id] = pid
        return index

    def snapshot_lines(self):
        lines = ["# id x y z origin depth_modified"]
        for pid in sorted(self.points):
            p = self.points[pid]
            x, y, z = p.position
            lines.append(f"{pid} {x:.9f} {y:.9f} {z:.9f} {p.origin} {int(p.depth_modified)}")
        return lines
