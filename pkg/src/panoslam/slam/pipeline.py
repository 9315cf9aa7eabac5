"""Sequential per-frame pipeline: densify -> track -> associate -> [map -> LBA -> loop]."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..config import RunConfig
from ..dataset import Dataset, read_observations, frame_stem
from ..depth_refine import AuxiliaryParams, ToyPredictor, correct, refine
from ..depth_refine.maps import DenseDepthMap
from ..errors import CorrectionUnavailableError
from ..evaluation import Trajectory, format_pose_line
from ..geometry import PanoramicCamera, PoseSE3
from ..sensor_sim import overlap_at
from .. import loop_closing
from .bundle import local_bundle_adjust
from .mapping import depth_associate, insert_keyframe, map_new_points, record_observations
from .tracking import decide_keyframe, track
from .types import Frame, MapState, TrackedMatches

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Densification at observation pixels
# ---------------------------------------------------------------------------

@dataclass
class DepthInfo:
    obs_depth: np.ndarray
    pso_history: List[float] = field(default_factory=list)
    params: Optional[np.ndarray] = None
    skipped: bool = False


def make_predictor(config: RunConfig, cam: PanoramicCamera, factor=8):
    return ToyPredictor(cam.width, cam.height, config.predictor_channels, factor, config.predictor_seed,
                        config.predictor_distortion, config.predictor_bias)


def densify_observations(method, sparse, pixels, radius, predictor=None, context=None, pso=None,
                         initial: AuxiliaryParams = None) -> DepthInfo:
    """Refined depth at the observation pixels inside the overlap region.

    The dense map is evaluated only at the pixel cells the observations
    occupy; both densifiers are pointwise, so these values equal the full
    overlap-region map at the same pixels.
    """
    inside = overlap_at(sparse, pixels, radius)
    out = np.full(len(pixels), np.nan)
    if not inside.any():
        return DepthInfo(out, skipped=True)
    needed = np.zeros((sparse.height, sparse.width), dtype=bool)
    px = np.asarray(pixels)[inside]
    needed[np.floor(px[:, 1]).astype(int), np.floor(px[:, 0]).astype(int)] = True
    info = DepthInfo(out)
    if method == "interpolation_only":
        try:
            dense, _ = correct(DenseDepthMap(np.zeros(needed.shape)), sparse, None, needed)
        except CorrectionUnavailableError:
            info.skipped = True
            return info
    else:
        res = refine(predictor, context, sparse, pso, overlap=needed, initial=initial)
        dense = res.depth
        info.pso_history = res.history
        info.params = res.params.vector
        info.skipped = res.skipped
    vals = dense.at(px)
    out[inside] = np.where(vals > 0, vals, np.nan)
    return info


class DepthCache:
    """Per-frame observation depths keyed by everything they depend on."""

    def __init__(self):
        self._store: Dict[Tuple, Dict[int, DepthInfo]] = {}

    @staticmethod
    def key(dataset: Dataset, config: RunConfig):
        dens = (config.densification,)
        if config.densification == "pano_dars":
            dens += (config.pso_swarm_size, config.pso_iterations, config.pso_inertia, config.pso_cognitive,
                     config.pso_social, config.pso_search_halfwidth, config.pso_warm_start, config.seed,
                     config.predictor_seed, config.predictor_channels, config.predictor_distortion,
                     config.predictor_bias)
        return (str(dataset.root.resolve()),) + dens

    def table(self, dataset, config):
        return self._store.setdefault(self.key(dataset, config), {})


# ---------------------------------------------------------------------------
# SLAM system
# ---------------------------------------------------------------------------

@dataclass
class LoopRecord:
    frame_index: int
    match_frame: int
    line: str
    before: Dict[int, PoseSE3]
    after: Dict[int, PoseSE3]


class SlamSystem:
    """Holds the map and the per-frame pose bookkeeping.

    Non-keyframe poses are stored relative to their reference keyframe so
    that bundle adjustment and loop correction carry them along.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.map = MapState()
        self.frame_refs: Dict[int, Tuple[int, PoseSE3]] = {}
        self.kf_by_frame: Dict[int, int] = {}
        self.prev_matched: List[int] = []
        self.log_lines: List[str] = []
        self.loops: List[LoopRecord] = []
        self._last_loop_kf = None

    # -- pose bookkeeping --------------------------------------------------
    def pose_of(self, t) -> PoseSE3:
        ref, rel = self.frame_refs[t]
        return self.map.keyframes[self.kf_by_frame[ref]].pose @ rel

    def all_poses(self) -> Dict[int, PoseSE3]:
        return {t: self.pose_of(t) for t in sorted(self.frame_refs)}

    def _predict(self, t):
        if t - 1 not in self.frame_refs:
            return PoseSE3.identity()
        last = self.pose_of(t - 1)
        if t - 2 not in self.frame_refs:
            return last
        prev = self.pose_of(t - 2)
        return last @ (prev.inverse() @ last)

    # -- main step ---------------------------------------------------------
    def process(self, frame: Frame) -> PoseSE3:
        cfg = self.config
        t = frame.index
        if not self.map.keyframes:
            frame.pose = PoseSE3.identity()
            matches = TrackedMatches.empty(len(frame))
            stats = map_new_points(frame, matches, self.map)
            self._add_keyframe(frame, matches, 0)
            self.log_lines.append(f"frame {t} init points={stats.depth_created}")
            self.prev_matched = matches.point_ids[matches.matched].tolist()
            return frame.pose

        index = self.map.local_index(cfg.local_window, self.prev_matched)
        matches, pose = track(frame, self.map, self._predict(t), index)
        frame.pose = pose
        last_kf = self.map.keyframes[-1].frame_index
        moved = depth_associate(frame, matches, self.map, cfg.theta, last_kf) if cfg.association else []
        record_observations(frame, matches, self.map)
        tracked = matches.count
        line = f"frame {t} matches={tracked} assoc={len(moved)}"

        if decide_keyframe(frame, matches, self.map, cfg.keyframe_ratio, cfg.keyframe_gap):
            stats = map_new_points(frame, matches, self.map)
            self._add_keyframe(frame, matches, tracked)
            ba = local_bundle_adjust(self.map, cfg.lba_window, cfg.lba_fixed, moved,
                                     iterations=cfg.lba_iterations)
            frame.pose = self.map.keyframes[-1].pose
            line += (f" keyframe new_depth={stats.depth_created} new_tri={stats.triangulated}"
                     f" lba={ba.initial_cost:.6e}->{ba.final_cost:.6e}")
            if cfg.loop_closing:
                line += self._try_loop(t)
                frame.pose = self.map.keyframes[-1].pose
        else:
            ref = self.map.keyframes[-1]
            self.frame_refs[t] = (ref.frame_index, ref.pose.inverse() @ pose)
        self.prev_matched = matches.point_ids[matches.matched].tolist()
        self.log_lines.append(line)
        return frame.pose

    def _add_keyframe(self, frame, matches, tracked):
        insert_keyframe(frame, matches, self.map, tracked)
        self.kf_by_frame[frame.index] = len(self.map.keyframes) - 1
        self.frame_refs[frame.index] = (frame.index, PoseSE3.identity())

    def _try_loop(self, t):
        cfg = self.config
        q = len(self.map.keyframes) - 1
        if self._last_loop_kf is not None and q - self._last_loop_kf < cfg.loop_min_separation:
            return ""
        cand = loop_closing.detect_loop(q, self.map, cfg.loop_min_shared, cfg.loop_min_separation,
                                        max_distance=cfg.loop_max_distance)
        if cand is None:
            return ""
        before = self.all_poses()
        result, _ = loop_closing.close_loop(self.map, cand, cfg.loop_weight,
                                             scale_information=cfg.loop_scale_information)
        after = self.all_poses()
        match_frame = self.map.keyframes[cand.match].frame_index
        line = loop_closing.format_loop_event(t, match_frame, cand, result)
        self.loops.append(LoopRecord(t, match_frame, line, before, after))
        self._last_loop_kf = q
        return " loop"


# ---------------------------------------------------------------------------
# Whole runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    trajectory: Trajectory
    system: SlamSystem
    online: List[str]
    frames_processed: int


def load_frame(dataset: Dataset, t, config: RunConfig, cache: DepthCache = None, predictor=None,
               warm=None):
    """Build a :class:`Frame`, densifying (or reusing cached depth) for its observations."""
    cam = dataset.camera
    table = cache.table(dataset, config) if cache is not None else {}
    stamp = t * dataset.manifest.get("dt", float)
    if t in table:
        path = dataset.root / "frames" / (frame_stem(t) + ".obs")
        obs = read_observations(path, t)
        info = table[t]
        return Frame(t, stamp, obs, None, None, info.obs_depth, cam.bearing(obs.pixels)), info
    data = dataset.frame(t)
    if predictor is None and config.densification == "pano_dars":
        predictor = make_predictor(config, cam)
    info = densify_observations(config.densification, data.sparse, data.observations.pixels,
                                dataset.manifest.overlap_radius, predictor, data.context,
                                config.pso_config(), warm)
    table[t] = info
    frame = Frame(t, stamp, data.observations, data.sparse, None, info.obs_depth,
                  cam.bearing(data.observations.pixels))
    return frame, info


def run_slam(dataset: Dataset, config: RunConfig, cache: DepthCache = None, stream=None,
             frame_limit=None) -> RunResult:
    """Run the full pipeline over ``dataset``.

    ``stream`` (a writable text file) receives one interchange-format line
    per frame as soon as the frame is processed.  Raises
    :class:`~panoslam.errors.TrackingLostError` when tracking fails.
    """
    n = len(dataset) if frame_limit is None else min(frame_limit, len(dataset))
    system = SlamSystem(config)
    predictor = make_predictor(config, dataset.camera) if config.densification == "pano_dars" else None
    warm = None
    online = []
    for t in range(n):
        frame, info = load_frame(dataset, t, config, cache, predictor, warm)
        if config.pso_warm_start and info.params is not None:
            warm = AuxiliaryParams.from_vector(info.params)
        pose = system.process(frame)
        line = format_pose_line(frame.timestamp, pose)
        online.append(line)
        if stream is not None:
            stream.write(line + "\n")
            stream.flush()
    poses = system.all_poses()
    stamps = np.array([t * dataset.manifest.get("dt", float) for t in sorted(poses)])
    traj = Trajectory(stamps, [poses[t] for t in sorted(poses)])
    return RunResult(traj, system, online, n)


def loop_trajectories(result: RunResult, dt) -> List[Tuple[Trajectory, Trajectory]]:
    """(before, after) trajectories over the frames processed up to each loop closure."""
    out = []
    for rec in result.system.loops:
        ts = sorted(rec.before)
        stamps = np.array(ts) * dt
        out.append((Trajectory(stamps, [rec.before[t] for t in ts]),
                    Trajectory(stamps, [rec.after[t] for t in ts])))
    return out
