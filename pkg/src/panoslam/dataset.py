"""On-disk synthetic sequences.

Layout of a dataset directory::

    manifest.txt          key = value lines (world seed, rig, trajectory)
    groundtruth.txt       trajectory interchange format
    frames/NNNNNN.obs     "frame <t>", then "<landmark_id> <descriptor_id> <u> <v>" per line
    frames/NNNNNN.depth   "frame <t> <width> <height>", then "<col> <row> <range>" per line
    frames/NNNNNN.ctx     binary grid: low-resolution range rendering (predictor input)

Blank lines and ``#`` comments are allowed in every text file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .depth_refine.maps import read_grid, write_grid
from .errors import DatasetError
from .evaluation import Trajectory, read_trajectory, write_trajectory
from .geometry import PanoramicCamera, PoseSE3
from .sensor_sim import (
    FrameObservations,
    RigCalibration,
    SparseDepthMap,
    generate_world,
    ground_truth_trajectory,
    render_context,
    simulate_frame,
    simulate_lidar,
)

FORMAT_TAG = "panoslam-dataset-1"


@dataclass
class GenerateConfig:
    scenario: str = "loop_1km"
    seed: int = 1
    extent: float = 30.0
    landmark_count: int = 12000
    spacing: float = 2.5
    dt: float = 0.25
    width: int = 1024
    height: int = 512
    context_factor: int = 8
    pixel_noise: float = 0.5
    mismatch_rate: float = 0.02
    max_range: float = 40.0
    min_range: float = 1.0
    overlap_radius: float = 8.0
    rig: RigCalibration = field(default_factory=RigCalibration)
    max_frames: Optional[int] = None  # truncate the sequence (small test datasets)


@dataclass
class Manifest:
    values: Dict[str, str]

    def get(self, key, cast=str, default=None):
        if key not in self.values:
            if default is not None:
                return default
            raise KeyError(key)
        return cast(self.values[key])

    @property
    def frame_count(self):
        return self.get("frame_count", int)

    @property
    def camera(self):
        return PanoramicCamera(self.get("width", int), self.get("height", int))

    @property
    def overlap_radius(self):
        return self.get("overlap_radius", float)

    def rig(self):
        q_t = [float(x) for x in self.values["rig.lidar_from_camera"].split()]
        return RigCalibration(
            lidar_from_camera=PoseSE3(np.array(q_t[:4]), np.array(q_t[4:])),
            lidar_tilt=math.radians(self.get("rig.lidar_tilt_deg", float)),
            vertical_fov=math.radians(self.get("rig.vertical_fov_deg", float)),
            beam_count=self.get("rig.beam_count", int),
            azimuth_step=math.radians(self.get("rig.azimuth_step_deg", float)),
            elevation_center=math.radians(self.get("rig.elevation_center_deg", float)),
            max_range=self.get("rig.max_range", float),
            range_noise=self.get("rig.range_noise", float),
        )


@dataclass
class FrameData:
    index: int
    timestamp: float
    observations: FrameObservations
    sparse: SparseDepthMap
    context: np.ndarray


def frame_stem(t):
    return f"{t:06d}"


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------

def parse_kv(path) -> Dict[str, str]:
    path = Path(path)
    text = _read_text(path)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(path, "expected 'key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DatasetError(path, "empty key", lineno)
        if key in out:
            raise DatasetError(path, f"duplicate key {key!r}", lineno)
        out[key] = value
    return out


def format_kv(values: Dict[str, object]):
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def _read_text(path: Path):
    try:
        return path.read_text()
    except FileNotFoundError:
        raise DatasetError(path, "no such file") from None
    except OSError as exc:
        raise DatasetError(path, f"cannot read: {exc.strerror}") from exc


def _write_text(path: Path, text):
    try:
        path.write_text(text)
    except OSError as exc:
        raise DatasetError(path, f"cannot write: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# Per-frame records
# ---------------------------------------------------------------------------

def format_observations(t, obs: FrameObservations):
    lines = [f"frame {t}"]
    for lid, did, (u, v) in zip(obs.landmark_ids, obs.descriptor_ids, obs.pixels):
        lines.append(f"{lid} {did} {u:.6f} {v:.6f}")
    return "\n".join(lines) + "\n"


def format_sparse(t, sparse: SparseDepthMap):
    lines = [f"frame {t} {sparse.width} {sparse.height}"]
    for c, r, d in zip(sparse.cols, sparse.rows, sparse.depth):
        lines.append(f"{c} {r} {d:.9f}")
    return "\n".join(lines) + "\n"


def _records(path: Path):
    """Yield (lineno, fields) for non-comment lines."""
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _header(path, records, expected_t, n_extra):
    try:
        lineno, fields = next(records)
    except StopIteration:
        raise DatasetError(path, "empty file") from None
    if fields[0] != "frame" or len(fields) != 2 + n_extra:
        form = "frame <index> <width> <height>" if n_extra else "frame <index>"
        raise DatasetError(path, f"header must read '{form}'", lineno)
    try:
        vals = [int(x) for x in fields[1:]]
    except ValueError:
        raise DatasetError(path, "non-integer header field", lineno) from None
    if expected_t is not None and vals[0] != expected_t:
        raise DatasetError(path, f"frame index {vals[0]} does not match file position {expected_t}", lineno)
    return vals


def _fast_table(path: Path, ncols, n_header):
    """Whole-file numeric parse for well-formed files; ``None`` sends the
    caller to the line-by-line reader, which reports the offending line."""
    text = _read_text(path)
    if "#" in text:
        return None
    head, _, body = text.lstrip().partition("\n")
    fields = head.split()
    if len(fields) != 1 + n_header or fields[0] != "frame":
        return None
    try:
        header = [int(x) for x in fields[1:]]
        values = np.array(body.split(), dtype=float)
    except ValueError:
        return None
    if values.size % ncols or not np.all(np.isfinite(values)):
        return None
    return header, values.reshape(-1, ncols)


def read_observations(path, expected_t=None) -> FrameObservations:
    path = Path(path)
    fast = _fast_table(path, 4, 1)
    if fast is not None:
        (t,), tab = fast
        ids = tab[:, :2]
        if (expected_t is None or t == expected_t) and np.all(ids == np.round(ids)):
            return FrameObservations(tab[:, 0].astype(np.int64), tab[:, 1].astype(np.int64), tab[:, 2:4].copy())
    rec = _records(path)
    _header(path, rec, expected_t, 0)
    lids, dids, px = [], [], []
    for lineno, f in rec:
        if len(f) != 4:
            raise DatasetError(path, f"expected 4 fields, found {len(f)}", lineno)
        try:
            lids.append(int(f[0]))
            dids.append(int(f[1]))
            px.append((float(f[2]), float(f[3])))
        except ValueError:
            raise DatasetError(path, "malformed observation record", lineno) from None
        if not all(math.isfinite(x) for x in px[-1]):
            raise DatasetError(path, "non-finite pixel", lineno)
    return FrameObservations(
        np.array(lids, dtype=np.int64), np.array(dids, dtype=np.int64), np.array(px, dtype=float).reshape(-1, 2)
    )


def read_sparse(path, expected_t=None) -> SparseDepthMap:
    path = Path(path)
    fast = _fast_table(path, 3, 3)
    if fast is not None:
        (t, w, h), tab = fast
        c, r, d = tab[:, 0], tab[:, 1], tab[:, 2]
        ok = (expected_t is None or t == expected_t) and np.all(c == np.round(c)) and np.all(r == np.round(r))
        ok = ok and np.all((c >= 0) & (c < w) & (r >= 0) & (r < h) & (d > 0))
        if ok:
            flat = r.astype(np.int64) * w + c.astype(np.int64)
            if len(np.unique(flat)) == len(flat):
                return SparseDepthMap(w, h, r.astype(np.int64), c.astype(np.int64), d.copy())
    rec = _records(path)
    _, w, h = _header(path, rec, expected_t, 2)
    cols, rows, depth = [], [], []
    seen = set()
    for lineno, f in rec:
        if len(f) != 3:
            raise DatasetError(path, f"expected 3 fields, found {len(f)}", lineno)
        try:
            c, r, d = int(f[0]), int(f[1]), float(f[2])
        except ValueError:
            raise DatasetError(path, "malformed depth record", lineno) from None
        if not (0 <= c < w and 0 <= r < h):
            raise DatasetError(path, f"pixel ({c}, {r}) outside {w}x{h}", lineno)
        if not (d > 0 and math.isfinite(d)):
            raise DatasetError(path, "depth must be positive and finite", lineno)
        if (r, c) in seen:
            raise DatasetError(path, f"duplicate pixel ({c}, {r})", lineno)
        seen.add((r, c))
        cols.append(c)
        rows.append(r)
        depth.append(d)
    return SparseDepthMap(w, h, np.array(rows), np.array(cols), np.array(depth))


# ---------------------------------------------------------------------------
# Whole datasets
# ---------------------------------------------------------------------------

def generate_dataset(out_dir, config: GenerateConfig = None, progress=None):
    """Simulate a sequence and write it to ``out_dir``; returns the manifest."""
    cfg = config or GenerateConfig()
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(out, f"cannot create directory: {exc.strerror}") from exc

    world = generate_world(cfg.seed, cfg.extent, cfg.landmark_count, cfg.scenario)
    stamps, poses = ground_truth_trajectory(world.path, cfg.spacing, cfg.dt)
    length = world.path.length
    if cfg.max_frames is not None and cfg.max_frames < len(poses):
        stamps, poses = stamps[: cfg.max_frames], poses[: cfg.max_frames]
        length = (len(poses) - 1) * cfg.spacing
    cam = PanoramicCamera(cfg.width, cfg.height)
    rng = np.random.default_rng([cfg.seed, 1])

    for t, pose in enumerate(poses):
        obs = simulate_frame(world, pose, cam, cfg.pixel_noise, cfg.mismatch_rate, rng,
                             cfg.max_range, cfg.min_range)
        sparse = simulate_lidar(world.surfaces, pose, cfg.rig, cam, rng)
        ctx = render_context(world.surfaces, pose, cam, cfg.context_factor)
        stem = out / "frames" / frame_stem(t)
        _write_text(stem.with_suffix(".obs"), format_observations(t, obs))
        _write_text(stem.with_suffix(".depth"), format_sparse(t, sparse))
        try:
            write_grid(stem.with_suffix(".ctx"), ctx)
        except OSError as exc:
            raise DatasetError(stem.with_suffix(".ctx"), f"cannot write: {exc.strerror}") from exc
        if progress:
            progress(t, len(poses))

    rig = cfg.rig
    q, tr = rig.lidar_from_camera.rotation, rig.lidar_from_camera.translation
    values = {
        "format": FORMAT_TAG,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "extent": repr(float(cfg.extent)),
        "landmark_count": cfg.landmark_count,
        "frame_count": len(poses),
        "spacing": repr(float(cfg.spacing)),
        "dt": repr(float(cfg.dt)),
        "trajectory_length": f"{length:.6f}",
        "width": cfg.width,
        "height": cfg.height,
        "context_factor": cfg.context_factor,
        "pixel_noise": repr(float(cfg.pixel_noise)),
        "mismatch_rate": repr(float(cfg.mismatch_rate)),
        "max_range": repr(float(cfg.max_range)),
        "min_range": repr(float(cfg.min_range)),
        "overlap_radius": repr(float(cfg.overlap_radius)),
        "rig.lidar_from_camera": " ".join(f"{x:.12f}" for x in np.concatenate([q, tr])),
        "rig.lidar_tilt_deg": f"{math.degrees(rig.lidar_tilt):.9f}",
        "rig.vertical_fov_deg": f"{math.degrees(rig.vertical_fov):.9f}",
        "rig.beam_count": rig.beam_count,
        "rig.azimuth_step_deg": f"{math.degrees(rig.azimuth_step):.9f}",
        "rig.elevation_center_deg": f"{math.degrees(rig.elevation_center):.9f}",
        "rig.max_range": repr(float(rig.max_range)),
        "rig.range_noise": repr(float(rig.range_noise)),
    }
    _write_text(out / "manifest.txt", "# synthetic panoramic camera + LiDAR sequence\n" + format_kv(values))
    write_trajectory(out / "groundtruth.txt", Trajectory(stamps, poses),
                     header=f"ground truth, scenario {cfg.scenario}, seed {cfg.seed}")
    return Manifest({k: str(v) for k, v in values.items()})


class Dataset:
    """Read-only view of a dataset directory; frames are parsed on demand."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(self.root, "dataset directory does not exist")
        self.manifest = Manifest(parse_kv(self.root / "manifest.txt"))
        if self.manifest.values.get("format") != FORMAT_TAG:
            raise DatasetError(self.root / "manifest.txt", f"unsupported format (expected {FORMAT_TAG})")
        try:
            self.camera = self.manifest.camera
            self.frame_count = self.manifest.frame_count
        except (KeyError, ValueError) as exc:
            raise DatasetError(self.root / "manifest.txt", f"missing or bad key: {exc}") from None
        self._gt = None

    def __len__(self):
        return self.frame_count

    @property
    def groundtruth(self) -> Trajectory:
        if self._gt is None:
            self._gt = read_trajectory(self.root / "groundtruth.txt")
            if len(self._gt) != self.frame_count:
                raise DatasetError(self.root / "groundtruth.txt",
                                   f"{len(self._gt)} poses for {self.frame_count} frames")
        return self._gt

    @property
    def timestamps(self):
        return self.groundtruth.timestamps

    def frame(self, t) -> FrameData:
        if not 0 <= t < self.frame_count:
            raise IndexError(t)
        stem = self.root / "frames" / frame_stem(t)
        obs = read_observations(stem.with_suffix(".obs"), t)
        sparse = read_sparse(stem.with_suffix(".depth"), t)
        if (sparse.width, sparse.height) != (self.camera.width, self.camera.height):
            raise DatasetError(stem.with_suffix(".depth"), "image size disagrees with manifest")
        ctx, _ = read_grid(stem.with_suffix(".ctx"))
        return FrameData(t, float(self.timestamps[t]), obs, sparse, ctx)

    def frames(self) -> List[FrameData]:
        return [self.frame(t) for t in range(self.frame_count)]
