"""Synthetic city-block worlds, ground-truth drives and the camera/LiDAR rig.

The world is a grid of axis-aligned building blocks standing on the ground
plane ``z = 0``; streets are the gaps between blocks.  Landmarks sit on the
street-facing surfaces, so every LiDAR return and every landmark has a
closed-form ray/surface intersection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigurationError, InvalidInputError
from .geometry import PanoramicCamera, PixelCoord, PoseSE3

SCENARIOS = ("loop_1km", "straight_500m", "figure_eight")

STREET_HALF_WIDTH = 8.0
CAMERA_HEIGHT = 2.5


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

@dataclass
class Path2D:
    """Planar polyline with circular fillets, parametrised by arc length."""

    segments: list  # ("line", p0, p1) | ("arc", center, radius, a0, sweep)

    @property
    def length(self):
        return float(sum(_segment_length(s) for s in self.segments))

    def sample(self, s):
        """Position (x, y) and heading at arc length ``s``."""
        s = float(np.clip(s, 0.0, self.length))
        for seg in self.segments:
            L = _segment_length(seg)
            if s <= L + 1e-12:
                return _segment_eval(seg, s)
            s -= L
        return _segment_eval(self.segments[-1], _segment_length(self.segments[-1]))

    def dense_points(self, step=1.0):
        n = max(2, int(math.ceil(self.length / step)) + 1)
        return np.array([self.sample(s)[0] for s in np.linspace(0.0, self.length, n)])


def _segment_length(seg):
    if seg[0] == "line":
        return float(np.linalg.norm(seg[2] - seg[1]))
    return abs(seg[4]) * seg[2]


def _segment_eval(seg, s):
    if seg[0] == "line":
        p0, p1 = seg[1], seg[2]
        d = (p1 - p0) / np.linalg.norm(p1 - p0)
        return p0 + s * d, math.atan2(d[1], d[0])
    _, c, r, a0, sweep = seg
    a = a0 + math.copysign(s / r, sweep)
    pos = c + r * np.array([math.cos(a), math.sin(a)])
    heading = a + math.copysign(math.pi / 2.0, sweep)
    return pos, heading


def filleted_path(waypoints, radius):
    """Polyline through ``waypoints`` with each turn replaced by a tangent arc."""
    pts = [np.asarray(p, dtype=float) for p in waypoints]
    segments = []
    cursor = pts[0]
    for i in range(1, len(pts) - 1):
        a, b, c = pts[i - 1], pts[i], pts[i + 1]
        d0 = (b - a) / np.linalg.norm(b - a)
        d1 = (c - b) / np.linalg.norm(c - b)
        cross = d0[0] * d1[1] - d0[1] * d1[0]
        turn = math.atan2(cross, float(d0 @ d1))
        if abs(turn) < 1e-9:
            continue
        tan_len = radius * math.tan(abs(turn) / 2.0)
        start = b - tan_len * d0
        end = b + tan_len * d1
        segments.append(("line", cursor, start))
        normal = np.array([-d0[1], d0[0]]) * math.copysign(1.0, turn)
        center = start + radius * normal
        a0 = math.atan2(start[1] - center[1], start[0] - center[0])
        segments.append(("arc", center, radius, a0, turn))
        cursor = end
    segments.append(("line", cursor, pts[-1]))
    return Path2D([s for s in segments if _segment_length(s) > 1e-12])


# ---------------------------------------------------------------------------
# Worlds
# ---------------------------------------------------------------------------

@dataclass
class Surfaces:
    """Ground plane z=0 plus blocks given as rows (xmin, ymin, xmax, ymax, height)."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 5)

    def cast(self, origins, directions, max_range=np.inf):
        """Range to the first surface hit along unit ``directions``; inf on miss."""
        o = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(directions))
        d = np.asarray(directions, dtype=float)
        t = np.full(d.shape[:-1], np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -o[..., 2] / d[..., 2]
        ground = (d[..., 2] < 0.0) & (o[..., 2] > 0.0) & (tg > 0.0)
        t = np.where(ground, tg, t)
        if len(self.boxes):
            t = np.minimum(t, _ray_boxes(o, d, self.boxes))
        return np.where(t <= max_range, t, np.inf)

    def inside_block(self, xy):
        xy = np.atleast_2d(xy)
        b = self.boxes
        if not len(b):
            return np.zeros(len(xy), dtype=bool)
        inside = (
            (xy[:, None, 0] > b[None, :, 0]) & (xy[:, None, 0] < b[None, :, 2])
            & (xy[:, None, 1] > b[None, :, 1]) & (xy[:, None, 1] < b[None, :, 3])
        )
        return inside.any(axis=1)


def _ray_boxes(o, d, boxes):
    lo = np.stack([boxes[:, 0], boxes[:, 1], np.zeros(len(boxes))], axis=-1)
    hi = np.stack([boxes[:, 2], boxes[:, 3], boxes[:, 4]], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d[..., None, :]
        t0 = (lo - o[..., None, :]) * inv
        t1 = (hi - o[..., None, :]) * inv
    # 0 * inf from rays parallel to a slab and lying on its plane
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 0.0)
    t_entry = np.where(tmin > 0.0, tmin, np.inf)  # origin inside a block: ignore
    return np.where(hit, t_entry, np.inf).min(axis=-1)


@dataclass
class World:
    landmark_ids: np.ndarray
    landmark_positions: np.ndarray
    surfaces: Surfaces
    path: Path2D
    scenario: str
    seed: int
    extent: float

    def __post_init__(self):
        self._tree = cKDTree(self.landmark_positions)

    @property
    def landmarks(self):
        return list(zip(self.landmark_ids.tolist(), self.landmark_positions))


def _scenario_layout(scenario):
    """(waypoints, grid xs, grid ys, fillet radius) for a scenario name."""
    r = 12.0
    if scenario == "loop_1km":
        lx = 300.0
        ly = (1000.0 - 2.0 * math.pi * r + 8.0 * r) / 2.0 - lx
        wp = [(lx / 2, 0.0), (lx, 0.0), (lx, ly), (0.0, ly), (0.0, 0.0), (lx / 2, 0.0)]
        xs = [-100.0, 0.0, lx, lx + 100.0]
        ys = [-100.0, 0.0, ly, ly + 100.0]
    elif scenario == "straight_500m":
        wp = [(0.0, 0.0), (500.0, 0.0)]
        xs = [-60.0 + 110.0 * k for k in range(7)]
        ys = [-100.0, 0.0, 100.0]
    elif scenario == "figure_eight":
        w = h = 150.0
        wp = [(0.0, h / 2), (0.0, h), (-w, h), (-w, 0.0), (w, 0.0), (w, h), (0.0, h), (0.0, h / 2)]
        xs = [-w - 100.0, -w, 0.0, w, w + 100.0]
        ys = [-100.0, 0.0, h, h + 100.0]
    else:
        raise ConfigurationError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    return wp, xs, ys, r


def generate_world(seed, extent=30.0, landmark_count=12000, scenario="loop_1km"):
    """Blocks between the street grid lines and landmarks on street-facing surfaces.

    Landmarks are spread with uniform areal density over the ground and the
    block faces that lie within ``extent`` metres of the driven path.
    """
    if landmark_count <= 0:
        raise InvalidInputError("landmark_count must be positive")
    rng = np.random.default_rng(seed)
    wp, xs, ys, radius = _scenario_layout(scenario)
    path = filleted_path(wp, radius)

    boxes = []
    hw = STREET_HALF_WIDTH
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            height = rng.uniform(12.0, 30.0)
            boxes.append((xs[i] + hw, ys[j] + hw, xs[i + 1] - hw, ys[j + 1] - hw, height))
    surfaces = Surfaces(np.array(boxes))

    path_pts = path.dense_points(1.0)
    tree = cKDTree(path_pts)
    lo = path_pts.min(axis=0) - extent
    hi = path_pts.max(axis=0) + extent

    # candidate patches: ground rectangle + 4 faces per block, sampled by area
    patches = [("ground", None, (hi[0] - lo[0]) * (hi[1] - lo[1]))]
    for b in surfaces.boxes:
        x0, y0, x1, y1, hgt = b
        patches += [
            ("face", (x0, y0, x1, y0, hgt), (x1 - x0) * hgt),
            ("face", (x0, y1, x1, y1, hgt), (x1 - x0) * hgt),
            ("face", (x0, y0, x0, y1, hgt), (y1 - y0) * hgt),
            ("face", (x1, y0, x1, y1, hgt), (y1 - y0) * hgt),
        ]
    areas = np.array([p[2] for p in patches])
    probs = areas / areas.sum()

    out = []
    n_have = 0
    while n_have < landmark_count:
        batch = max(4 * (landmark_count - n_have), 1024)
        which = rng.choice(len(patches), size=batch, p=probs)
        a = rng.random(batch)
        c = rng.random(batch)
        pts = np.empty((batch, 3))
        for k in np.unique(which):
            sel = which == k
            kind, geom, _ = patches[k]
            if kind == "ground":
                pts[sel, 0] = lo[0] + a[sel] * (hi[0] - lo[0])
                pts[sel, 1] = lo[1] + c[sel] * (hi[1] - lo[1])
                pts[sel, 2] = 0.0
            else:
                x0, y0, x1, y1, hgt = geom
                pts[sel, 0] = x0 + a[sel] * (x1 - x0)
                pts[sel, 1] = y0 + a[sel] * (y1 - y0)
                pts[sel, 2] = c[sel] * hgt
        on_ground = pts[:, 2] == 0.0
        keep = ~(on_ground & surfaces.inside_block(pts[:, :2]))
        dist, _ = tree.query(pts[:, :2])
        keep &= dist <= extent
        pts = pts[keep]
        out.append(pts)
        n_have += len(pts)
    positions = np.concatenate(out)[:landmark_count]
    ids = np.arange(landmark_count, dtype=np.int64)
    return World(ids, positions, surfaces, path, scenario, int(seed), float(extent))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def camera_pose(xy, heading, height=CAMERA_HEIGHT):
    """Camera-to-world pose of a forward-looking camera at ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    R = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return PoseSE3.from_matrix(R, np.array([xy[0], xy[1], height]))


def ground_truth_trajectory(path: Path2D, spacing=2.5, dt=0.25, height=CAMERA_HEIGHT):
    """Evenly spaced camera poses along ``path``; returns (timestamps, poses)."""
    n = int(math.floor(path.length / spacing + 1e-9)) + 1
    stamps = np.arange(n) * dt
    poses = []
    for k in range(n):
        xy, heading = path.sample(k * spacing)
        poses.append(camera_pose(xy, heading, height))
    return stamps, poses


# ---------------------------------------------------------------------------
# Camera observations
# ---------------------------------------------------------------------------

@dataclass
class Observation:
    landmark_id: int
    pixel: PixelCoord
    descriptor_id: int


@dataclass
class FrameObservations:
    """Column-oriented batch of :class:`Observation` records for one frame."""

    landmark_ids: np.ndarray
    descriptor_ids: np.ndarray
    pixels: np.ndarray  # (m, 2)

    def __len__(self):
        return len(self.descriptor_ids)

    def __iter__(self):
        for lid, did, px in zip(self.landmark_ids, self.descriptor_ids, self.pixels):
            yield Observation(int(lid), PixelCoord(float(px[0]), float(px[1])), int(did))


def visible_landmarks(world: World, pose_gt: PoseSE3, max_range=40.0, min_range=1.0):
    """Indices of landmarks within range and not hidden behind a block."""
    c = pose_gt.translation
    idx = np.array(sorted(world._tree.query_ball_point(c, max_range)), dtype=np.int64)
    if not len(idx):
        return idx
    rel = world.landmark_positions[idx] - c
    dist = np.linalg.norm(rel, axis=1)
    ok = dist >= min_range
    idx, rel, dist = idx[ok], rel[ok], dist[ok]
    dirs = rel / dist[:, None]
    hit = world.surfaces.cast(c, dirs)
    return idx[hit >= dist - 1e-6 * np.maximum(dist, 1.0) - 1e-6]


def simulate_frame(
    world: World,
    pose_gt: PoseSE3,
    cam: PanoramicCamera,
    noise=0.5,
    mismatch_rate=0.0,
    rng=None,
    max_range=40.0,
    min_range=1.0,
) -> FrameObservations:
    """Noisy pixel observations of the visible landmarks.

    A ``mismatch_rate`` fraction of observations carries the descriptor of a
    different visible landmark, standing in for wrong feature matches.
    """
    if not (0.0 <= mismatch_rate < 1.0):
        raise InvalidInputError("mismatch_rate must lie in [0, 1)")
    rng = np.random.default_rng(rng)
    idx = visible_landmarks(world, pose_gt, max_range, min_range)
    p_cam = pose_gt.inverse().apply(world.landmark_positions[idx]) if len(idx) else np.zeros((0, 3))
    px = cam.project(p_cam) if len(idx) else np.zeros((0, 2))
    if noise > 0 and len(idx):
        px = px + rng.normal(0.0, noise, size=px.shape)
        px[:, 0] = np.mod(px[:, 0], cam.width)
        px[:, 1] = np.clip(px[:, 1], 0.0, np.nextafter(float(cam.height), 0.0))
    lids = world.landmark_ids[idx]
    descriptors = lids.copy()
    if mismatch_rate > 0 and len(idx) > 1:
        wrong = rng.random(len(idx)) < mismatch_rate
        for k in np.flatnonzero(wrong):
            other = rng.integers(len(idx) - 1)
            other += other >= k
            descriptors[k] = lids[other]
    return FrameObservations(lids, descriptors, px)


# ---------------------------------------------------------------------------
# LiDAR
# ---------------------------------------------------------------------------

@dataclass
class RigCalibration:
    """Spinning multi-beam LiDAR mounted near the camera.

    ``lidar_from_camera`` maps camera coordinates into the *untilted* LiDAR
    frame (x forward, y left, z up).  ``lidar_tilt`` pitches the scanner's
    spin axis forward about its y axis, so positive tilt aims the front of
    the scan pattern at the ground.
    """

    lidar_from_camera: PoseSE3 = None
    lidar_tilt: float = math.radians(30.0)
    vertical_fov: float = math.radians(30.0)
    beam_count: int = 32
    azimuth_step: float = math.radians(1.0)
    elevation_center: float = 0.0
    max_range: float = 100.0
    range_noise: float = 0.0

    def __post_init__(self):
        if self.lidar_from_camera is None:
            # LiDAR 0.5 m behind and 0.3 m below the camera
            base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
            offset_cam = np.array([0.0, 0.3, -0.5])
            self.lidar_from_camera = PoseSE3.from_matrix(base, -base @ offset_cam)
        if self.beam_count < 1:
            raise InvalidInputError("beam_count must be >= 1")
        if not self.vertical_fov > 0:
            raise InvalidInputError("vertical_fov must be positive")
        if not self.azimuth_step > 0:
            raise InvalidInputError("azimuth_step must be positive")

    def beam_directions(self):
        """Unit beam directions in the (tilted) LiDAR frame, shape (N, 3)."""
        if self.beam_count == 1:
            elev = np.array([self.elevation_center])
        else:
            elev = self.elevation_center + np.linspace(
                -self.vertical_fov / 2, self.vertical_fov / 2, self.beam_count
            )
        n_az = int(round(2.0 * math.pi / self.azimuth_step))
        az = np.arange(n_az) * (2.0 * math.pi / n_az)
        E, A = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)

    def camera_from_lidar(self):
        """Rotation and origin of the tilted LiDAR expressed in the camera frame."""
        cam_from_base = self.lidar_from_camera.inverse()
        c, s = math.cos(self.lidar_tilt), math.sin(self.lidar_tilt)
        tilt = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return cam_from_base.R @ tilt, cam_from_base.translation


@dataclass
class SparseDepthMap:
    """Projected LiDAR ranges at integer pixels, at most one entry per pixel."""

    width: int
    height: int
    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.depth = np.asarray(self.depth, dtype=float)
        if np.any(self.depth <= 0):
            raise InvalidInputError("sparse depths must be positive")

    @classmethod
    def empty(cls, width, height):
        return cls(width, height, np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.depth)

    @property
    def entries(self):
        return [((int(u), int(v)), float(d)) for u, v, d in zip(self.cols, self.rows, self.depth)]

    @property
    def pixels(self):
        return np.stack([self.cols, self.rows], axis=-1).astype(float)

    def valid_mask(self):
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def dense(self):
        d = np.full((self.height, self.width), np.nan)
        d[self.rows, self.cols] = self.depth
        return d

    def subset(self, index):
        return SparseDepthMap(self.width, self.height, self.rows[index], self.cols[index], self.depth[index])


def simulate_lidar(
    surfaces: Surfaces,
    pose_gt: PoseSE3,
    rig: RigCalibration,
    cam: PanoramicCamera,
    rng=None,
) -> SparseDepthMap:
    """Cast the tilted scan pattern and project the returns into the panorama.

    The stored depth is the camera-ray range through the centre of the
    pixel a return lands in, so noiseless entries lie exactly on a surface.
    Returns hidden from the camera (sensor parallax) are dropped.
    """
    R_cl, o_cl = rig.camera_from_lidar()
    dirs_cam = rig.beam_directions() @ R_cl.T
    R_wc, t_wc = pose_gt.R, pose_gt.translation
    origin_w = R_wc @ o_cl + t_wc
    dirs_w = dirs_cam @ R_wc.T
    rng_l = surfaces.cast(origin_w, dirs_w, rig.max_range)
    hit = np.isfinite(rng_l)
    if not hit.any():
        return SparseDepthMap.empty(cam.width, cam.height)
    p_cam = o_cl + rng_l[hit, None] * dirs_cam[hit]
    dist = np.linalg.norm(p_cam, axis=1)
    good = dist > 1e-3
    p_cam, dist = p_cam[good], dist[good]

    # occlusion from the camera's viewpoint
    vis = surfaces.cast(t_wc, (p_cam / dist[:, None]) @ R_wc.T)
    keep = vis >= dist - 0.05
    p_cam = p_cam[keep]
    if not len(p_cam):
        return SparseDepthMap.empty(cam.width, cam.height)
    px = cam.project(p_cam)
    cols = np.floor(px[:, 0]).astype(np.int64)
    rows = np.floor(px[:, 1]).astype(np.int64)
    flat = np.unique(rows * cam.width + cols)
    rows, cols = flat // cam.width, flat % cam.width

    centers = np.stack([cols, rows], axis=-1).astype(float)
    bearings = cam.bearing(centers)
    depth = surfaces.cast(t_wc, bearings @ R_wc.T, rig.max_range)
    ok = np.isfinite(depth)
    rows, cols, depth = rows[ok], cols[ok], depth[ok]
    if rig.range_noise > 0:
        rng = np.random.default_rng(rng)
        depth = np.maximum(depth + rng.normal(0.0, rig.range_noise, size=depth.shape), 0.05)
    return SparseDepthMap(cam.width, cam.height, rows, cols, depth)


def disk_structure(radius):
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= radius * radius


def overlap_region(sparse: SparseDepthMap, radius=8):
    """Dilate the valid-pixel set by a disk; wraps across the panorama seam."""
    if radius < 0:
        raise InvalidInputError("radius must be >= 0")
    valid = sparse.valid_mask()
    r = int(math.floor(radius))
    if r == 0 or not valid.any():
        return valid
    padded = np.concatenate([valid[:, -r:], valid, valid[:, :r]], axis=1)
    grown = ndimage.binary_dilation(padded, structure=disk_structure(radius))
    return grown[:, r:-r]


def overlap_at(sparse: SparseDepthMap, pixels, radius=8):
    """Membership of the pixel cells containing ``pixels`` in :func:`overlap_region`.

    Same disk rule and seam wrap, evaluated by nearest-neighbour distance
    instead of dilating the whole image.
    """
    if radius < 0:
        raise InvalidInputError("radius must be >= 0")
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if not len(sparse) or not len(px):
        return np.zeros(len(px), dtype=bool)
    cells = np.column_stack([
        np.clip(np.floor(px[:, 0]), 0, sparse.width - 1),
        np.clip(np.floor(px[:, 1]), 0, sparse.height - 1),
    ])
    sites = np.column_stack([sparse.cols, sparse.rows]).astype(float)
    shifted = [sites, sites + [sparse.width, 0.0], sites - [sparse.width, 0.0]]
    dist, _ = cKDTree(np.concatenate(shifted)).query(cells)
    # squared distances between integer cells are integers; compare those exactly
    return np.rint(dist * dist) <= radius * radius


# ---------------------------------------------------------------------------
# Image surrogate
# ---------------------------------------------------------------------------

def render_context(surfaces: Surfaces, pose_gt: PoseSE3, cam: PanoramicCamera, factor=8, max_range=None):
    """Low-resolution range rendering used as the depth predictor's input.

    It plays the role of the RGB panorama: a network infers scene layout
    from the image, the toy predictor reads it from this cue.  Cells that
    see no surface hold NaN.
    """
    a, b = cam.width // factor, cam.height // factor
    uu = (np.arange(a) + 0.5) * factor - 0.5
    vv = (np.arange(b) + 0.5) * factor - 0.5
    U, V = np.meshgrid(uu, vv)
    dirs = cam.bearing(np.stack([U, V], axis=-1)) @ pose_gt.R.T
    r = surfaces.cast(pose_gt.translation, dirs, np.inf if max_range is None else max_range)
    return np.where(np.isfinite(r), r, np.nan)
