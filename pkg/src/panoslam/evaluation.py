"""Trajectory metrics: ATE after alignment, and RTE/RRE over fixed-length sub-trajectories.

Trajectory files use one pose per line::

    timestamp tx ty tz qx qy qz qw

separated by whitespace; blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DatasetError, EvaluationError
from .geometry import PoseSE3, Sim3

DEFAULT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
MAX_TIME_DIFF = 0.05
ALIGN_MODES = ("rigid", "similarity", "none")


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: List[PoseSE3]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise EvaluationError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise EvaluationError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, T):
        """Apply a global transform (PoseSE3 or Sim3) on the left of every pose."""
        if isinstance(T, Sim3):
            poses = [PoseSE3.from_matrix(T.R @ p.R, T.apply(p.translation)) for p in self.poses]
        else:
            poses = [T @ p for p in self.poses]
        return Trajectory(self.timestamps.copy(), poses)

    def subset(self, index):
        index = np.asarray(index)
        return Trajectory(self.timestamps[index], [self.poses[i] for i in index])


@dataclass
class MetricsReport:
    ate: float
    rte: float
    rre: float
    per_length: Dict[float, Tuple[float, float]] = field(default_factory=dict)
    alignment: str = "rigid"
    scale: float = 1.0
    pairs: int = 0


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def format_pose_line(stamp, pose: PoseSE3):
    t, q = pose.translation, pose.rotation
    return (f"{stamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}")


def write_trajectory(path, traj: Trajectory, header=None):
    lines = []
    if header:
        lines += [f"# {h}" for h in header.splitlines()]
    lines.append("# timestamp tx ty tz qx qy qz qw")
    lines += [format_pose_line(s, p) for s, p in zip(traj.timestamps, traj.poses)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DatasetError(path, "no such trajectory file") from None
    except OSError as exc:
        raise DatasetError(path, f"cannot read trajectory: {exc.strerror}") from exc
    stamps, poses = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(path, f"expected 8 fields, found {len(parts)}", lineno)
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise DatasetError(path, "non-numeric field", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(path, "non-finite value", lineno)
        if stamps and vals[0] <= stamps[-1]:
            raise DatasetError(path, "timestamps must be strictly increasing", lineno)
        try:
            poses.append(PoseSE3(np.array(vals[4:8]), np.array(vals[1:4])))
        except ValueError as exc:
            raise DatasetError(path, str(exc), lineno) from None
        stamps.append(vals[0])
    if not poses:
        raise DatasetError(path, "trajectory file holds no poses")
    return Trajectory(np.array(stamps), poses)


# ---------------------------------------------------------------------------
# Association and alignment
# ---------------------------------------------------------------------------

def associate(est: Trajectory, gt: Trajectory, max_diff=MAX_TIME_DIFF):
    """Index pairs (i_est, i_gt) matched by nearest timestamp, each gt used once."""
    ts = gt.timestamps
    j = np.clip(np.searchsorted(ts, est.timestamps), 1, max(len(ts) - 1, 1))
    j = np.where(
        (len(ts) > 1) & (np.abs(ts[j - 1] - est.timestamps) <= np.abs(ts[np.minimum(j, len(ts) - 1)] - est.timestamps)),
        j - 1, np.minimum(j, len(ts) - 1),
    )
    ok = np.abs(ts[j] - est.timestamps) <= max_diff
    i_est = np.flatnonzero(ok)
    i_gt = j[ok]
    _, first = np.unique(i_gt, return_index=True)
    first = np.sort(first)
    return i_est[first], i_gt[first]


def umeyama(src, dst, with_scale=False):
    """Least-squares (R, t, s) with dst ~ s R src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    n = len(src)
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = np.sum(xs * xs) / n
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


def _paired(est, gt, max_diff=MAX_TIME_DIFF):
    i_est, i_gt = associate(est, gt, max_diff)
    if len(i_est) < 3:
        raise EvaluationError(f"only {len(i_est)} timestamp pairs within {max_diff}s; need >= 3")
    return est.subset(i_est), gt.subset(i_gt)


def align(est: Trajectory, gt: Trajectory, mode="rigid"):
    """Transform taking ``est`` positions onto ``gt`` (PoseSE3 for rigid, Sim3 for similarity)."""
    if mode not in ("rigid", "similarity", "sim3"):
        raise EvaluationError(f"unknown alignment mode {mode!r}")
    e, g = _paired(est, gt)
    src, dst = e.positions, g.positions
    # collinear input is fine: the roll about the line is arbitrary but the residual is not
    if np.linalg.matrix_rank(src - src.mean(axis=0), tol=1e-9) < 1:
        raise EvaluationError("estimated positions all coincide; cannot align")
    R, t, s = umeyama(src, dst, with_scale=mode != "rigid")
    if mode == "rigid":
        return PoseSE3.from_matrix(R, t)
    return Sim3.from_matrix(R, t, s)


def ate(est: Trajectory, gt: Trajectory, alignment="rigid"):
    """RMSE of position residuals in metres."""
    e, g = _paired(est, gt)
    if alignment == "none":
        aligned = e.positions
    else:
        T = align(e, g, alignment)
        aligned = T.apply(e.positions)
    return float(np.sqrt(np.mean(np.sum((aligned - g.positions) ** 2, axis=1))))


def path_distances(positions):
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rte_rre(est: Trajectory, gt: Trajectory, lengths: Sequence[float] = DEFAULT_LENGTHS):
    """Mean relative translation error (%) and rotation error (deg/m).

    For every start pose and every length L, the end pose is the first gt
    pose at least L metres further along the gt path.  Lengths for which no
    sub-trajectory fits are skipped.  Returns (rte, rre, per_length).
    """
    e, g = _paired(est, gt)
    dist = path_distances(g.positions)
    if dist[-1] < min(lengths):
        raise EvaluationError(
            f"ground-truth path is {dist[-1]:.1f} m, shorter than every evaluation length"
        )
    gR = np.array([p.R for p in g.poses])
    gt_ = g.positions
    eR = np.array([p.R for p in e.poses])
    et_ = e.positions
    per_length = {}
    for L in lengths:
        # small slack so a path of exactly L metres still yields a sub-trajectory
        ends = np.searchsorted(dist, dist + L - 1e-9 * max(L, 1.0), side="left")
        starts = np.flatnonzero(ends < len(dist))
        if not len(starts):
            continue
        ends = ends[starts]
        # relative motions expressed in the start frame
        rel_g_R = np.einsum("nji,njk->nik", gR[starts], gR[ends])
        rel_g_t = np.einsum("nji,nj->ni", gR[starts], gt_[ends] - gt_[starts])
        rel_e_R = np.einsum("nji,njk->nik", eR[starts], eR[ends])
        rel_e_t = np.einsum("nji,nj->ni", eR[starts], et_[ends] - et_[starts])
        err_R = np.einsum("nji,njk->nik", rel_g_R, rel_e_R)
        err_t = np.einsum("nji,nj->ni", rel_g_R, rel_e_t - rel_g_t)
        cos = np.clip((np.trace(err_R, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
        ang = np.degrees(np.arccos(cos))
        per_length[float(L)] = (
            float(np.mean(np.linalg.norm(err_t, axis=1)) / L * 100.0),
            float(np.mean(ang) / L),
        )
    if not per_length:
        raise EvaluationError("no sub-trajectory fits any evaluation length")
    rte = float(np.mean([v[0] for v in per_length.values()]))
    rre = float(np.mean([v[1] for v in per_length.values()]))
    return rte, rre, per_length


def evaluate(est: Trajectory, gt: Trajectory, alignment="rigid", lengths=DEFAULT_LENGTHS) -> MetricsReport:
    e, g = _paired(est, gt)
    scale = 1.0
    if alignment in ("similarity", "sim3"):
        scale = align(e, g, "similarity").scale
    usable = [L for L in lengths if L <= path_distances(g.positions)[-1]]
    if usable:
        rte, rre, per = rte_rre(e, g, usable)
    else:
        # path too short for any segment length
        rte, rre, per = float("nan"), float("nan"), {}
    return MetricsReport(ate(e, g, alignment), rte, rre, per, alignment, scale, len(e))


def format_report(report: MetricsReport):
    """Aligned plain-text table."""
    lines = [
        f"ATE ({report.alignment}) [m]   {report.ate:12.4f}",
        f"RTE [%]              {report.rte:12.4f}",
        f"RRE [deg/m]          {report.rre:12.6f}",
        f"pose pairs           {report.pairs:12d}",
    ]
    if report.alignment in ("similarity", "sim3"):
        lines.append(f"sim3 scale           {report.scale:12.6f}")
    lines += ["", f"{'length [m]':>10} {'RTE [%]':>10} {'RRE [deg/m]':>12}"]
    for L, (rte, rre) in sorted(report.per_length.items()):
        lines.append(f"{L:10.0f} {rte:10.4f} {rre:12.6f}")
    return "\n".join(lines) + "\n"


def report_to_kv(report: MetricsReport):
    """Machine-readable ``key = value`` lines."""
    lines = [
        f"alignment = {report.alignment}",
        f"ate_m = {report.ate:.9f}",
        f"rte_percent = {report.rte:.9f}",
        f"rre_deg_per_m = {report.rre:.9f}",
        f"pairs = {report.pairs}",
        f"scale = {report.scale:.9f}",
    ]
    for L, (rte, rre) in sorted(report.per_length.items()):
        lines.append(f"rte_percent.{L:g} = {rte:.9f}")
        lines.append(f"rre_deg_per_m.{L:g} = {rre:.9f}")
    return "\n".join(lines) + "\n"
