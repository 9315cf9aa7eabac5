"""Local bundle adjustment over a window of recent keyframes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import PoseSE3, so3_exp
from .tracking import (
    HUBER_DEG,
    REJECT_DEG,
    huber_cost,
    huber_weights,
    pose_jacobian,
    tangent_basis,
)
from .types import NULL, MapState

WINDOW = 6
FIXED = 2
# a point may move at most this fraction of its distance to the nearest window camera per step;
# near-parallel rays leave depth almost unconstrained and undamped steps run off along the ray
POINT_STEP = 0.5


@dataclass
class BundleResult:
    initial_cost: float
    final_cost: float
    iterations: int
    n_poses: int
    n_points: int
    n_obs: int


class _Problem:
    """Observation arrays for the window, with pose and point index columns."""

    def __init__(self, map: MapState, kf_ids, fixed, frozen, reject):
        self.kfs = [map.keyframes[k] for k in kf_ids]
        nfix = min(fixed, len(kf_ids) - 1) if len(kf_ids) > 1 else 1
        cam_of, pid_of, brg = [], [], []
        for c, kf in enumerate(self.kfs):
            sel = np.flatnonzero(kf.point_ids != NULL)
            cam_of.append(np.full(len(sel), c))
            pid_of.append(kf.point_ids[sel])
            brg.append(kf.bearings[sel])
        cam_of = np.concatenate(cam_of)
        pid_of = np.concatenate(pid_of)
        brg = np.concatenate(brg)

        self.R = np.array([kf.pose.R for kf in self.kfs])
        self.t = np.array([kf.pose.translation for kf in self.kfs])
        pts = map.positions(pid_of)
        # drop gross outliers up front (mismatches, stale points)
        q = np.einsum("nji,nj->ni", self.R[cam_of], pts - self.t[cam_of])
        ang = np.arctan2(np.linalg.norm(np.cross(brg, q), axis=1), np.sum(brg * q, axis=1))
        keep = ang <= reject
        cam_of, pid_of, brg = cam_of[keep], pid_of[keep], brg[keep]

        uniq, inv, counts = np.unique(pid_of, return_inverse=True, return_counts=True)
        frozen = np.isin(uniq, np.fromiter(frozen, dtype=np.int64, count=len(frozen)))
        variable = (counts >= 2) & ~frozen
        self.point_ids = uniq
        self.points = map.positions(uniq)
        self.var_index = np.full(len(uniq), -1)
        self.var_index[variable] = np.arange(int(variable.sum()))
        self.n_var_points = int(variable.sum())

        self.free_index = np.full(len(self.kfs), -1)
        self.free_index[nfix:] = np.arange(len(self.kfs) - nfix)
        self.n_free = len(self.kfs) - nfix

        self.cam = cam_of
        self.pt = inv
        self.basis = tangent_basis(brg)

    def cost(self, R, t, points, delta):
        q = np.einsum("nji,nj->ni", R[self.cam], points[self.pt] - t[self.cam])
        b = q / np.linalg.norm(q, axis=1, keepdims=True)
        r = np.einsum("nij,nj->ni", self.basis, b)
        return huber_cost(r, delta)


def _accumulate(index, values, n):
    """Sum ``values`` rows into ``n`` bins by ``index`` (a fast ``np.add.at``)."""
    shape = values.shape[1:]
    k = int(np.prod(shape))
    flat = (index[:, None] * k + np.arange(k)).ravel()
    return np.bincount(flat, values.reshape(-1), minlength=n * k).reshape((n,) + shape)


def _residuals_and_jacobians(prob: _Problem, R, t, points):
    cam = prob.cam
    q = np.einsum("nji,nj->ni", R[cam], points[prob.pt] - t[cam])
    n = np.linalg.norm(q, axis=1)
    b = q / n[:, None]
    r = np.einsum("nij,nj->ni", prob.basis, b)
    P = (np.eye(3) - b[:, :, None] * b[:, None, :]) / n[:, None, None]
    dr_dq = np.matmul(prob.basis, P)
    Jc = pose_jacobian(dr_dq, q)
    Jp = np.matmul(dr_dq, R[cam].transpose(0, 2, 1))  # dq/dp = R^T
    return r, Jc, Jp


def local_bundle_adjust(map: MapState, window=WINDOW, fixed=FIXED, frozen=(), keyframes=None,
                        iterations=10, huber_deg=HUBER_DEG, reject_deg=REJECT_DEG) -> BundleResult:
    """Levenberg-Marquardt on robust bearing errors over the last ``window`` keyframes.

    The oldest ``fixed`` keyframes of the window are held constant (gauge),
    as are ``frozen`` points and points seen only once in the window.  A
    step is accepted only if the robust cost drops, so the cost never
    increases.  Updated poses and points are written back into ``map``.
    """
    kf_ids = list(range(len(map.keyframes)))[-window:] if keyframes is None else list(keyframes)
    if len(kf_ids) < 2:
        return BundleResult(0.0, 0.0, 0, 0, 0, 0)
    delta = math.radians(huber_deg)
    prob = _Problem(map, kf_ids, fixed, set(frozen), math.radians(reject_deg))
    R, t, pts = prob.R.copy(), prob.t.copy(), prob.points.copy()
    cost = prob.cost(R, t, pts, delta)
    initial = cost
    nf, npv = prob.n_free, prob.n_var_points
    if (nf == 0 and npv == 0) or not len(prob.cam):
        return BundleResult(initial, cost, 0, nf, npv, len(prob.cam))

    fi = prob.free_index[prob.cam]
    vi = prob.var_index[prob.pt]
    has_c = fi >= 0
    has_p = vi >= 0
    both = has_c & has_p
    lam = 1e-4
    it = 0
    while it < iterations:
        r, Jc, Jp = _residuals_and_jacobians(prob, R, t, pts)
        w = huber_weights(r, delta)
        WJc = w[:, None, None] * Jc
        WJp = w[:, None, None] * Jp
        Wr = w[:, None] * r

        JcT = Jc.transpose(0, 2, 1)
        JpT = Jp.transpose(0, 2, 1)
        Hcc = _accumulate(fi[has_c], np.matmul(JcT[has_c], WJc[has_c]), nf)
        gc = _accumulate(fi[has_c], -np.matmul(JcT[has_c], Wr[has_c, :, None])[:, :, 0], nf)
        Hpp = _accumulate(vi[has_p], np.matmul(JpT[has_p], WJp[has_p]), npv)
        gp = _accumulate(vi[has_p], -np.matmul(JpT[has_p], Wr[has_p, :, None])[:, :, 0], npv)
        Hcp = np.zeros((nf, npv, 6, 3))
        Hcp[fi[both], vi[both]] = np.matmul(WJc[both].transpose(0, 2, 1), Jp[both])
        Hcc_full = np.zeros((6 * nf, 6 * nf))
        for c in range(nf):
            Hcc_full[6 * c : 6 * c + 6, 6 * c : 6 * c + 6] = Hcc[c]
        gc_full = gc.reshape(-1)

        improved = False
        while it < iterations:
            it += 1
            Hpp_d = Hpp + lam * (np.einsum("nii->ni", Hpp)[:, :, None] * np.eye(3) + 1e-9 * np.eye(3))
            Hpp_inv = np.linalg.inv(Hpp_d)
            B = Hcp.transpose(0, 2, 1, 3).reshape(6 * nf, 3 * npv)
            Bm = np.matmul(Hcp, Hpp_inv[None]).transpose(0, 2, 1, 3).reshape(6 * nf, 3 * npv)
            S = Hcc_full + lam * np.diag(np.diag(Hcc_full) + 1e-9) - Bm @ B.T
            rhs = gc_full - Bm @ gp.reshape(-1)
            try:
                dxc = np.linalg.solve(S, rhs) if nf else np.zeros(0)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            dxp = np.einsum("nij,nj->ni", Hpp_inv, gp - (B.T @ dxc).reshape(npv, 3)) if npv else np.zeros((0, 3))

            R_new, t_new = R.copy(), t.copy()
            for c in range(nf):
                k = np.flatnonzero(prob.free_index == c)[0]
                d = dxc[6 * c : 6 * c + 6]
                R_new[k] = R[k] @ so3_exp(d[:3])
                t_new[k] = t[k] + R[k] @ d[3:]
            pts_new = pts.copy()
            var = prob.var_index >= 0
            if npv:
                dist = np.min(np.linalg.norm(pts[var][:, None, :] - t[None], axis=2), axis=1)
                step = np.linalg.norm(dxp, axis=1)
                dxp = dxp * np.minimum(1.0, POINT_STEP * dist / np.maximum(step, 1e-300))[:, None]
            pts_new[var] = pts[var] + dxp
            new_cost = prob.cost(R_new, t_new, pts_new, delta)
            if new_cost < cost:
                R, t, pts, cost = R_new, t_new, pts_new, new_cost
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break

    if cost >= initial:
        return BundleResult(initial, initial, it, nf, npv, len(prob.cam))
    for c, kf in enumerate(prob.kfs):
        if prob.free_index[c] >= 0:
            kf.pose = PoseSE3.from_matrix(R[c], t[c])
    for j in np.flatnonzero(prob.var_index >= 0).tolist():
        map.points[int(prob.point_ids[j])].position = pts[j]
    return BundleResult(initial, cost, it, nf, npv, len(prob.cam))
