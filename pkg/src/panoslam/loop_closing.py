"""Loop detection by shared descriptors, Sim(3) pose-graph optimisation and map correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .evaluation import umeyama
from .geometry import PoseSE3, Sim3, sim3_ad
from .slam.types import NULL, MapState

log = logging.getLogger(__name__)

MIN_SHARED = 30
MIN_SEPARATION = 50
MAX_DISTANCE = 25.0
LOOP_WEIGHT = 100.0
# Metric depth anchors scale at every keyframe, so odometry edges carry far
# more information about relative scale than about rotation or translation.
SCALE_INFORMATION = 1e4
MAX_ITERATIONS = 50


@dataclass
class LoopCandidate:
    query: int  # keyframe list index
    match: int
    shared: int
    relative: Sim3  # maps query-camera coordinates into match-camera coordinates
    inliers: int = 0


@dataclass
class Edge:
    i: int
    j: int
    measurement: Sim3  # expected X_i^-1 X_j
    weight: float = 1.0
    loop: bool = False
    information: Optional[np.ndarray] = None  # diagonal over (omega, upsilon, sigma); None = identity

    def info(self):
        d = np.ones(7) if self.information is None else np.asarray(self.information, dtype=float)
        return self.weight * d


@dataclass
class PoseGraph:
    nodes: List[Sim3]
    edges: List[Edge] = field(default_factory=list)
    fixed: Sequence[int] = (0,)

    def add_edge(self, i, j, measurement, weight=1.0, loop=False, information=None):
        self.edges.append(Edge(i, j, measurement, weight, loop, information))

    def is_connected(self):
        n = len(self.nodes)
        if not n:
            return False
        adj = sp.coo_matrix(
            (np.ones(len(self.edges)), ([e.i for e in self.edges], [e.j for e in self.edges])), shape=(n, n)
        )
        ncomp, _ = csgraph.connected_components(adj, directed=False)
        return ncomp == 1


@dataclass
class PoseGraphResult:
    poses: List[Sim3]
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _keyframe_points(map: MapState, k):
    kf = map.keyframes[k]
    sel = kf.point_ids != NULL
    return dict(zip(kf.descriptor_ids[sel].tolist(), kf.point_ids[sel].tolist()))


def detect_loop(query: int, map: MapState, min_shared=MIN_SHARED, min_separation=MIN_SEPARATION,
                exclude_before=None, max_distance=MAX_DISTANCE) -> Optional[LoopCandidate]:
    """Look for an old keyframe sharing enough descriptors with keyframe ``query``.

    Only keyframes at least ``min_separation`` list positions older are
    considered; the one sharing the most descriptor ids wins.  The relative
    Sim(3) comes from aligning the shared points expressed in each
    keyframe's camera frame, with one round of outlier trimming.  Candidates
    whose aligned camera centres are more than ``max_distance`` apart are
    dropped: far-range points give a relative pose worse than odometry.
    """
    last = query - min_separation
    if last < 0:
        return None
    qdesc = _keyframe_points(map, query)
    if len(qdesc) < min_shared:
        return None
    qset = set(qdesc)
    best, best_n = None, 0
    first = 0 if exclude_before is None else max(exclude_before, 0)
    for k in range(first, last + 1):
        kf = map.keyframes[k]
        n = len(qset.intersection(kf.descriptor_ids[kf.point_ids != NULL].tolist()))
        if n > best_n:
            best, best_n = k, n
    if best is None or best_n < min_shared:
        return None

    mdesc = _keyframe_points(map, best)
    shared = sorted(qset.intersection(mdesc))
    q_pose = map.keyframes[query].pose.inverse()
    m_pose = map.keyframes[best].pose.inverse()
    src = q_pose.apply(map.positions([qdesc[d] for d in shared]))
    dst = m_pose.apply(map.positions([mdesc[d] for d in shared]))
    rel = align_points(src, dst)
    if rel is None:
        return None
    S, inl = rel
    if inl < min_shared // 2:
        return None
    if max_distance is not None and np.linalg.norm(S.translation) > max_distance:
        return None
    return LoopCandidate(query, best, len(shared), S, inl)


def align_points(src, dst, trim=3.0):
    """Similarity alignment dst ~ S(src) with median-based range gating and trimming.

    Returns ``(Sim3, inlier count)`` or ``None`` when the points do not
    span three dimensions.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 4 or np.linalg.matrix_rank(src - src.mean(axis=0), tol=1e-6) < 3 \
            or np.linalg.matrix_rank(dst - dst.mean(axis=0), tol=1e-6) < 3:
        return None
    # a single far point dominates the fit and can collapse the scale, so gate on range first
    rs, rd = np.linalg.norm(src, axis=1), np.linalg.norm(dst, axis=1)
    keep = (rs <= trim * np.median(rs)) & (rd <= trim * np.median(rd))
    if keep.sum() < 4 or np.linalg.matrix_rank(src[keep] - src[keep].mean(axis=0), tol=1e-6) < 3:
        return None
    for _ in range(2):
        R, t, s = umeyama(src[keep], dst[keep], with_scale=True)
        err = np.linalg.norm(s * src @ R.T + t - dst, axis=1)
        med = np.median(err[keep])
        new_keep = err <= max(trim * med, 1e-9)
        if new_keep.sum() < 4 or np.linalg.matrix_rank(src[new_keep] - src[new_keep].mean(axis=0), tol=1e-6) < 3:
            break
        keep = new_keep
    R, t, s = umeyama(src[keep], dst[keep], with_scale=True)
    if not s > 0:
        return None
    return Sim3.from_matrix(R, t, s), int(keep.sum())


# ---------------------------------------------------------------------------
# Pose-graph optimisation
# ---------------------------------------------------------------------------

def _edge_error(X, e: Edge):
    return (e.measurement.inverse() @ X[e.i].inverse() @ X[e.j]).log()


def graph_cost(nodes, edges):
    return float(sum(float(r @ (e.info() * r)) for e in edges for r in [_edge_error(nodes, e)]))


def optimize_pose_graph(graph: PoseGraph, max_iterations=MAX_ITERATIONS, tol=1e-12) -> PoseGraphResult:
    """Levenberg-Marquardt over node poses with right perturbations ``X Exp(xi)``.

    Edge residual ``log(E_ij^-1 X_i^-1 X_j)``; Jacobians use the
    first-order inverse right Jacobian ``I + ad(r)/2``.  Fixed nodes are
    never touched, and a step is kept only when it lowers the cost.
    """
    X = list(graph.nodes)
    n = len(X)
    fixed = set(int(f) for f in graph.fixed)
    free = [k for k in range(n) if k not in fixed]
    col = {k: c for c, k in enumerate(free)}
    m = len(free)
    cost = graph_cost(X, graph.edges)
    initial = cost
    if not m or not graph.edges:
        return PoseGraphResult(X, initial, cost, 0, True)

    lam = 1e-6
    it = 0
    converged = False
    while it < max_iterations:
        rows, cols, vals = [], [], []
        g = np.zeros(7 * m)
        for e in graph.edges:
            A = X[e.i].inverse() @ X[e.j]
            r = (e.measurement.inverse() @ A).log()
            Jr_inv = np.eye(7) + 0.5 * sim3_ad(r)
            Jj = Jr_inv
            Ji = -Jr_inv @ (X[e.j].inverse() @ X[e.i]).adjoint()
            w = e.info()
            blocks = []
            if e.i in col:
                blocks.append((col[e.i], Ji))
            if e.j in col:
                blocks.append((col[e.j], Jj))
            for a, Ja in blocks:
                g[7 * a : 7 * a + 7] -= Ja.T @ (w * r)
                for b, Jb in blocks:
                    H = Ja.T @ (w[:, None] * Jb)
                    rr, cc = np.meshgrid(np.arange(7 * a, 7 * a + 7), np.arange(7 * b, 7 * b + 7), indexing="ij")
                    rows.append(rr.ravel())
                    cols.append(cc.ravel())
                    vals.append(H.ravel())
        H = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(7 * m, 7 * m))
        diag = H.diagonal()
        improved = False
        while it < max_iterations:
            it += 1
            dx = spsolve(H + sp.diags(lam * (diag + 1e-9), format="csc"), g)
            if not np.all(np.isfinite(dx)):
                lam *= 10.0
                continue
            Xn = list(X)
            for k in free:
                c = col[k]
                Xn[k] = X[k] @ Sim3.exp(dx[7 * c : 7 * c + 7])
            new_cost = graph_cost(Xn, graph.edges)
            if new_cost < cost:
                small = cost - new_cost <= tol * max(cost, 1.0) or float(dx @ dx) < tol
                X, cost = Xn, new_cost
                lam = max(lam / 10.0, 1e-12)
                improved = True
                if small:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not improved:
            converged = True
            break
        if converged:
            break
    if not converged:
        log.warning("pose graph did not converge in %d iterations", max_iterations)
    return PoseGraphResult(X, initial, cost, it, converged)


# ---------------------------------------------------------------------------
# Map correction
# ---------------------------------------------------------------------------

def correct_map(map: MapState, old_poses: Dict[int, PoseSE3], new_poses: Dict[int, Sim3]):
    """Transport points by the corrected-over-old Sim(3) of their reference keyframe
    and replace keyframe poses by the corrected ones (scale dropped)."""
    moves = {k: new_poses[k] @ old_poses[k].to_sim3().inverse() for k in new_poses}
    for p in map.points.values():
        S = moves.get(p.ref_keyframe)
        if S is not None:
            p.position = S.apply(p.position)
    for kf in map.keyframes:
        if kf.frame_index in new_poses:
            kf.pose = new_poses[kf.frame_index].to_se3()
    return map


def odometry_information(scale_information=SCALE_INFORMATION):
    return np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, scale_information])


def build_graph(map: MapState, candidate: LoopCandidate, loop_weight=LOOP_WEIGHT, extra_loops=(),
                scale_information=SCALE_INFORMATION):
    """Sequential odometry edges between consecutive keyframes plus loop edges."""
    nodes = [kf.pose.to_sim3() for kf in map.keyframes]
    graph = PoseGraph(nodes, fixed=(0,))
    info = odometry_information(scale_information)
    for k in range(len(nodes) - 1):
        graph.add_edge(k, k + 1, nodes[k].inverse() @ nodes[k + 1], information=info)
    for c in list(extra_loops) + [candidate]:
        graph.add_edge(c.match, c.query, c.relative, loop_weight, loop=True)
    return graph


def close_loop(map: MapState, candidate: LoopCandidate, loop_weight=LOOP_WEIGHT, extra_loops=(),
               scale_information=SCALE_INFORMATION):
    """Optimise the keyframe graph for ``candidate`` and correct the map in place."""
    graph = build_graph(map, candidate, loop_weight, extra_loops, scale_information)
    result = optimize_pose_graph(graph)
    old = {kf.frame_index: kf.pose for kf in map.keyframes}
    new = {kf.frame_index: result.poses[k] for k, kf in enumerate(map.keyframes)}
    correct_map(map, old, new)
    return result, new


def format_loop_event(frame_index, match_frame, candidate: LoopCandidate, result: PoseGraphResult):
    return (
        f"loop query={frame_index} match={match_frame} shared={candidate.shared} "
        f"inliers={candidate.inliers} scale={candidate.relative.scale:.6f} "
        f"cost_before={result.initial_cost:.9e} cost_after={result.final_cost:.9e} "
        f"iterations={result.iterations} converged={int(result.converged)}"
    )
