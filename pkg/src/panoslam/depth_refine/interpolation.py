"""Piecewise-linear scattered-data interpolation over a Delaunay triangulation."""

from __future__ import annotations

import numpy as np
from scipy import sparse as sp
from scipy.spatial import Delaunay, QhullError, cKDTree

from ..errors import CorrectionUnavailableError
from ..sensor_sim import SparseDepthMap
from .maps import CorrectionMap, DenseDepthMap


class DelaunayInterpolator:
    """Triangulation of fixed sites; hands out reusable query weight matrices.

    Queries inside the convex hull get barycentric weights on their
    triangle.  Queries outside take the nearest site's value, and queries
    that coincide with a site copy that site's value exactly.
    """

    MAX_WALK = 500

    def __init__(self, sites):
        sites = np.asarray(sites, dtype=float)
        if len(sites) < 3:
            raise CorrectionUnavailableError(f"need >= 3 correction pixels, got {len(sites)}")
        try:
            self.tri = Delaunay(sites)
        except QhullError as exc:
            raise CorrectionUnavailableError("correction pixels are collinear") from exc
        self.sites = sites
        self._tree = None
        self._vertex_simplex = None
        keys = sites[:, 0] + 1j * sites[:, 1]
        self._order = np.argsort(keys)
        self._sorted_keys = keys[self._order]

    def _coincident(self, queries):
        keys = queries[:, 0] + 1j * queries[:, 1]
        pos = np.clip(np.searchsorted(self._sorted_keys, keys), 0, len(self._sorted_keys) - 1)
        hit = self._sorted_keys[pos] == keys
        return hit, self._order[pos]

    def _barycentric(self, simplex, queries):
        v = self.sites[self.tri.simplices[simplex]]  # (n, 3, 2)
        a, b, c = v[:, 0], v[:, 1], v[:, 2]
        e1, e2, d = b - a, c - a, queries - a
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        l1 = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
        l2 = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def locate(self, queries, eps=1e-12):
        """Containing triangle and barycentric weights per query (-1 outside the hull).

        Visibility walk started from a triangle at the nearest site, which
        avoids building barycentric transforms for every triangle.
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 2)
        m = len(queries)
        if self._tree is None:
            self._tree = cKDTree(self.sites)
        _, nearest = self._tree.query(queries)
        if self._vertex_simplex is None:
            vs = np.full(len(self.sites), -1)
            flat = self.tri.simplices.reshape(-1)
            vs[flat] = np.repeat(np.arange(len(self.tri.simplices)), 3)
            self._vertex_simplex = vs
        cur = self._vertex_simplex[nearest]
        bary = np.zeros((m, 3))
        result = np.full(m, -1)
        active = np.flatnonzero(cur >= 0)
        # sites dropped by qhull (coplanar) have no triangle to start from
        stuck = [np.flatnonzero(cur < 0)]
        for _ in range(self.MAX_WALK):
            if not len(active):
                break
            lam = self._barycentric(cur[active], queries[active])
            worst = np.argmin(lam, axis=1)
            ok = lam[np.arange(len(active)), worst] >= -eps
            hit = active[ok]
            result[hit] = cur[hit]
            bary[hit] = lam[ok]
            moving = active[~ok]
            nxt = self.tri.neighbors[cur[moving], worst[~ok]]
            cur[moving] = nxt
            active = moving[nxt >= 0]
        stuck.append(active)
        active = np.concatenate(stuck)
        if len(active):  # defer to qhull's locator
            s = self.tri.find_simplex(queries[active])
            result[active] = s
            good = s >= 0
            if good.any():
                bary[active[good]] = self._barycentric(s[good], queries[active[good]])
        return result, bary

    def weights(self, queries):
        """Sparse (n_queries, n_sites) matrix W with interpolated = W @ site_values."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 2)
        m = len(queries)
        verts = np.zeros((m, 3), dtype=np.int64)
        w = np.zeros((m, 3))

        simplex, bary = self.locate(queries)
        inside = simplex >= 0
        if inside.any():
            w[inside] = bary[inside]
            verts[inside] = self.tri.simplices[simplex[inside]]

        outside = ~inside
        if outside.any():
            if self._tree is None:
                self._tree = cKDTree(self.sites)
            _, nearest = self._tree.query(queries[outside])
            verts[outside] = nearest[:, None]
            w[outside] = (1.0, 0.0, 0.0)
        hit, site = self._coincident(queries)
        verts[hit] = site[hit, None]
        w[hit] = (1.0, 0.0, 0.0)

        rows = np.repeat(np.arange(m), 3)
        W = sp.csr_matrix((w.reshape(-1), (rows, verts.reshape(-1))), shape=(m, len(self.sites)))
        W.sum_duplicates()
        return W


def interpolate(W, values):
    """Apply a weight matrix to site values of shape (N,) or (P, N)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return W @ values
    return (W @ values.T).T


def correct(pred: DenseDepthMap, sparse: SparseDepthMap, correction_set=None, overlap=None,
            interpolator: DelaunayInterpolator = None):
    """First refinement stage: shift the prediction onto the LiDAR samples.

    Residuals ``sparse - pred`` at the correction pixels are interpolated to
    every pixel of ``overlap`` (default: the whole image), giving the
    correction map; the corrected depth is ``pred + correction`` there and
    undefined elsewhere.  Returns ``(corrected, correction)``.
    """
    idx = np.arange(len(sparse)) if correction_set is None else np.asarray(correction_set)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    rows, cols, depth = sparse.rows[idx], sparse.cols[idx], sparse.depth[idx]
    residual = depth - pred.depth[rows, cols]
    if interpolator is None:
        interpolator = DelaunayInterpolator(np.column_stack([cols, rows]).astype(float))

    if overlap is None:
        overlap = np.ones(pred.depth.shape, dtype=bool)
    qr, qc = np.nonzero(overlap)
    W = interpolator.weights(np.column_stack([qc, qr]).astype(float))

    delta = np.full(pred.depth.shape, np.nan)
    delta[qr, qc] = W @ residual
    corrected = np.full(pred.depth.shape, np.nan)
    corrected[qr, qc] = pred.depth[qr, qc] + delta[qr, qc]
    return DenseDepthMap(corrected), CorrectionMap(delta)


def interpolate_sparse(sparse: SparseDepthMap, overlap=None) -> DenseDepthMap:
    """Interpolation-only densification of the raw LiDAR depth."""
    zero = DenseDepthMap(np.zeros((sparse.height, sparse.width)))
    dense, _ = correct(zero, sparse, None, overlap)
    return dense
