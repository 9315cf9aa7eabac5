"""Two-stage refinement: residual correction, then a swarm search over auxiliary parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import CorrectionUnavailableError
from ..sensor_sim import SparseDepthMap
from .interpolation import DelaunayInterpolator, correct, interpolate
from .maps import DenseDepthMap
from .predictor import AuxiliaryParams, DepthPredictor
from .pso import PsoConfig, pso_minimize

log = logging.getLogger(__name__)

MIN_SPARSE_FOR_REFINE = 8


@dataclass
class RefineResult:
    depth: DenseDepthMap
    params: AuxiliaryParams
    history: List[float] = field(default_factory=list)
    correction_index: Optional[np.ndarray] = None
    validation_index: Optional[np.ndarray] = None
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    skipped: bool = False


def split_sparse(n, seed):
    """Seed-fixed 50/50 split of ``n`` sparse entries -> (correction, validation) indices."""
    perm = np.random.default_rng(seed).permutation(n)
    half = (n + 1) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def relative_error(estimate, reference):
    return np.mean(np.abs(estimate - reference) / reference, axis=-1)


def refine(
    predictor: DepthPredictor,
    context,
    sparse: SparseDepthMap,
    pso: PsoConfig = None,
    overlap=None,
    initial: AuxiliaryParams = None,
) -> RefineResult:
    """Fit auxiliary parameters so the corrected prediction matches held-out LiDAR.

    Valid sparse pixels are split into a correction half (fed to the
    residual interpolation) and a validation half (scored).  Each particle is
    an offset from ``initial`` (default S=1, B=0); its cost is the mean
    absolute relative error of the corrected map on the validation half.

    The returned map is defined on ``overlap`` (every pixel when omitted).
    """
    pso = pso or PsoConfig()
    c = predictor.channels
    x0 = (initial or AuxiliaryParams.identity(c)).vector
    features = predictor.body(context)

    def predict_needed(params):
        if overlap is None:
            return predictor.predict(context, params, features=features)
        return predictor.predict_masked(features, params, overlap | sparse.valid_mask())

    if len(sparse) < MIN_SPARSE_FOR_REFINE:
        base = predict_needed(AuxiliaryParams.from_vector(x0))
        try:
            dense, _ = correct(base, sparse, None, overlap)
        except CorrectionUnavailableError:
            dense = base
            if overlap is not None:
                dense = DenseDepthMap(np.where(overlap, base.depth, np.nan))
        return RefineResult(dense, AuxiliaryParams.from_vector(x0), skipped=True)

    corr_idx, val_idx = split_sparse(len(sparse), pso.seed)
    cr, cc, cd = sparse.rows[corr_idx], sparse.cols[corr_idx], sparse.depth[corr_idx]
    vr, vc, vd = sparse.rows[val_idx], sparse.cols[val_idx], sparse.depth[val_idx]
    try:
        interpolator = DelaunayInterpolator(np.column_stack([cc, cr]).astype(float))
    except CorrectionUnavailableError:
        base = predict_needed(AuxiliaryParams.from_vector(x0))
        dense, _ = correct(base, sparse, None, overlap)
        return RefineResult(dense, AuxiliaryParams.from_vector(x0), skipped=True)

    W_val = interpolator.weights(np.column_stack([vc, vr]).astype(float))
    nc = len(cr)
    sample = predictor.sampler(features, np.concatenate([cr, vr]), np.concatenate([cc, vc]))

    def cost(dx):
        pred = sample(x0 + dx)
        residual = cd - pred[:, :nc]
        corrected = pred[:, nc:] + interpolate(W_val, residual)
        return relative_error(corrected, vd)

    result = pso_minimize(cost, 2 * c, pso, seed_zero=True)
    params = AuxiliaryParams.from_vector(x0 + result.best_position)
    pred = predict_needed(params)
    dense, _ = correct(pred, sparse, corr_idx, overlap, interpolator)
    return RefineResult(
        dense, params, result.history, corr_idx, val_idx,
        initial_cost=float(cost(np.zeros((1, 2 * c)))[0]),
        final_cost=result.best_cost,
    )
