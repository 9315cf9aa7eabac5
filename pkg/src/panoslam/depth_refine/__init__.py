"""Dense depth for the overlap region: interpolation-only or predictor + two-stage refinement."""

from .interpolation import DelaunayInterpolator, correct, interpolate, interpolate_sparse
from .maps import CorrectionMap, DenseDepthMap, load_depth_map, read_grid, save_depth_map, write_grid
from .predictor import AuxiliaryParams, DepthPredictor, ToyPredictor
from .pso import MonotonicityError, PsoConfig, PsoResult, pso_minimize
from .refine import RefineResult, refine, split_sparse

DENSIFY_METHODS = ("interpolation_only", "pano_dars")


def predict(predictor, image_context, params=None):
    """Baseline prediction with channel-wise scale/bias applied between body and head."""
    return predictor.predict(image_context, params)


__all__ = [
    "AuxiliaryParams", "CorrectionMap", "DENSIFY_METHODS", "DenseDepthMap", "DepthPredictor",
    "DelaunayInterpolator", "MonotonicityError", "interpolate", "PsoConfig", "PsoResult", "RefineResult",
    "ToyPredictor", "correct", "interpolate_sparse", "load_depth_map", "predict", "pso_minimize",
    "read_grid", "refine", "save_depth_map", "split_sparse", "write_grid",
]
