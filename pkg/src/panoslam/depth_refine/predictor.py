"""Depth predictors split into a frozen body and head, plus channel-wise auxiliary parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from .maps import DenseDepthMap


@dataclass
class AuxiliaryParams:
    """Channel-wise scales and biases applied between body and head."""

    scales: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1)
        self.biases = np.asarray(self.biases, dtype=float).reshape(-1)
        if self.scales.shape != self.biases.shape:
            raise ConfigurationError("scales and biases must have the same length")

    @classmethod
    def identity(cls, channels):
        return cls(np.ones(channels), np.zeros(channels))

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size % 2:
            raise ConfigurationError("auxiliary vector must have even length")
        c = x.size // 2
        return cls(x[:c], x[c:])

    @property
    def channels(self):
        return self.scales.size

    @property
    def vector(self):
        return np.concatenate([self.scales, self.biases])


class DepthPredictor:
    """Interface: ``body(context) -> (b, a, c)`` features, ``head(features) -> (h, w)`` depth.

    Subclasses may override :meth:`sampler` with a vectorised version; the
    refinement loop only ever needs predictions at a few pixels.
    """

    channels: int

    def body(self, context):
        raise NotImplementedError

    def head(self, features):
        raise NotImplementedError

    def modulate(self, features, params: AuxiliaryParams):
        if params.channels != self.channels:
            raise ConfigurationError(
                f"auxiliary params have {2 * params.channels} entries, predictor needs {2 * self.channels}"
            )
        return features * params.scales + params.biases

    def predict(self, context, params: AuxiliaryParams = None, features=None) -> DenseDepthMap:
        feats = self.body(context) if features is None else features
        if params is not None:
            feats = self.modulate(feats, params)
        return DenseDepthMap(self.head(feats))

    def predict_masked(self, features, params: AuxiliaryParams, mask) -> DenseDepthMap:
        """Prediction evaluated only where ``mask`` is set (NaN elsewhere)."""
        rows, cols = np.nonzero(mask)
        out = np.full(mask.shape, np.nan)
        out[rows, cols] = self.sampler(features, rows, cols)(params.vector)[0]
        return DenseDepthMap(out)

    def sampler(self, features, rows, cols):
        """Callable mapping a (P, 2c) batch of auxiliary vectors to (P, N) depths at pixels."""

        def run(param_vectors):
            out = []
            for x in np.atleast_2d(param_vectors):
                d = self.head(self.modulate(features, AuxiliaryParams.from_vector(x)))
                out.append(d[rows, cols])
            return np.array(out)

        return run


class ToyPredictor(DepthPredictor):
    """Deterministic stand-in for a pre-trained monocular depth network.

    Channel 0 carries the log-range cue read from the image surrogate; the
    remaining channels are fixed smooth spatial patterns.  The linear head
    passes channel 0 through and adds a seed-drawn mix of the patterns, so
    the baseline output is the true layout blurred to the feature grid and
    distorted by a smooth multiplicative error field.  ``bias`` multiplies
    every depth (1.1 = a predictor reading 10% long).
    """

    def __init__(self, width=1024, height=512, channels=16, factor=8, seed=0,
                 distortion=0.06, bias=1.0, sky_range=150.0):
        if channels < 1:
            raise ConfigurationError("channels must be >= 1")
        self.width, self.height = width, height
        self.channels = channels
        self.factor = factor
        self.a, self.b = width // factor, height // factor
        self.sky_range = sky_range
        rng = np.random.default_rng(seed)
        gx = (np.arange(self.a) + 0.5) / self.a
        gy = (np.arange(self.b) + 0.5) / self.b
        X, Y = np.meshgrid(gx, gy)
        basis = []
        for _ in range(channels - 1):
            fu = rng.integers(1, 4)
            fv = rng.integers(0, 3)
            pu, pv = rng.uniform(0, 2 * np.pi, size=2)
            # integer longitude frequency keeps the pattern continuous across the seam
            basis.append(np.cos(2 * np.pi * fu * X + pu) * np.cos(np.pi * fv * Y + pv))
        self._basis = np.stack(basis, axis=-1) if basis else np.zeros((self.b, self.a, 0))
        self.weights = np.concatenate([[1.0], rng.normal(0.0, distortion, size=channels - 1)])
        self.offset = float(np.log(bias))
        self._up = None

    def body(self, context):
        ctx = np.asarray(context, dtype=float)
        if ctx.shape != (self.b, self.a):
            raise ConfigurationError(f"context must be {self.b}x{self.a}, got {ctx.shape}")
        cue = np.log(np.where(np.isfinite(ctx), ctx, self.sky_range))
        return np.concatenate([cue[..., None], self._basis], axis=-1)

    def _grid_log_depth(self, features):
        return features @ self.weights + self.offset

    def _bilinear(self, rows, cols):
        """Bilinear weights from the feature grid to integer pixels."""
        gx = (cols + 0.5) / self.factor - 0.5
        gy = (rows + 0.5) / self.factor - 0.5
        gx = np.clip(gx, 0.0, self.a - 1.0)
        gy = np.clip(gy, 0.0, self.b - 1.0)
        x0 = np.minimum(np.floor(gx).astype(np.int64), self.a - 2) if self.a > 1 else np.zeros_like(gx, dtype=np.int64)
        y0 = np.minimum(np.floor(gy).astype(np.int64), self.b - 2) if self.b > 1 else np.zeros_like(gy, dtype=np.int64)
        fx, fy = gx - x0, gy - y0
        x1 = np.minimum(x0 + 1, self.a - 1)
        y1 = np.minimum(y0 + 1, self.b - 1)
        idx = np.stack([y0 * self.a + x0, y0 * self.a + x1, y1 * self.a + x0, y1 * self.a + x1], axis=-1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
        return idx, w

    def head(self, features):
        g = self._grid_log_depth(features).reshape(-1)
        if self._up is None:
            rows, cols = np.mgrid[0 : self.height, 0 : self.width]
            self._up = self._bilinear(rows, cols)
        idx, w = self._up
        return np.exp(np.sum(g[idx] * w, axis=-1))

    def sampler(self, features, rows, cols):
        c = self.channels
        idx, w = self._bilinear(np.asarray(rows), np.asarray(cols))
        # bilinear weights sum to one, so upsampling commutes with the linear head
        pixel_feats = np.einsum("nkc,nk->nc", features.reshape(-1, c)[idx], w)

        def run(param_vectors):
            X = np.atleast_2d(np.asarray(param_vectors, dtype=float))
            if X.shape[1] != 2 * c:
                raise ConfigurationError(f"auxiliary params have {X.shape[1]} entries, predictor needs {2 * c}")
            S, B = X[:, :c], X[:, c:]
            logd = (S * self.weights) @ pixel_feats.T + (B @ self.weights)[:, None] + self.offset
            return np.exp(logd)

        return run
