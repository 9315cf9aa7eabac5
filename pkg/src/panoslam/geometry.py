"""Rigid/similarity transforms, the equirectangular camera and two-view triangulation.

Conventions used everywhere in the package:

* Camera axes are x-right, y-down, z-forward.
* A pose ``T_wc`` maps camera coordinates into the world: ``p_w = R p_c + t``.
* Quaternions are stored ``(qx, qy, qz, qw)`` with ``qw >= 0``.
* Depth is *range along the viewing ray*, never planar z-depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError

PARALLAX_MIN_DEG = 1.0


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------

def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega):
    """Rodrigues' formula; exact to machine precision near zero."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-16:
        return np.eye(3) + K + 0.5 * K @ K
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def rotation_angle(R):
    """Angle of a rotation matrix in radians, robust near 0 and pi."""
    return float(np.linalg.norm(Rotation.from_matrix(R).as_rotvec()))


def _canonical_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("quaternion must be finite and non-zero")
    q = q / n
    if q[3] < 0.0:
        q = -q
    return q


def quat_to_matrix(q):
    return Rotation.from_quat(q).as_matrix()


def matrix_to_quat(R):
    return _canonical_quat(Rotation.from_matrix(R).as_quat())


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform stored as unit quaternion + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _canonical_quat(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t=None):
        R = np.asarray(R, dtype=float)
        if R.shape == (4, 4):
            R, t = R[:3, :3], R[:3, 3]
        return cls(matrix_to_quat(R), np.zeros(3) if t is None else t)

    @cached_property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def t(self):
        return self.translation

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3.from_matrix(self.R @ other.R, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        Rt = self.R.T
        return PoseSE3.from_matrix(Rt, -Rt @ self.translation)

    def apply(self, points):
        """Transform points of shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.translation

    def retract(self, xi):
        """Right perturbation ``T * Exp(xi)`` with ``xi = (omega, delta)``."""
        xi = np.asarray(xi, dtype=float)
        return PoseSE3.from_matrix(self.R @ so3_exp(xi[:3]), self.translation + self.R @ xi[3:])

    def to_sim3(self) -> "Sim3":
        return Sim3(self.rotation, self.translation, 1.0)

    def isclose(self, other: "PoseSE3", atol=1e-9):
        return bool(
            np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self):
        return f"PoseSE3(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


# ---------------------------------------------------------------------------
# Sim(3)
# ---------------------------------------------------------------------------

def _sim3_w_coeffs(theta, sigma):
    """Coefficients of W = A*Omega + B*Omega^2 + C*I (translation part of Exp)."""
    eps = 1e-6
    s = math.exp(sigma)
    if abs(sigma) < eps:
        C = 1.0 + sigma / 2.0
        if theta < eps:
            A = 0.5 + sigma / 3.0
            B = 1.0 / 6.0 + sigma / 8.0
        else:
            t2 = theta * theta
            A = (1.0 - math.cos(theta)) / t2
            B = (theta - math.sin(theta)) / (t2 * theta)
    else:
        C = (s - 1.0) / sigma
        if theta < eps:
            s2 = sigma * sigma
            A = ((sigma - 1.0) * s + 1.0) / s2
            B = ((0.5 * s2 - sigma + 1.0) * s - 1.0) / (s2 * sigma)
        else:
            a = s * math.sin(theta)
            b = s * math.cos(theta)
            c = theta * theta + sigma * sigma
            A = (a * sigma + (1.0 - b) * theta) / (theta * c)
            B = (C - ((b - 1.0) * sigma + a * theta) / c) / (theta * theta)
    return A, B, C


def sim3_w_matrix(omega, sigma):
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    A, B, C = _sim3_w_coeffs(theta, float(sigma))
    K = skew(omega)
    return A * K + B * K @ K + C * np.eye(3)


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform ``p -> s R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise InvalidInputError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", _canonical_quat(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t, s=1.0):
        return cls(matrix_to_quat(R), t, s)

    @classmethod
    def from_se3(cls, pose: PoseSE3):
        return cls(pose.rotation, pose.translation, 1.0)

    @cached_property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def t(self):
        return self.translation

    @property
    def s(self):
        return self.scale

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Sim3") -> "Sim3":
        return Sim3.from_matrix(
            self.R @ other.R,
            self.scale * (self.R @ other.translation) + self.translation,
            self.scale * other.scale,
        )

    __matmul__ = compose

    def inverse(self) -> "Sim3":
        Rt = self.R.T
        inv_s = 1.0 / self.scale
        return Sim3.from_matrix(Rt, -inv_s * (Rt @ self.translation), inv_s)

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.R.T) + self.translation

    def to_se3(self) -> PoseSE3:
        """Drop the scale; the rotation and translation are kept as-is."""
        return PoseSE3(self.rotation, self.translation)

    def log(self):
        """Tangent vector ``(omega, upsilon, sigma)``."""
        omega = so3_log(self.R)
        sigma = math.log(self.scale)
        W = sim3_w_matrix(omega, sigma)
        upsilon = np.linalg.solve(W, self.translation)
        return np.concatenate([omega, upsilon, [sigma]])

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        omega, upsilon, sigma = xi[:3], xi[3:6], float(xi[6])
        W = sim3_w_matrix(omega, sigma)
        return cls.from_matrix(so3_exp(omega), W @ upsilon, math.exp(sigma))

    def adjoint(self):
        """7x7 adjoint for tangent ordering ``(omega, upsilon, sigma)``."""
        R, t, s = self.R, self.translation, self.scale
        Ad = np.zeros((7, 7))
        Ad[0:3, 0:3] = R
        Ad[3:6, 0:3] = skew(t) @ R
        Ad[3:6, 3:6] = s * R
        Ad[3:6, 6] = -t
        Ad[6, 6] = 1.0
        return Ad

    def isclose(self, other: "Sim3", atol=1e-9):
        return bool(
            np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
            and abs(self.scale - other.scale) <= atol
        )

    def __repr__(self):
        return (
            f"Sim3(q={np.round(self.rotation, 6).tolist()}, "
            f"t={np.round(self.translation, 6).tolist()}, s={self.scale:.6f})"
        )


def sim3_ad(xi):
    """Lie-algebra adjoint ``ad(xi)`` (7x7), same tangent ordering as :meth:`Sim3.log`."""
    omega, upsilon, sigma = xi[:3], xi[3:6], xi[6]
    ad = np.zeros((7, 7))
    W = skew(omega)
    ad[0:3, 0:3] = W
    ad[3:6, 0:3] = skew(upsilon)
    ad[3:6, 3:6] = W + sigma * np.eye(3)
    ad[3:6, 6] = -upsilon
    return ad


# ---------------------------------------------------------------------------
# Equirectangular camera
# ---------------------------------------------------------------------------

class PixelCoord(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class PanoramicCamera:
    """Full-sphere equirectangular camera (``width == 2 * height``)."""

    width: int = 1024
    height: int = 512

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("camera dimensions must be positive")
        if self.width != 2 * self.height:
            raise InvalidInputError(
                f"equirectangular camera needs width == 2*height, got {self.width}x{self.height}"
            )

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, points):
        """Camera-frame points (..., 3) -> pixels (..., 2) as (u, v)."""
        p = np.asarray(points, dtype=float)
        norm = np.linalg.norm(p, axis=-1)
        if np.any(norm <= 0.0) or not np.all(np.isfinite(norm)):
            raise InvalidInputError("cannot project a zero-norm or non-finite point")
        lon = np.arctan2(p[..., 0], p[..., 2])
        lat = np.arcsin(np.clip(p[..., 1] / norm, -1.0, 1.0))
        u = (lon / (2.0 * np.pi) + 0.5) * self.width
        v = (lat / np.pi + 0.5) * self.height
        u = np.where(u >= self.width, u - self.width, u)
        v = np.minimum(v, np.nextafter(float(self.height), 0.0))
        return np.stack([u, v], axis=-1)

    def bearing(self, pixels):
        """Unit viewing rays (..., 3) for pixels (..., 2)."""
        px = np.asarray(pixels, dtype=float)
        lon = (px[..., 0] / self.width - 0.5) * 2.0 * np.pi
        lat = (px[..., 1] / self.height - 0.5) * np.pi
        c = np.cos(lat)
        return np.stack([c * np.sin(lon), np.sin(lat), c * np.cos(lon)], axis=-1)

    def unproject(self, pixels, depth):
        depth = np.asarray(depth, dtype=float)
        if np.any(~(depth > 0.0)):
            raise InvalidInputError("unproject needs depth > 0")
        return self.bearing(pixels) * depth[..., None]

    def pixel_centers(self):
        """(h, w, 2) array of integer-pixel coordinates used for dense maps."""
        vv, uu = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([uu, vv], axis=-1).astype(float)


def project(cam: PanoramicCamera, p_cam):
    return cam.project(p_cam)


def unproject(cam: PanoramicCamera, px, depth):
    return cam.unproject(px, depth)


# ---------------------------------------------------------------------------
# Two-view triangulation
# ---------------------------------------------------------------------------

def triangulate(
    pose_a: PoseSE3,
    bearing_a,
    pose_b: PoseSE3,
    bearing_b,
    parallax_min_deg: float = PARALLAX_MIN_DEG,
) -> Optional[np.ndarray]:
    """Midpoint of the common perpendicular of two world-frame rays.

    Returns ``None`` when the rays are too close to parallel or the point
    would lie behind either camera.
    """
    out = triangulate_many(
        pose_a.R, pose_a.translation, np.asarray(bearing_a, dtype=float)[None],
        pose_b.R, pose_b.translation, np.asarray(bearing_b, dtype=float)[None],
        parallax_min_deg,
    )
    p = out[0]
    return None if np.isnan(p[0]) else p


def triangulate_many(Ra, ta, ba, Rb, tb, bb, parallax_min_deg=PARALLAX_MIN_DEG):
    """Vectorised :func:`triangulate`; failed rows come back as NaN.

    ``Ra``/``Rb`` may be (3, 3) or (N, 3, 3); ``ta``/``tb`` (3,) or (N, 3).
    """
    ba = np.asarray(ba, dtype=float)
    bb = np.asarray(bb, dtype=float)
    da = np.einsum("...ij,...j->...i", Ra, ba)
    db = np.einsum("...ij,...j->...i", Rb, bb)
    ca = np.broadcast_to(ta, da.shape)
    cb = np.broadcast_to(tb, db.shape)
    w0 = ca - cb
    b = np.sum(da * db, axis=-1)
    d = np.sum(da * w0, axis=-1)
    e = np.sum(db * w0, axis=-1)
    denom = 1.0 - b * b
    cos_min = math.cos(math.radians(parallax_min_deg))
    ok = b < cos_min
    safe = np.where(ok, denom, 1.0)
    lam_a = (b * e - d) / safe
    lam_b = (e - b * d) / safe
    ok &= (lam_a > 0.0) & (lam_b > 0.0)
    pa = ca + lam_a[:, None] * da
    pb = cb + lam_b[:, None] * db
    out = 0.5 * (pa + pb)
    out[~ok] = np.nan
    return out
