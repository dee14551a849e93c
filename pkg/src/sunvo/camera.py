"""Rectified stereo pinhole model: projection to (u, v, d), triangulation and
Jacobians.

Camera frames are x-right, y-down, z-forward. ``v`` is the left-image row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DisparityTooSmall, PointBehindCamera
from .se3 import Pose, skew_batch

DEFAULT_Z_MIN = 0.1
DEFAULT_D_MIN = 0.5
DEFAULT_NOISE = np.diag([1.0, 1.0, 2.0])


@dataclass(frozen=True)
class StereoIntrinsics:
    fu: float
    fv: float
    cu: float
    cv: float
    baseline: float

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0 and self.baseline > 0):
            raise ValueError("focal lengths and baseline must be positive")

    def to_dict(self) -> dict:
        return {"fu": self.fu, "fv": self.fv, "cu": self.cu, "cv": self.cv, "baseline": self.baseline}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoIntrinsics":
        return cls(float(d["fu"]), float(d["fv"]), float(d["cu"]), float(d["cv"]), float(d["baseline"]))


@dataclass(frozen=True, eq=False)
class StereoObservation:
    frame_id: int
    track_id: int
    u: float
    v: float
    d: float
    noise: np.ndarray = field(default_factory=lambda: DEFAULT_NOISE.copy())

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("disparity must be positive")
        np.linalg.cholesky(self.noise)

    @property
    def y(self) -> np.ndarray:
        return np.array([self.u, self.v, self.d])


@dataclass(frozen=True, eq=False)
class Landmark:
    id: int
    position: np.ndarray


def project(K: StereoIntrinsics, p_cam, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    """Project camera-frame point(s) of shape ``(3,)`` or ``(n, 3)`` to ``(u, v, d)``."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= z_min):
        raise PointBehindCamera(f"point depth {np.min(z):.4g} m is not beyond z_min={z_min} m")
    inv_z = 1.0 / z
    out = np.empty(p.shape)
    out[..., 0] = K.fu * p[..., 0] * inv_z + K.cu
    out[..., 1] = K.fv * p[..., 1] * inv_z + K.cv
    out[..., 2] = K.fu * K.baseline * inv_z
    return out


def project_unchecked(K: StereoIntrinsics, p: np.ndarray) -> np.ndarray:
    """Vectorized projection without the depth guard; callers mask bad depths."""
    inv_z = 1.0 / p[..., 2]
    out = np.empty(p.shape)
    out[..., 0] = K.fu * p[..., 0] * inv_z + K.cu
    out[..., 1] = K.fv * p[..., 1] * inv_z + K.cv
    out[..., 2] = K.fu * K.baseline * inv_z
    return out


def triangulate(K: StereoIntrinsics, y, d_min: float = DEFAULT_D_MIN) -> np.ndarray:
    """Invert :func:`project` for observation(s) ``(u, v, d)``."""
    y = np.asarray(y, dtype=float)
    d = y[..., 2]
    if np.any(d <= d_min):
        raise DisparityTooSmall(f"disparity {np.min(d):.4g} px is not above d_min={d_min} px")
    z = K.fu * K.baseline / d
    out = np.empty(y.shape)
    out[..., 0] = (y[..., 0] - K.cu) * z / K.fu
    out[..., 1] = (y[..., 1] - K.cv) * z / K.fv
    out[..., 2] = z
    return out


def point_jacobian(K: StereoIntrinsics, p: np.ndarray) -> np.ndarray:
    """d(u, v, d)/d p_cam for points ``(n, 3)`` -> ``(n, 3, 3)``."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    iz = 1.0 / z
    iz2 = iz * iz
    J = np.zeros(p.shape[:-1] + (3, 3))
    J[..., 0, 0] = K.fu * iz
    J[..., 0, 2] = -K.fu * x * iz2
    J[..., 1, 1] = K.fv * iz
    J[..., 1, 2] = -K.fv * y * iz2
    J[..., 2, 2] = -K.fu * K.baseline * iz2
    return J


def transformed_point_jacobians(p_cam: np.ndarray, R: np.ndarray):
    """Jacobians of ``p_cam = R p_0 + t`` w.r.t. a left pose perturbation
    (``(n, 3, 6)``) and the landmark (``(3, 3)``, shared)."""
    n = p_cam.shape[:-1]
    Jpose = np.zeros(n + (3, 6))
    Jpose[..., :, :3] = -skew_batch(p_cam)
    Jpose[..., :, 3:] = np.eye(3)
    return Jpose, R


def projection_jacobians(K: StereoIntrinsics, T_k0: Pose, p_0, z_min: float = DEFAULT_Z_MIN):
    """Jacobians of ``g(T_k0 p_0)``: 3x6 w.r.t. the pose (left perturbation,
    ``[phi; rho]``) and 3x3 w.r.t. the base-frame landmark."""
    p_0 = np.asarray(getattr(p_0, "position", p_0), dtype=float)
    p_cam = T_k0.rotation @ p_0 + T_k0.translation
    if p_cam[2] <= z_min:
        raise PointBehindCamera(f"point depth {p_cam[2]:.4g} m is not beyond z_min={z_min} m")
    G = point_jacobian(K, p_cam)
    Jp, Jl = transformed_point_jacobians(p_cam, T_k0.rotation)
    return G @ Jp, G @ Jl
