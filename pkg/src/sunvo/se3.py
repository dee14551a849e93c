"""SO(3)/SE(3) geometry.

Twists are ordered rotation first, ``xi = [phi; rho]`` (rad, m). Perturbations
are left-multiplicative: a pose with tangent noise ``eps`` is ``exp(eps) @ T``,
and every 6x6 covariance stored on a :class:`Pose` lives in that left tangent
space.

A pose ``T_k0`` maps points expressed in the base frame into frame ``k``:
``p_k = R p_0 + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AngleNearPi

# below this angle exp/log use second-order Taylor expansions
SMALL_ANGLE = 1e-6
# the Q block of the SE(3) Jacobian loses digits to cancellation much earlier
_Q_SERIES_ANGLE = 1e-2
NEAR_PI = 1e-6
_I3 = np.arange(3)


def skew(v) -> np.ndarray:
    """Hat operator: 3-vector to 3x3 skew-symmetric matrix."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Hat operator over the leading axis of an ``(n, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = math.sqrt(theta2)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        # R = I + K + K^2/2 + O(theta^3)
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + A * K + B * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    w = vee(R - R.T)
    s = 0.5 * float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    return math.atan2(s, c)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector of ``R`` (angle in ``[0, pi]``)."""
    R = np.asarray(R, dtype=float)
    w = vee(R - R.T)
    s = 0.5 * float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return 0.5 * w * (1.0 + theta * theta / 6.0)
    if theta > math.pi - 1e-3:
        # axis from the symmetric part; sin(theta) is too small to divide by
        S = 0.5 * (R + R.T) - c * np.eye(3)
        i = int(np.argmax(np.diag(S)))
        axis = S[:, i] / math.sqrt(max(S[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0.0:
            axis = -axis
        return theta * axis
    return (0.5 * theta / s) * w


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = math.sqrt(theta2)
    K = skew(phi)
    if theta < 1e-4:
        A = 0.5 - theta2 / 24.0
        B = 1.0 / 6.0 - theta2 / 120.0
    else:
        A = (1.0 - math.cos(theta)) / theta2
        B = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + A * K + B * (K @ K)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = math.sqrt(theta2)
    K = skew(phi)
    if theta < 1e-4:
        B = 1.0 / 12.0 + theta2 / 720.0
    else:
        B = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * K + B * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the rows of ``R``; result has det +1."""
    x = R[0] / np.linalg.norm(R[0])
    y = R[1] - (R[1] @ x) * x
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return np.vstack([x, y, z])


def _check_cov(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6):
        raise ValueError(f"pose covariance must be 6x6, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-9, rtol=0.0):
        raise ValueError("pose covariance is not symmetric")
    if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-10:
        raise ValueError("pose covariance is not positive semidefinite")
    return cov


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``T_k0`` with an optional left-tangent covariance."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if self.covariance is not None:
            object.__setattr__(self, "covariance", _check_cov(self.covariance))

    @classmethod
    def _trusted(cls, rotation, translation, covariance=None) -> "Pose":
        """Skip validation for arrays the caller built correctly (solver output)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "rotation", rotation)
        object.__setattr__(obj, "translation", translation)
        object.__setattr__(obj, "covariance", covariance)
        return obj

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, M, covariance=None) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3], covariance)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def matrix3x4(self) -> np.ndarray:
        return self.matrix()[:3]

    def with_covariance(self, covariance) -> "Pose":
        return Pose(self.rotation, self.translation, covariance)

    def center(self) -> np.ndarray:
        """Origin of frame ``k`` expressed in the base frame."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.all(np.isfinite(self.translation))
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log(T: Pose) -> np.ndarray:
    return log_rt(T.rotation, T.translation)


def log_rt(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``log`` on a raw rotation/translation pair.

    Written on Python floats: this sits in the solver's inner loop, where
    per-call numpy overhead on 3-vectors dominates.
    """
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = np.asarray(R, dtype=float).tolist()
    w0, w1, w2 = r21 - r12, r02 - r20, r10 - r01
    s = 0.5 * math.sqrt(w0 * w0 + w1 * w1 + w2 * w2)
    c = 0.5 * (r00 + r11 + r22 - 1.0)
    theta = math.atan2(s, c)
    if theta >= math.pi - NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta:.9f} rad is at the log branch cut")
    if theta > math.pi - 1e-3:
        p0, p1, p2 = so3_log(R).tolist()
    else:
        f = 0.5 * (1.0 + theta * theta / 6.0) if theta < SMALL_ANGLE else 0.5 * theta / s
        p0, p1, p2 = f * w0, f * w1, f * w2
    th2 = theta * theta
    if theta < 1e-4:
        B = 1.0 / 12.0 + th2 / 720.0
    else:
        B = 1.0 / th2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    # J_l^-1 t = t - (phi x t) / 2 + B phi x (phi x t)
    t0, t1, t2 = np.asarray(t, dtype=float).tolist()
    a0, a1, a2 = p1 * t2 - p2 * t1, p2 * t0 - p0 * t2, p0 * t1 - p1 * t0
    b0, b1, b2 = p1 * a2 - p2 * a1, p2 * a0 - p0 * a2, p0 * a1 - p1 * a0
    return np.array([p0, p1, p2, t0 - 0.5 * a0 + B * b0, t1 - 0.5 * a1 + B * b1, t2 - 0.5 * a2 + B * b2])


def compose(A: Pose, B: Pose) -> Pose:
    """``A @ B``: apply ``B`` first, then ``A``. Covariances are dropped."""
    return Pose(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def inverse(T: Pose) -> Pose:
    Rt = T.rotation.T
    return Pose(Rt, -Rt @ T.translation)


def transform_point(T: Pose, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ T.rotation.T + T.translation


def adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint for ``[phi; rho]`` ordering: ``T exp(xi) T^-1 = exp(Ad xi)``."""
    R = T.rotation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(T.translation) @ R
    return Ad


def transform_covariance(T: Pose, Sigma) -> np.ndarray:
    Ad = adjoint(T)
    out = Ad @ np.asarray(Sigma, dtype=float) @ Ad.T
    return 0.5 * (out + out.T)


def _q_parts(phi, rho):
    """``Q(phi, rho)`` of the SE(3) left Jacobian, plus ``[phi]x`` and its square.

    Skew-symmetry halves the products: ``(P Rh)^T = Rh P``,
    ``(P P Rh)^T = -Rh P P`` and ``(P Rh P P)^T = P P Rh P``.
    """
    p0, p1, p2 = np.asarray(phi, dtype=float).tolist()
    r0, r1, r2 = np.asarray(rho, dtype=float).tolist()
    M = np.array([[[0.0, -p2, p1], [p2, 0.0, -p0], [-p1, p0, 0.0]], [[0.0, -r2, r1], [r2, 0.0, -r0], [-r1, r0, 0.0]]])
    P, Rh = M[0], M[1]
    theta2 = p0 * p0 + p1 * p1 + p2 * p2
    theta = math.sqrt(theta2)
    PP, PR = P @ M
    PRP, PPR = np.stack([PR, P]) @ np.stack([P, PR])
    PPRP = P @ PRP
    if theta < _Q_SERIES_ANGLE:
        c1 = 1.0 / 6.0 - theta2 / 120.0
        c2 = 1.0 / 24.0 - theta2 / 720.0
        c3 = 1.0 / 120.0 - theta2 / 2520.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / (theta2 * theta)
        c2 = (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * theta2 * theta)
    Q = 0.5 * Rh + c1 * (PR + PR.T + PRP) + c2 * (PPR - PPR.T - 3.0 * PRP) + c3 * (PPRP + PPRP.T)
    return Q, P, PP, theta


def _q_block(phi, rho) -> np.ndarray:
    return _q_parts(phi, rho)[0]


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _q_block(phi, rho)
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    Q, P, PP, theta = _q_parts(xi[:3], xi[3:])
    theta2 = theta * theta
    if theta < 1e-4:
        B = 1.0 / 12.0 + theta2 / 720.0
    else:
        B = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    Ji = B * PP - 0.5 * P
    Ji[_I3, _I3] += 1.0
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -(Ji @ Q @ Ji)
    return out


def random_pose(rng: np.random.Generator, max_angle: float = math.pi - 0.1, trans_scale: float = 10.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(angle * axis), rng.uniform(-trans_scale, trans_scale, size=3))
