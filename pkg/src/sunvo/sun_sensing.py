"""Sun measurements: direction losses, Monte-Carlo dropout moments, model
precision and simulated ground-truth corruption (GT-Sun-X datasets)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ephemeris import GeodeticAnchor, azzen_to_vec, sun_direction_enu, vec_to_azzen
from .errors import DegenerateMean, EmptySequence, NonUnitInput
from .se3 import Pose

DEFAULT_TAU_INV = 0.015
_UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SunMeasurement:
    """Camera-frame sun direction with a (zenith, azimuth) covariance in rad^2."""

    frame_id: int
    direction: np.ndarray
    covariance: np.ndarray = field(default_factory=lambda: DEFAULT_TAU_INV * np.eye(2))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        c = np.asarray(self.covariance, dtype=float).reshape(2, 2)
        if abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
            raise NonUnitInput(f"sun direction for frame {self.frame_id} has norm {np.linalg.norm(d)}")
        np.linalg.cholesky(c)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "covariance", c)


@dataclass(frozen=True)
class ModelPrecisionParams:
    """Inputs of ``tau = p l^2 / (2 M lambda)``; ``tau_inv`` overrides the formula."""

    dropout: float = 0.5
    length_scale: float = 1.0
    n_train: int = 20000
    weight_decay: float = 5e-4
    tau_inv: Optional[float] = DEFAULT_TAU_INV

    def __post_init__(self):
        if not (0.0 < self.dropout < 1.0):
            raise ValueError("dropout probability must lie in (0, 1)")
        if min(self.length_scale, self.n_train, self.weight_decay) <= 0:
            raise ValueError("length scale, training size and weight decay must be positive")
        if self.tau_inv is not None and self.tau_inv < 0:
            raise ValueError("tau_inv must be non-negative")

    @classmethod
    def from_formula(cls, dropout, length_scale, n_train, weight_decay) -> "ModelPrecisionParams":
        return cls(dropout, length_scale, n_train, weight_decay, tau_inv=None)


def model_precision(params: ModelPrecisionParams) -> float:
    if params.tau_inv is not None:
        return math.inf if params.tau_inv == 0 else 1.0 / params.tau_inv
    return params.dropout * params.length_scale**2 / (2.0 * params.n_train * params.weight_decay)


def inverse_precision(params: ModelPrecisionParams) -> float:
    if params.tau_inv is not None:
        return float(params.tau_inv)
    return 1.0 / model_precision(params)


def _check_unit(*vs):
    for v in vs:
        n = np.linalg.norm(v, axis=-1)
        if np.any(np.abs(n - 1.0) > _UNIT_TOL):
            raise NonUnitInput(f"expected unit vectors, got norms {np.atleast_1d(n)[:5]}")


def cosine_loss(s_hat, s_gt):
    s_hat, s_gt = np.asarray(s_hat, dtype=float), np.asarray(s_gt, dtype=float)
    _check_unit(s_hat, s_gt)
    return 1.0 - np.sum(s_hat * s_gt, axis=-1)


def euclidean_half_sq_loss(s_hat_normalized, s_gt):
    """Half squared chord length; equals :func:`cosine_loss` for unit inputs."""
    a, b = np.asarray(s_hat_normalized, dtype=float), np.asarray(s_gt, dtype=float)
    _check_unit(a, b)
    diff = a - b
    return 0.5 * np.sum(diff * diff, axis=-1)


def _normalized_samples(samples) -> np.ndarray:
    S = np.asarray(samples, dtype=float)
    if S.ndim != 2 or S.shape[1] != 3 or S.shape[0] < 2:
        raise ValueError(f"need at least two 3-vector samples, got shape {S.shape}")
    return S


def mc_mean(samples) -> np.ndarray:
    """Renormalized arithmetic mean of sampled directions."""
    S = _normalized_samples(samples)
    m = S.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm <= 1e-6:
        raise DegenerateMean(f"sample mean has norm {norm:.3g}")
    return m / norm


def mc_covariance_azzen(samples, precision: ModelPrecisionParams | float = DEFAULT_TAU_INV) -> np.ndarray:
    """``tau^-1 I + E[a a^T] - E[a] E[a]^T`` over the (zenith, azimuth) of each sample.

    ``precision`` is either a :class:`ModelPrecisionParams` or ``tau^-1`` directly.
    Azimuths are unwrapped around the azimuth of the mean direction first so
    that samples straddling +-pi do not produce a spurious 2 pi spread.
    """
    S = _normalized_samples(samples)
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    mean_dir = mc_mean(S)
    tau_inv = inverse_precision(precision) if isinstance(precision, ModelPrecisionParams) else float(precision)

    a = vec_to_azzen(S)
    ref = vec_to_azzen(mean_dir)[1]
    a[:, 1] = ref + (a[:, 1] - ref + math.pi) % (2.0 * math.pi) - math.pi
    # E[a a^T] - E[a] E[a]^T on samples shifted by the first one: avoids
    # cancellation, and identical samples give an exactly zero spread
    d = a - a[0]
    dbar = d.mean(axis=0)
    cov = tau_inv * np.eye(2) + (d.T @ d / a.shape[0] - np.outer(dbar, dbar))
    return 0.5 * (cov + cov.T)


def mc_estimate(samples, precision=DEFAULT_TAU_INV, frame_id: int = 0) -> SunMeasurement:
    """Package MC samples as a measurement: renormalized mean and az/zen covariance."""
    return SunMeasurement(frame_id, mc_mean(samples), mc_covariance_azzen(samples, precision))


def noise_sigma_for_mean_error(target_rad: float) -> float:
    """Per-axis sigma of an isotropic 2-D tangent Gaussian whose mean angular
    error (Rayleigh mean, exact under the exponential map) is ``target_rad``."""
    return target_rad / math.sqrt(math.pi / 2.0)


def tangent_basis(s) -> np.ndarray:
    """Unit tangent directions along increasing zenith and azimuth at ``s``."""
    zen, az = vec_to_azzen(s)
    e_zen = np.array([math.cos(zen) * math.sin(az), math.sin(zen), math.cos(zen) * math.cos(az)])
    e_az = np.array([math.cos(az), 0.0, -math.sin(az)])
    return np.vstack([e_zen, e_az])


def perturb_direction(s, tangent_offset) -> np.ndarray:
    """Move ``s`` along the great circle given by a 2-D tangent offset (rad)."""
    s = np.asarray(s, dtype=float)
    B = tangent_basis(s)
    v = tangent_offset @ B
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return s.copy()
    out = math.cos(angle) * s + math.sin(angle) * (v / angle)
    return out / np.linalg.norm(out)


def ground_truth_sun(gt_poses: Sequence[Pose], anchor: GeodeticAnchor, timestamps=None) -> list:
    """Ephemeris direction rotated into every ground-truth camera frame."""
    out = []
    for k, T in enumerate(gt_poses):
        t = 0.0 if timestamps is None else float(timestamps[k])
        out.append(T.rotation @ sun_direction_enu(anchor.at(t)))
    return out


def simulate_sun_measurements(
    gt_poses: Sequence[Pose],
    anchor: GeodeticAnchor,
    target_mean_error_deg: float,
    every_n: int = 10,
    seed: int = 0,
    timestamps=None,
    tau_inv: float = DEFAULT_TAU_INV,
) -> list:
    """GT-Sun-X measurements at frames ``0, every_n, 2 every_n, ...``.

    Each direction is the ephemeris vector in the ground-truth camera frame,
    moved by an isotropic tangent Gaussian of per-axis sigma chosen so the
    expected angular error is ``target_mean_error_deg``. The covariance is
    the generating covariance expressed in (zenith, azimuth), floored at
    ``tau_inv`` per axis.
    """
    if len(gt_poses) == 0:
        raise EmptySequence("no ground-truth poses to simulate sun measurements from")
    if target_mean_error_deg < 0 or every_n < 1:
        raise ValueError("target error must be >= 0 and every_n >= 1")
    rng = np.random.default_rng(seed)
    sigma = noise_sigma_for_mean_error(math.radians(target_mean_error_deg))
    truth = ground_truth_sun(gt_poses, anchor, timestamps)
    out = []
    for k in range(0, len(gt_poses), every_n):
        s = truth[k]
        if sigma == 0.0:
            out.append(SunMeasurement(k, s, tau_inv * np.eye(2)))
            continue
        offset = rng.normal(0.0, sigma, size=2)
        meas = perturb_direction(s, offset)
        sin_zen = max(math.sqrt(max(1.0 - s[1] * s[1], 0.0)), 1e-6)
        var_zen = max(sigma**2, tau_inv)
        var_az = max(sigma**2 / sin_zen**2, tau_inv)
        out.append(SunMeasurement(k, meas, np.diag([var_zen, var_az])))
    return out


def angular_error(a, b) -> np.ndarray:
    """Angle (rad) between unit direction(s)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    dot = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.arccos(np.clip(dot, -1.0, 1.0))


__all__ = [
    "DEFAULT_TAU_INV",
    "ModelPrecisionParams",
    "SunMeasurement",
    "angular_error",
    "azzen_to_vec",
    "cosine_loss",
    "euclidean_half_sq_loss",
    "ground_truth_sun",
    "inverse_precision",
    "mc_covariance_azzen",
    "mc_estimate",
    "mc_mean",
    "model_precision",
    "noise_sigma_for_mean_error",
    "perturb_direction",
    "simulate_sun_measurements",
    "tangent_basis",
]
