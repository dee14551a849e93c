"""Trajectory and sun-direction error metrics.

ARMSE here is the root of the mean squared per-frame error norm (the RMS of
error norms); translation in metres, rotation as the axis-angle norm in
radians. CRMSE is the same quantity over frames ``0..t``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .ephemeris import vec_to_azzen
from .errors import DataFileError, LengthMismatch
from .se3 import Pose, so3_log
from .sun_sensing import SunMeasurement

ANEES_COSINE_GATE = 0.3


def _wrap_deg(a):
    w = np.mod(np.asarray(a, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


def _check_lengths(a, b, what):
    if len(a) != len(b):
        raise LengthMismatch(f"{what}: {len(a)} estimates vs {len(b)} references")
    if len(a) == 0:
        raise LengthMismatch(f"{what}: empty sequences")


def _rms(x) -> float:
    return math.sqrt(float(np.mean(np.asarray(x, dtype=float) ** 2)))


def _running_rms(norms) -> np.ndarray:
    sq = np.cumsum(np.asarray(norms, dtype=float) ** 2)
    return np.sqrt(sq / np.arange(1, len(sq) + 1))


@dataclass
class TrajectoryErrorReport:
    translation_errors: np.ndarray  # (n, 3) estimated minus true camera centre, ENU (m)
    rotation_errors: np.ndarray  # (n, 3) log(R_gt^T R_est) (rad)
    trans_armse: float
    trans_armse_en: float
    rot_armse: float
    crmse_trans: np.ndarray
    crmse_rot: np.ndarray
    frame_ids: Optional[List[int]] = None

    def summary(self) -> Dict[str, float]:
        return {"trans_armse": self.trans_armse, "trans_armse_en": self.trans_armse_en, "rot_armse": self.rot_armse}

    def to_dict(self) -> dict:
        return {"n_frames": len(self.translation_errors), **self.summary()}

    def long_rows(self):
        ids = self.frame_ids if self.frame_ids is not None else range(len(self.translation_errors))
        tn = np.linalg.norm(self.translation_errors, axis=1)
        rn = np.linalg.norm(self.rotation_errors, axis=1)
        for i, k in enumerate(ids):
            e = self.translation_errors[i]
            yield ("trans_err_e", k, e[0])
            yield ("trans_err_n", k, e[1])
            yield ("trans_err_u", k, e[2])
            yield ("trans_err_norm", k, tn[i])
            yield ("rot_err_norm", k, rn[i])
            yield ("crmse_trans", k, self.crmse_trans[i])
            yield ("crmse_rot", k, self.crmse_rot[i])


def _per_frame(est: Sequence[Pose], gt: Sequence[Pose]):
    _check_lengths(est, gt, "trajectory")
    te = np.array([e.center() - g.center() for e, g in zip(est, gt)])
    re = np.array([so3_log(g.rotation.T @ e.rotation) for e, g in zip(est, gt)])
    return te, re


def trajectory_errors(est: Sequence[Pose], gt: Sequence[Pose], frame_ids=None) -> TrajectoryErrorReport:
    te, re = _per_frame(est, gt)
    tn = np.linalg.norm(te, axis=1)
    rn = np.linalg.norm(re, axis=1)
    return TrajectoryErrorReport(
        translation_errors=te,
        rotation_errors=re,
        trans_armse=_rms(tn),
        trans_armse_en=_rms(np.linalg.norm(te[:, :2], axis=1)),
        rot_armse=_rms(rn),
        crmse_trans=_running_rms(tn),
        crmse_rot=_running_rms(rn),
        frame_ids=None if frame_ids is None else [int(k) for k in frame_ids],
    )


def crmse_series(est: Sequence[Pose], gt: Sequence[Pose]) -> Dict[str, np.ndarray]:
    """Running RMS of the translational (m) and rotational (rad) error norms."""
    te, re = _per_frame(est, gt)
    return {"trans": _running_rms(np.linalg.norm(te, axis=1)), "rot": _running_rms(np.linalg.norm(re, axis=1))}


def _stats(x) -> Dict[str, float]:
    x = np.asarray(x, dtype=float)
    if not len(x):
        return {"mean": math.nan, "median": math.nan, "stdev": math.nan}
    return {"mean": float(np.mean(x)), "median": float(np.median(x)), "stdev": float(np.std(x))}


@dataclass
class SunErrorReport:
    frame_ids: List[int]
    zenith_error: np.ndarray  # signed, deg
    azimuth_error: np.ndarray  # signed, wrapped to (-180, 180], deg
    vector_error: np.ndarray  # deg, in [0, 180]
    nees: np.ndarray  # e^T R_s^-1 e / 2 per measurement
    anees: float
    anees_count: int
    summary: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n": len(self.frame_ids), "anees": self.anees, "anees_count": self.anees_count, "summary": self.summary}

    def long_rows(self):
        for i, k in enumerate(self.frame_ids):
            yield ("zenith_err", k, self.zenith_error[i])
            yield ("azimuth_err", k, self.azimuth_error[i])
            yield ("vector_err", k, self.vector_error[i])
            yield ("nees", k, self.nees[i])


def sun_errors(measured: Sequence[SunMeasurement], gt_dirs, gate: float = ANEES_COSINE_GATE) -> SunErrorReport:
    """Errors of measured camera-frame sun directions against the truth.

    Summary statistics use absolute zenith/azimuth errors. ANEES averages
    ``e^T R_s^-1 e / 2`` over measurements whose cosine distance to the
    truth is below ``gate``.
    """
    gt = np.asarray([np.asarray(g, dtype=float) for g in gt_dirs]).reshape(-1, 3)
    _check_lengths(measured, gt, "sun measurements")
    S = np.array([m.direction for m in measured])
    a_m = vec_to_azzen(S)
    a_g = vec_to_azzen(gt)
    d = a_m - a_g
    d[:, 1] = np.radians(_wrap_deg(np.degrees(d[:, 1])))
    cos = np.clip(np.sum(S * gt, axis=1) / (np.linalg.norm(S, axis=1) * np.linalg.norm(gt, axis=1)), -1.0, 1.0)
    vec = np.degrees(np.arccos(cos))
    info = np.linalg.inv(np.array([m.covariance for m in measured]))
    nees = 0.5 * np.einsum("ni,nij,nj->n", d, info, d)
    ok = (1.0 - cos) < gate
    anees = float(np.mean(nees[ok])) if np.any(ok) else math.nan
    zen, az = np.degrees(d[:, 0]), np.degrees(d[:, 1])
    summary = {"zenith": _stats(np.abs(zen)), "azimuth": _stats(np.abs(az)), "vector": _stats(vec)}
    return SunErrorReport([int(m.frame_id) for m in measured], zen, az, vec, nees, anees, int(ok.sum()), summary)


_METRICS = ("trans_armse", "trans_armse_en", "rot_armse")


def improvement(a: float, b: float) -> float:
    """Percent reduction from ``a`` to ``b``."""
    return 100.0 * (a - b) / a if a != 0 else (0.0 if b == a else -math.inf)


def compare_runs(report_a, report_b) -> Dict[str, float]:
    """``100 (a - b) / a`` for each trajectory metric (positive: ``b`` is better)."""
    sa = report_a.summary() if hasattr(report_a, "summary") else dict(report_a)
    sb = report_b.summary() if hasattr(report_b, "summary") else dict(report_b)
    return {m: improvement(float(sa[m]), float(sb[m])) for m in _METRICS if m in sa and m in sb}


# -- output ---------------------------------------------------------------------


def write_long_csv(path, *reports) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "frame_id", "value"])
            for rep in reports:
                for metric, k, v in rep.long_rows():
                    w.writerow([metric, int(k), format(float(v), ".17g")])
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_long_csv(path) -> List[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return [(m, int(k), float(v)) for m, k, v in rows[1:]]


def write_report_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc.strerror or exc}") from exc
