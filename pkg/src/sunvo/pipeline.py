"""Full-sequence estimation from chained windows.

Frame-to-frame motions come from RANSAC; each window is initialized by
compounding them from the propagated prior, refined by :func:`solve_window`,
and hands the marginal of its second frame to the next window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .camera import DEFAULT_D_MIN, triangulate
from .dataset import SequenceDataset
from .ephemeris import sun_direction_enu
from .errors import ConfigInvalid, InsufficientTracks, NoConsensus
from .frontend import RansacConfig, compound_window_guess, ransac_frame_alignment, reprojection_errors
from .se3 import Pose, adjoint, compose, inverse
from .sun_sensing import SunMeasurement, simulate_sun_measurements
from .window_ba import SolverSettings, WindowProblem, WindowSolution, propagate_prior, solve_window

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    window_size: int = 2
    ransac: Optional[RansacConfig] = None  # None: threshold from the dataset noise
    settings: SolverSettings = field(default_factory=SolverSettings)
    huber_delta: float = 0.5
    first_prior_variance: float = 1e-6
    # "once": a sun measurement enters only the first window holding its frame and
    # reaches later windows through the prior; "all": every window holding it
    sun_policy: str = "all"
    max_landmarks: Optional[int] = None  # per frame pair, evenly thinned by track id
    fallback_variance: tuple = (1e-4, 1e-2)  # rad^2, m^2 added on a constant-motion step

    def validate(self):
        if self.window_size < 2:
            raise ConfigInvalid("window_size must be at least 2")
        if self.sun_policy not in ("once", "all"):
            raise ConfigInvalid(f"unknown sun_policy {self.sun_policy!r}")
        if self.first_prior_variance <= 0 or self.huber_delta <= 0:
            raise ConfigInvalid("first_prior_variance and huber_delta must be positive")


@dataclass
class RelativeMotion:
    """RANSAC result for frames ``(k, k+1)``; ``pose`` is None when it failed."""

    frame: int
    pose: Optional[Pose]
    inliers: np.ndarray
    warning: Optional[str] = None


def ransac_config_for(dataset: SequenceDataset, config: PipelineConfig) -> RansacConfig:
    return config.ransac if config.ransac is not None else RansacConfig.for_noise(dataset.observation_noise)


def relative_motions(dataset: SequenceDataset, cfg: RansacConfig) -> List[RelativeMotion]:
    """Frame-to-frame RANSAC over the whole sequence. The result only depends
    on the tracks and ``cfg``, so it can be shared between runs that differ
    in their sun inputs."""
    out = []
    for k in range(dataset.n_frames - 1):
        try:
            T, inl = ransac_frame_alignment(dataset.tracks, dataset.intrinsics, k, k + 1, cfg)
            out.append(RelativeMotion(k, T, np.array(sorted(inl), dtype=np.int64)))
        except (NoConsensus, InsufficientTracks) as exc:
            out.append(RelativeMotion(k, None, np.zeros(0, dtype=np.int64), f"frames {k}->{k + 1}: {exc}"))
    return out


def select_sun(dataset: SequenceDataset, source: str = "none", target_deg: float = 0.0, every_n: int = 10, seed: int = 0):
    """Sun measurements for a run: ``none``, ``simulated`` (GT-Sun-X) or ``file`` (``dataset.sun``)."""
    if source == "none":
        return None
    if source == "simulated":
        return simulate_sun_measurements(dataset.gt_poses, dataset.anchor, target_deg, every_n, seed, dataset.timestamps)
    if source == "file":
        if dataset.sun is None:
            raise ConfigInvalid("sun source 'file' but the dataset carries no sun measurements")
        return list(dataset.sun)
    raise ConfigInvalid(f"unknown sun source {source!r}")


@dataclass
class PipelineResult:
    poses: List[Pose]
    windows: List[dict]
    warnings: List[str]

    @property
    def all_converged(self) -> bool:
        return all(w["converged"] for w in self.windows)

    @property
    def monotone(self) -> bool:
        return all(w["monotone"] for w in self.windows)

    def report(self) -> dict:
        return {
            "n_frames": len(self.poses),
            "n_windows": len(self.windows),
            "all_converged": self.all_converged,
            "sun_terms": int(sum(w["n_sun_terms"] for w in self.windows)),
            "windows_with_sun": [w["frames"] for w in self.windows if w["n_sun_terms"]],
            "total_iterations": int(sum(w["iterations"] for w in self.windows)),
            "warnings": list(self.warnings),
            "windows": self.windows,
        }


def _thin(ids: np.ndarray, limit: Optional[int]) -> np.ndarray:
    if limit is None or len(ids) <= limit:
        return ids
    return ids[np.linspace(0, len(ids) - 1, limit).round().astype(int)]


def _build_problem(ds, config, frames, guess, prior, motions, sun_by_frame, used_sun, s0_cache):
    K = ds.intrinsics
    ww_l, tid_l, y_l = [], [], []
    for w, k in enumerate(frames[:-1]):
        ids = _thin(motions[k].inliers, config.max_landmarks)
        for ww in (w, w + 1):
            fid, Y = ds.tracks.frame(frames[ww])
            ww_l.append(np.full(len(ids), ww))
            tid_l.append(ids)
            y_l.append(Y[np.searchsorted(fid, ids)])
    obs_pose = np.concatenate(ww_l).astype(np.int64)
    tids = np.concatenate(tid_l).astype(np.int64)
    obs_y = np.concatenate(y_l).reshape(-1, 3)
    # a track inlying in consecutive pairs is listed twice in the middle frame
    _, first = np.unique(tids * len(frames) + obs_pose, return_index=True)
    first = np.sort(first)
    obs_pose, tids, obs_y = obs_pose[first], tids[first], obs_y[first]
    landmark_ids, obs_lm = np.unique(tids, return_inverse=True)
    # initial landmark: every view triangulated through its guessed pose, fused
    # with weights d^4 (stereo depth variance grows as 1/d^4)
    p_cam = triangulate(K, obs_y, DEFAULT_D_MIN)
    p_world = np.empty_like(p_cam)
    for ww in range(len(frames)):
        m = obs_pose == ww
        T = guess[ww]
        p_world[m] = (p_cam[m] - T.translation) @ T.rotation
    w = obs_y[:, 2] ** 4
    obs_lm = obs_lm.reshape(-1)
    wsum = np.bincount(obs_lm, weights=w, minlength=len(landmark_ids))
    lm_pos = np.column_stack([np.bincount(obs_lm, weights=w * p_world[:, i], minlength=len(landmark_ids)) for i in range(3)])
    lm_pos /= wsum[:, None]

    sun_pose, sun_dir, sun_cov, sun_s0 = [], [], [], []
    for w, k in enumerate(frames):
        m = sun_by_frame.get(k)
        if m is None or (config.sun_policy == "once" and k in used_sun):
            continue
        used_sun.add(k)
        if k not in s0_cache:
            s0_cache[k] = sun_direction_enu(ds.anchor.at(float(ds.timestamps[k])))
        sun_pose.append(w)
        sun_dir.append(m.direction)
        sun_cov.append(m.covariance)
        sun_s0.append(s0_cache[k])

    return WindowProblem(
        intrinsics=K,
        frame_ids=list(frames),
        poses=guess,
        landmarks=lm_pos,
        obs_pose=obs_pose,
        obs_landmark=obs_lm.reshape(-1),
        obs_y=obs_y,
        prior=prior,
        obs_noise=ds.observation_noise,
        landmark_ids=landmark_ids,
        sun_pose=np.array(sun_pose, dtype=np.int64),
        sun_dir=np.array(sun_dir).reshape(-1, 3),
        sun_cov=np.array(sun_cov).reshape(-1, 2, 2),
        sun_s0=np.array(sun_s0).reshape(-1, 3),
        huber_delta=config.huber_delta,
        settings=config.settings,
    )


def _window_record(sol: WindowSolution) -> dict:
    h = sol.cost_history
    return {
        "frames": list(sol.frame_ids),
        "iterations": sol.iterations,
        "converged": sol.converged,
        "initial_cost": sol.initial_cost,
        "cost": sol.cost,
        "cost_reprojection": sol.breakdown["reprojection"],
        "cost_prior": sol.breakdown["prior"],
        "cost_sun": sol.breakdown["sun"],
        "n_sun_terms": sol.n_sun_terms,
        "n_observations": sol.n_observations,
        "monotone": bool(all(b <= a for a, b in zip(h, h[1:]))),
        "cost_history": list(h),
        "warnings": list(sol.warnings),
    }


def _dead_reckon(prior: Pose, rel: Pose, variance) -> Pose:
    """Propagate a pose and its left covariance through ``rel`` and inflate it."""
    T = compose(rel, prior)
    Ad = adjoint(rel)
    cov = Ad @ prior.covariance @ Ad.T + np.diag([variance[0]] * 3 + [variance[1]] * 3)
    return Pose(T.rotation, T.translation, 0.5 * (cov + cov.T))


def run_pipeline(
    dataset: SequenceDataset,
    sun: Optional[Sequence[SunMeasurement]] = None,
    config: Optional[PipelineConfig] = None,
    motions: Optional[List[RelativeMotion]] = None,
) -> PipelineResult:
    """Estimate every frame pose, starting from the first ground-truth pose.

    ``sun`` (optional) holds camera-frame sun measurements keyed by their
    ``frame_id``. ``motions`` may be passed to reuse a previous RANSAC pass.
    Frame ``k``'s output is its estimate from the last window containing it.
    """
    config = config or PipelineConfig()
    config.validate()
    n = dataset.n_frames
    if n < 2:
        raise ConfigInvalid("the pipeline needs at least two frames")
    if motions is None:
        motions = relative_motions(dataset, ransac_config_for(dataset, config))
    warnings: List[str] = []
    sun_by_frame = {int(m.frame_id): m for m in (sun or [])}
    used_sun: set = set()
    s0_cache: Dict[int, np.ndarray] = {}

    T0 = dataset.gt_poses[0]
    prior = Pose(T0.rotation, T0.translation, config.first_prior_variance * np.eye(6))
    # constant-motion fallback needs the last good relative pose
    last_rel = Pose.identity()
    rel_used: List[Pose] = []
    for m in motions:
        if m.pose is None:
            warnings.append(f"{m.warning}; using constant motion")
            logger.warning(warnings[-1])
            rel_used.append(last_rel)
        else:
            last_rel = m.pose
            rel_used.append(m.pose)

    w = min(config.window_size, n)
    out: List[Optional[Pose]] = [None] * n
    windows: List[dict] = []
    start = 0
    while True:
        frames = list(range(start, start + w))
        guess = compound_window_guess(prior, rel_used[start : start + w - 1])
        guess[0] = Pose(prior.rotation, prior.translation)
        failed = [k for k in frames[:-1] if motions[k].pose is None]
        if failed:
            # no trustworthy landmarks: dead-reckon through the window
            traj = [prior]
            for k in frames[:-1]:
                traj.append(_dead_reckon(traj[-1], rel_used[k], config.fallback_variance))
            sol_poses = traj
            windows.append({
                "frames": frames, "iterations": 0, "converged": True, "initial_cost": 0.0, "cost": 0.0,
                "cost_reprojection": 0.0, "cost_prior": 0.0, "cost_sun": 0.0, "n_sun_terms": 0,
                "n_observations": 0, "monotone": True, "cost_history": [0.0],
                "warnings": [f"window {frames} dead-reckoned"],
            })
        else:
            problem = _build_problem(dataset, config, frames, guess, prior, motions, sun_by_frame, used_sun, s0_cache)
            sol = solve_window(problem)
            sol_poses = sol.poses
            windows.append(_window_record(sol))
            for msg in sol.warnings:
                warnings.append(f"window {frames}: {msg}")
            if not sol.converged:
                warnings.append(f"window {frames} hit the iteration limit")
                logger.warning(warnings[-1])
        out[start] = sol_poses[0]
        if start + w >= n:
            for i, k in enumerate(frames):
                out[k] = sol_poses[i]
            break
        prior = sol_poses[1] if failed else propagate_prior(sol, start + 1)
        start += 1
    return PipelineResult(out, windows, warnings)
