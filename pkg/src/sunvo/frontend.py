"""Synthetic stereo sequences and the frame-to-frame motion initializer.

The initializer triangulates tracks shared by two frames, runs a fixed
number of three-point RANSAC hypotheses (orthogonal Procrustes on each
minimal sample), keeps the hypothesis with the most inliers under the
(u, v, d) reprojection threshold and refits on all inliers.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .camera import (
    DEFAULT_D_MIN,
    DEFAULT_NOISE,
    DEFAULT_Z_MIN,
    StereoIntrinsics,
    point_jacobian,
    project_unchecked,
    triangulate,
)
from .dataset import SequenceDataset, TrackTable
from .ephemeris import GeodeticAnchor
from .errors import ConfigInvalid, DegenerateConfiguration, InsufficientTracks, NoConsensus
from .se3 import Pose, compose, inverse, skew_batch, so3_exp

KITTI_INTRINSICS = StereoIntrinsics(fu=718.856, fv=718.856, cu=607.1928, cv=185.2157, baseline=0.5372)


@dataclass
class TrajectorySpec:
    """Planar drive in the EN plane.

    ``kind="arc"`` integrates a heading with sinusoidal yaw rate
    ``yaw_rate_amplitude * sin(2 pi k / yaw_rate_period)`` (rad/frame) at
    constant ``speed`` (m/frame). ``kind="waypoints"`` walks the polyline
    through ``waypoints`` (E, N pairs, m) at ``speed``.
    """

    kind: str = "arc"
    n_frames: int = 100
    speed: float = 1.0
    heading: float = 0.0
    yaw_rate_amplitude: float = 0.01
    yaw_rate_period: float = 200.0
    waypoints: Optional[List[Tuple[float, float]]] = None
    frame_interval: float = 0.1  # s


@dataclass
class SyntheticSceneConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    n_landmarks: int = 300
    lateral_range: Tuple[float, float] = (2.0, 12.0)  # m, either side of the path
    height_range: Tuple[float, float] = (-1.5, 3.0)  # m, relative to the camera
    max_depth: float = 40.0
    intrinsics: StereoIntrinsics = KITTI_INTRINSICS
    image_size: Tuple[int, int] = (1242, 375)
    pixel_noise: float = 0.0  # px, per-axis sigma on u and v; disparity gets sqrt(2) times this
    outlier_fraction: float = 0.0
    yaw_rate_bias: float = 0.0  # rad/frame injected into the perceived motion
    seed: int = 0

    def validate(self) -> None:
        t = self.trajectory
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ConfigInvalid(f"outlier_fraction must lie in [0, 0.5), got {self.outlier_fraction}")
        if self.n_landmarks < 10:
            raise ConfigInvalid(f"need at least 10 landmarks, got {self.n_landmarks}")
        if t.n_frames < 2:
            raise ConfigInvalid("need at least two frames")
        if t.kind not in ("arc", "waypoints"):
            raise ConfigInvalid(f"unknown trajectory kind {t.kind!r}")
        if t.kind == "waypoints" and (not t.waypoints or len(t.waypoints) < 2):
            raise ConfigInvalid("waypoint trajectories need at least two waypoints")
        if t.speed <= 0 or t.frame_interval <= 0:
            raise ConfigInvalid("speed and frame interval must be positive")
        if self.pixel_noise < 0 or self.max_depth <= DEFAULT_Z_MIN:
            raise ConfigInvalid("pixel noise must be >= 0 and max_depth beyond z_min")
        lo, hi = self.lateral_range
        if not 0 <= lo < hi:
            raise ConfigInvalid("lateral_range must satisfy 0 <= lo < hi")
        if not self.height_range[0] < self.height_range[1]:
            raise ConfigInvalid("height_range must be increasing")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        d = dict(d or {})
        try:
            traj = TrajectorySpec(**(d.pop("trajectory", None) or {}))
            if traj.waypoints is not None:
                traj.waypoints = [tuple(map(float, w)) for w in traj.waypoints]
            if "intrinsics" in d:
                d["intrinsics"] = StereoIntrinsics.from_dict(d["intrinsics"])
            for key in ("lateral_range", "height_range", "image_size"):
                if key in d:
                    d[key] = tuple(d[key])
            cfg = cls(trajectory=traj, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"invalid scene config: {exc}") from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["intrinsics"] = self.intrinsics.to_dict()
        return out


def camera_pose(center, heading: float) -> Pose:
    """``T_k0`` for a level camera at ``center`` looking along ``heading``
    (rad, counter-clockwise from East)."""
    c, s = math.cos(heading), math.sin(heading)
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    fwd = np.array([c, s, 0.0])
    R = np.vstack([right, down, fwd])
    return Pose(R, -R @ np.asarray(center, dtype=float))


def _path(spec: TrajectorySpec):
    n = spec.n_frames
    if spec.kind == "arc":
        k = np.arange(n)
        rate = spec.yaw_rate_amplitude * np.sin(2.0 * math.pi * k / spec.yaw_rate_period)
        heading = spec.heading + np.concatenate([[0.0], np.cumsum(rate[:-1])])
        step = spec.speed * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        xy = np.concatenate([[[0.0, 0.0]], np.cumsum(step[:-1], axis=0)])
        return xy, heading
    W = np.asarray(spec.waypoints, dtype=float)
    W = W - W[0]
    seg = np.diff(W, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len <= 0):
        raise ConfigInvalid("consecutive waypoints must differ")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.minimum(np.arange(n) * spec.speed, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    xy = W[idx] + frac[:, None] * seg[idx]
    heading = np.arctan2(seg[idx, 1], seg[idx, 0])
    return xy, heading


def _place_landmarks(cfg: SyntheticSceneConfig, xy, heading, rng) -> np.ndarray:
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1] + cfg.max_depth
    s = rng.uniform(0.0, total, size=cfg.n_landmarks)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(xy) - 1)
    along = s - cum[idx]
    fwd = np.stack([np.cos(heading[idx]), np.sin(heading[idx])], axis=1)
    right = np.stack([fwd[:, 1], -fwd[:, 0]], axis=1)
    side = np.where(rng.random(cfg.n_landmarks) < 0.5, -1.0, 1.0)
    lateral = side * rng.uniform(*cfg.lateral_range, size=cfg.n_landmarks)
    base = xy[idx] + along[:, None] * fwd + lateral[:, None] * right
    up = rng.uniform(*cfg.height_range, size=cfg.n_landmarks)
    return np.column_stack([base, up])


def perceived_poses(gt: Sequence[Pose], yaw_rate_bias: float) -> List[Pose]:
    """Chain the true frame-to-frame motions with an extra yaw of
    ``yaw_rate_bias`` per frame about each camera's vertical axis."""
    if yaw_rate_bias == 0.0:
        return list(gt)
    E = Pose(so3_exp([0.0, -yaw_rate_bias, 0.0]), np.zeros(3))
    out = [gt[0]]
    for k in range(len(gt) - 1):
        rel = compose(gt[k + 1], inverse(gt[k]))
        out.append(compose(E, compose(rel, out[-1])))
    return out


def generate_scene(cfg: SyntheticSceneConfig, anchor: GeodeticAnchor) -> SequenceDataset:
    """Ground truth, landmarks and noisy stereo tracks for a planar drive.

    The base frame is ENU with the first camera at the origin. With a
    nonzero ``yaw_rate_bias`` each landmark is observed as if the camera had
    followed the biased motion chain since the landmark was first seen.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    W, H = cfg.image_size
    xy, heading = _path(cfg.trajectory)
    n = len(xy)
    gt = [camera_pose([x, y, 0.0], h) for (x, y), h in zip(xy, heading)]
    L = _place_landmarks(cfg, xy, heading, rng)
    seen = perceived_poses(gt, cfg.yaw_rate_bias)

    first_seen = np.full(len(L), -1)
    local = np.zeros_like(L)  # landmark in the perceived base frame
    rows_f, rows_j, rows_y = [], [], []
    d_lo = K.fu * K.baseline / cfg.max_depth
    for k in range(n):
        T = gt[k]
        P = L @ T.rotation.T + T.translation
        with np.errstate(divide="ignore", invalid="ignore"):
            Y = project_unchecked(K, P)
        vis = (
            (P[:, 2] > DEFAULT_Z_MIN) & (P[:, 2] <= cfg.max_depth)
            & (Y[:, 0] >= 0) & (Y[:, 0] < W) & (Y[:, 1] >= 0) & (Y[:, 1] < H) & (Y[:, 2] > DEFAULT_D_MIN)
        )
        ids = np.flatnonzero(vis)
        new = ids[first_seen[ids] < 0]
        first_seen[new] = k
        if cfg.yaw_rate_bias != 0.0:
            # express newly seen landmarks in the perceived world at first sight
            Tp = seen[k]
            local[new] = (P[new] - Tp.translation) @ Tp.rotation
            Pp = local[ids] @ Tp.rotation.T + Tp.translation
            Yk = project_unchecked(K, Pp)
        else:
            Yk = Y[ids]
        rows_f.append(np.full(len(ids), k))
        rows_j.append(ids)
        rows_y.append(Yk)

    frame_ids = np.concatenate(rows_f)
    track_ids = np.concatenate(rows_j)
    Y = np.concatenate(rows_y)
    if cfg.pixel_noise > 0:
        sig = cfg.pixel_noise * np.sqrt(np.diag(DEFAULT_NOISE))
        Y = Y + rng.normal(size=Y.shape) * sig
    outliers = rng.random(len(Y)) < cfg.outlier_fraction
    n_out = int(outliers.sum())
    if n_out:
        Y[outliers] = np.column_stack(
            [rng.uniform(0, W, n_out), rng.uniform(0, H, n_out), rng.uniform(d_lo, 4.0 * d_lo + 30.0, n_out)]
        )
    # the noise may push a disparity past zero; such rows cannot be triangulated
    ok = Y[:, 2] > DEFAULT_D_MIN
    tracks = TrackTable(frame_ids[ok], track_ids[ok], Y[ok])
    outliers = outliers[ok]
    keep_ids, counts = np.unique(tracks.track_ids, return_counts=True)
    keep = np.isin(tracks.track_ids, keep_ids[counts >= 2])
    tracks = TrackTable(tracks.frame_ids[keep], tracks.track_ids[keep], tracks.Y[keep])
    outliers = outliers[keep]

    noise = DEFAULT_NOISE * cfg.pixel_noise**2 if cfg.pixel_noise > 0 else DEFAULT_NOISE.copy()
    timestamps = np.arange(n) * cfg.trajectory.frame_interval
    return SequenceDataset(
        anchor, K, timestamps, gt, tracks, noise, tuple(cfg.image_size), None, L, outliers
    )


# -- alignment ----------------------------------------------------------------


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Batched least-squares rotation/translation with ``dst ~ R src + t``.

    ``src``, ``dst``: ``(..., n, 3)``. The smallest singular direction is
    flipped when needed so that ``det(R) = +1``.
    """
    cs = src.mean(axis=-2, keepdims=True)
    cd = dst.mean(axis=-2, keepdims=True)
    Hm = np.swapaxes(src - cs, -1, -2) @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(Hm.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cd[..., 0, :] - (R @ cs[..., 0, :, None])[..., 0]
    return R, t


def rigid_align(src, dst) -> Pose:
    src, dst = np.asarray(src, dtype=float), np.asarray(dst, dtype=float)
    R, t = _kabsch(src, dst)
    return Pose(R, t)


def triangle_area(p: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :]), axis=-1)


def rigid_align_3pt(src, dst) -> Pose:
    """Exact rigid transform from three non-collinear correspondences."""
    src, dst = np.asarray(src, dtype=float), np.asarray(dst, dtype=float)
    if src.shape != (3, 3) or dst.shape != (3, 3):
        raise ValueError("expected two sets of three 3-D points")
    if triangle_area(src) <= 1e-8 or triangle_area(dst) <= 1e-8:
        raise DegenerateConfiguration("the three points are collinear")
    return rigid_align(src, dst)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 400
    threshold: float = 2.0  # px, norm of the (u, v, d) residual
    min_inliers: int = 6
    seed: int = 0
    max_refits: int = 10
    refine_iterations: int = 3  # reprojection Gauss-Newton steps per hypothesis

    def __post_init__(self):
        if self.iterations < 1 or self.threshold <= 0:
            raise ValueError("RANSAC needs iterations >= 1 and a positive threshold")

    @classmethod
    def for_noise(cls, noise, confidence: float = 0.99, **kw) -> "RansacConfig":
        """Threshold gating the two-frame residual of an inlier at ``confidence``.

        A correct model still sees the observation noise of both frames, so
        the residual covariance is about ``2 R_y``; the gate is the chi-square
        (3 dof) quantile scaled by its largest eigenvalue, never below 2 px.
        """
        from scipy.stats import chi2

        lam = float(np.linalg.eigvalsh(2.0 * np.asarray(noise, dtype=float)).max())
        thr = math.sqrt(lam * chi2.ppf(confidence, 3))
        return cls(threshold=max(2.0, thr), **kw)


def _distinct_triples(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    i = rng.integers(0, n, size=m)
    j = rng.integers(0, n - 1, size=m)
    j = j + (j >= i)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k = rng.integers(0, n - 2, size=m)
    k = k + (k >= lo)
    k = k + (k >= hi)
    return np.stack([i, j, k], axis=1)


def _so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew_batch(phi)
    KK = K @ K
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    A = np.where(small, 1.0, np.sin(th) / th)
    B = np.where(small, 0.5, (1.0 - np.cos(th)) / (th * th))
    return np.eye(3) + A * K + B * KK


def refine_reprojection(K: StereoIntrinsics, R, t, P_a, Y_b, iterations: int = 3):
    """Gauss-Newton on ``sum |g(R P_a + t) - Y_b|^2`` over a left pose
    perturbation, batched over any leading hypothesis axes.

    Procrustes weighs 3-D error equally in all directions, while stereo depth
    error grows with depth squared; a few pixel-space steps fix that.
    """
    R = np.array(R, dtype=float)
    t = np.array(t, dtype=float)
    for _ in range(iterations):
        P = P_a @ np.swapaxes(R, -1, -2) + t[..., None, :]
        z = P[..., 2]
        ok = z > DEFAULT_Z_MIN
        Ps = np.where(ok[..., None], P, np.array([0.0, 0.0, 1.0]))
        r = np.where(ok[..., None], project_unchecked(K, Ps) - Y_b, 0.0)
        G = point_jacobian(K, Ps)
        Jp = np.concatenate([-G @ skew_batch(Ps), G], axis=-1)
        Jp = np.where(ok[..., None, None], Jp, 0.0)
        Jf = Jp.reshape(Jp.shape[:-3] + (-1, 6))
        Jt = np.swapaxes(Jf, -1, -2)
        H = Jt @ Jf
        b = (Jt @ r.reshape(r.shape[:-2] + (-1, 1)))[..., 0]
        H = H + 1e-9 * np.eye(6) * (np.trace(H, axis1=-2, axis2=-1)[..., None, None] + 1.0)
        delta = -np.linalg.solve(H, b[..., None])[..., 0]
        dR = _so3_exp_batch(delta[..., :3])
        R = dR @ R
        t = (dR @ t[..., None])[..., 0] + delta[..., 3:]
    return R, t


def reprojection_errors(K: StereoIntrinsics, R, t, P_a: np.ndarray, Y_b: np.ndarray) -> np.ndarray:
    """``|g(R P_a + t) - Y_b|`` per point, broadcasting over leading hypothesis axes.
    Points that land behind the camera get ``inf``."""
    P = P_a @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = P[..., 2]
    bad = z <= DEFAULT_Z_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        Y = project_unchecked(K, np.where(bad[..., None], 1.0, P))
    err = np.linalg.norm(Y - Y_b, axis=-1)
    return np.where(bad, np.inf, err)


def _score(err: np.ndarray, threshold: float):
    """Inlier count, ties broken by lower mean inlier error (comparable tuples)."""
    inl = err < threshold
    n = int(inl.sum())
    return (n, -float(err[inl].mean()) if n else 0.0)


def ransac_frame_alignment(tracks: TrackTable, K: StereoIntrinsics, frame_a: int, frame_b: int, cfg: RansacConfig = RansacConfig()):
    """Relative pose ``T_ba`` (frame ``a`` points into frame ``b``) and inlier track ids."""
    ids, Ya, Yb = tracks.shared(frame_a, frame_b)
    ok = (Ya[:, 2] > DEFAULT_D_MIN) & (Yb[:, 2] > DEFAULT_D_MIN)
    ids, Ya, Yb = ids[ok], Ya[ok], Yb[ok]
    n = len(ids)
    if n < 3:
        raise InsufficientTracks(f"frames {frame_a} and {frame_b} share {n} usable tracks")
    Pa = triangulate(K, Ya)
    Pb = triangulate(K, Yb)

    rng = np.random.default_rng([cfg.seed, frame_a, frame_b])
    samples = _distinct_triples(rng, n, cfg.iterations)
    Sa, Sb = Pa[samples], Pb[samples]
    valid = (triangle_area(Sa) > 1e-8) & (triangle_area(Sb) > 1e-8)
    R, t = _kabsch(Sa, Sb)
    if cfg.refine_iterations:
        R, t = refine_reprojection(K, R, t, Sa, Yb[samples], cfg.refine_iterations)
    err = reprojection_errors(K, R, t, Pa, Yb)
    inl = err < cfg.threshold
    count = np.where(valid, inl.sum(axis=1), -1)
    mean_err = np.where(inl, err, 0.0).sum(axis=1) / np.maximum(inl.sum(axis=1), 1)
    best = int(np.lexsort((mean_err, -count))[0])
    if count[best] < cfg.min_inliers:
        raise NoConsensus(f"best hypothesis for frames {frame_a}->{frame_b} has {max(count[best], 0)} inliers")

    mask = inl[best]
    Rb, tb = R[best], t[best]
    score = _score(reprojection_errors(K, Rb, tb, Pa, Yb), cfg.threshold)
    for _ in range(cfg.max_refits):
        # rigid refit on all inliers, plus a refinement of the current model in
        # case far, low-disparity points drag the 3-D fit away
        Rk, tk = _kabsch(Pa[mask], Pb[mask])
        Rc, tc = np.stack([Rk, Rb]), np.stack([tk, tb])
        if cfg.refine_iterations:
            Rc, tc = refine_reprojection(K, Rc, tc, Pa[mask], Yb[mask], cfg.refine_iterations + 2)
        errs = reprojection_errors(K, Rc, tc, Pa, Yb)
        scores = [_score(e, cfg.threshold) for e in errs]
        i = max(range(len(scores)), key=lambda j: scores[j])
        if scores[i] < score:
            break
        Rb, tb = Rc[i], tc[i]
        score = scores[i]
        new_mask = errs[i] < cfg.threshold
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    e = reprojection_errors(K, Rb, tb, Pa, Yb)
    mask = mask & (e <= cfg.threshold)
    if mask.sum() < cfg.min_inliers:
        raise NoConsensus(f"refit for frames {frame_a}->{frame_b} kept {int(mask.sum())} inliers")
    return Pose(Rb, tb), set(int(i) for i in ids[mask])


def compound_window_guess(prior_pose: Pose, relative_poses: Sequence[Pose]) -> List[Pose]:
    """``[T_k0, T_{k+1,k} T_k0, ...]`` starting from the prior pose."""
    out = [prior_pose]
    for rel in relative_poses:
        out.append(compose(rel, out[-1]))
    return out
