"""Small synthetic fixtures shared by several test modules."""

import numpy as np

from sunvo.camera import DEFAULT_NOISE, project
from sunvo.dataset import TrackTable
from sunvo.frontend import KITTI_INTRINSICS
from sunvo.se3 import Pose, so3_exp

K = KITTI_INTRINSICS


def two_frame_tracks(seed, n=200, outlier_fraction=0.0, pixel_noise=0.0):
    """Two stereo frames sharing ``n`` tracks; returns tracks, true ``T_ba`` and
    the boolean outlier flag per track id."""
    rng = np.random.default_rng(seed)
    T_ba = Pose(so3_exp(rng.normal(scale=0.02, size=3)), np.array([0.0, 0.0, -1.0]) + rng.normal(scale=0.05, size=3))
    P_a = np.column_stack([rng.uniform(-12, 12, n), rng.uniform(-3, 2, n), rng.uniform(4, 40, n)])
    P_b = P_a @ T_ba.rotation.T + T_ba.translation
    Ya, Yb = project(K, P_a), project(K, P_b)
    if pixel_noise:
        sig = pixel_noise * np.sqrt(np.diag(DEFAULT_NOISE))
        Ya = Ya + rng.normal(size=Ya.shape) * sig
        Yb = Yb + rng.normal(size=Yb.shape) * sig
    out = rng.random(n) < outlier_fraction
    m = int(out.sum())
    Yb[out] = np.column_stack([rng.uniform(0, 1242, m), rng.uniform(0, 375, m), rng.uniform(10, 90, m)])
    ids = np.arange(n)
    tracks = TrackTable(np.r_[np.zeros(n, int), np.ones(n, int)], np.r_[ids, ids], np.vstack([Ya, Yb]))
    return tracks, T_ba, out


def random_window(rng, n_landmarks=5, with_sun=True):
    """A two-pose window with arbitrary (non-optimal) poses, landmarks in
    front of both cameras, noisy-looking observations, a prior and a sun term."""
    from sunvo.se3 import compose, exp, random_pose
    from sunvo.window_ba import WindowProblem

    T0, T1 = random_pose(rng, 1.0, 1.0), random_pose(rng, 1.0, 1.0)
    prior = compose(exp(rng.normal(scale=0.3, size=6)), T0).with_covariance(np.diag(rng.uniform(0.5, 2.0, 6)))
    L = []
    while len(L) < n_landmarks:
        pc = np.array([rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(5, 20)])
        p = T0.rotation.T @ (pc - T0.translation)
        if (T1.rotation @ p + T1.translation)[2] > 1.0:
            L.append(p)
    L = np.array(L)
    obs_y = rng.normal(size=(2 * n_landmarks, 3)) * 5.0 + [600.0, 180.0, 30.0]
    kw = {}
    if with_sun:
        s0, sd = rng.normal(size=3), rng.normal(size=3)
        kw = dict(sun_pose=[1], sun_dir=[sd / np.linalg.norm(sd)], sun_cov=[0.02 * np.eye(2)], sun_s0=[s0 / np.linalg.norm(s0)])
    pr = WindowProblem(K, [0, 1], [T0, T1], L, np.repeat([0, 1], n_landmarks), np.tile(np.arange(n_landmarks), 2), obs_y, prior, **kw)
    return pr


def window_jacobian_errors(pr, h=1e-6):
    """Worst relative gap between analytic and central-difference Jacobians of
    the reprojection, prior and sun residuals of ``pr``."""
    poses, L = pr.poses, pr.landmarks
    _, Jp, Jl = pr.reprojection_jacobians(poses, L)
    _, Jpr = pr.prior_jacobian(poses)
    _, Js = pr.sun_jacobians(poses)
    n_p = len(poses)
    errs = {"reprojection": 0.0, "prior": 0.0, "sun": 0.0}

    def gap(num, ana, scale):
        return float(np.abs(num - ana).max() / max(scale, 1e-12))

    for k in range(n_p):
        for i in range(6):
            d = np.zeros(6 * n_p)
            d[6 * k + i] = h
            pp, _ = pr.retract(poses, L, d, np.zeros_like(L))
            pm, _ = pr.retract(poses, L, -d, np.zeros_like(L))
            num = (pr.reprojection_residuals(pp, L)[0] - pr.reprojection_residuals(pm, L)[0]) / (2 * h)
            ana = np.where((pr.obs_pose == k)[:, None], Jp[:, :, i], 0.0)
            errs["reprojection"] = max(errs["reprojection"], gap(num, ana, np.abs(Jp).max()))
            if k == 0:
                num = (pr.prior_residual(pp) - pr.prior_residual(pm)) / (2 * h)
                errs["prior"] = max(errs["prior"], gap(num, Jpr[:, i], np.abs(Jpr).max()))
            if len(pr.sun_pose):
                num = (pr.sun_residuals(pp)[0] - pr.sun_residuals(pm)[0]) / (2 * h)
                ana = Js[:, :, i] * (pr.sun_pose == k)[:, None]
                errs["sun"] = max(errs["sun"], gap(num, ana, np.abs(Js).max()))
    for j in range(len(L)):
        for i in range(3):
            dl = np.zeros_like(L)
            dl[j, i] = h
            num = (pr.reprojection_residuals(poses, L + dl)[0] - pr.reprojection_residuals(poses, L - dl)[0]) / (2 * h)
            ana = np.where((pr.obs_landmark == j)[:, None], Jl[:, :, i], 0.0)
            errs["reprojection"] = max(errs["reprojection"], gap(num, ana, np.abs(Jl).max()))
    return errs
