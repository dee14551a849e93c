"""Sliding-window bundle adjustment.

The window objective is

    J = sum_obs e_y^T R_y^-1 e_y  +  e_p^T R_p^-1 e_p  +  sum_sun rho(e_s^T R_s^-1 e_s)

with ``e_y = g(T_k0 p_0) - y``, ``e_p = log(T_prior^-1 T_first)`` and
``e_s = f(s_measured) - f(R_k0 s_0)`` in (zenith, azimuth), azimuth wrapped to
(-pi, pi]. ``rho`` is the Huber function of the Mahalanobis norm ``u``:
``u^2`` below ``delta`` and ``2 delta u - delta^2`` above.

Poses use left perturbations ``T <- exp(dx) T``; landmarks are additive.
Levenberg-Marquardt eliminates the landmarks with a Schur complement per
iteration, and the same reduced system (undamped, at the optimum) gives the
pose covariances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .camera import DEFAULT_NOISE, DEFAULT_Z_MIN, StereoIntrinsics, point_jacobian, project_unchecked
from .ephemeris import azzen_jacobian, vec_to_azzen
from .errors import FrameNotInWindow, PointBehindCamera, RankDeficient, SolverDiverged
from .se3 import Pose, adjoint, compose, inverse, log, log_rt, se3_left_jacobian_inv, skew, skew_batch, so3_exp

logger = logging.getLogger(__name__)

POLE_ZENITH = 1e-6
_I3 = np.arange(3)


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 50
    gradient_tol: float = 1e-8  # max-norm of J^T r
    step_tol: float = 1e-10  # relative to the state norm
    function_tol: float = 1e-6  # relative cost change of an accepted step
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.2
    damping_max: float = 1e16


@dataclass(eq=False)
class WindowProblem:
    """One window: poses ``frame_ids`` (first one carries the prior),
    landmarks, observations and optional sun terms.

    Observations are parallel arrays: ``obs_pose`` indexes into the window
    poses, ``obs_landmark`` into ``landmarks`` and ``obs_y`` holds (u, v, d).
    ``obs_noise`` is one shared 3x3 covariance or one per observation.
    Sun terms are parallel arrays too: pose index, measured direction, 2x2
    (zenith, azimuth) covariance and the world sun direction for that frame.
    """

    intrinsics: StereoIntrinsics
    frame_ids: List[int]
    poses: List[Pose]
    landmarks: np.ndarray
    obs_pose: np.ndarray
    obs_landmark: np.ndarray
    obs_y: np.ndarray
    prior: Pose
    obs_noise: np.ndarray = field(default_factory=lambda: DEFAULT_NOISE.copy())
    landmark_ids: Optional[np.ndarray] = None
    sun_pose: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sun_dir: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sun_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    sun_s0: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    huber_delta: float = 0.5
    settings: SolverSettings = field(default_factory=SolverSettings)
    z_min: float = DEFAULT_Z_MIN

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        self.obs_pose = np.asarray(self.obs_pose, dtype=np.int64)
        self.obs_landmark = np.asarray(self.obs_landmark, dtype=np.int64)
        self.obs_y = np.asarray(self.obs_y, dtype=float).reshape(-1, 3)
        self.sun_pose = np.asarray(self.sun_pose, dtype=np.int64)
        self.sun_dir = np.asarray(self.sun_dir, dtype=float).reshape(-1, 3)
        self.sun_cov = np.asarray(self.sun_cov, dtype=float).reshape(-1, 2, 2)
        self.sun_s0 = np.asarray(self.sun_s0, dtype=float).reshape(-1, 3)
        if self.prior.covariance is None:
            raise ValueError("the window prior needs a 6x6 covariance")
        np.linalg.cholesky(self.prior.covariance)
        if len(self.poses) != len(self.frame_ids):
            raise ValueError("one initial pose per window frame is required")
        if self.landmark_ids is None:
            self.landmark_ids = np.arange(len(self.landmarks))
        self.warnings: List[str] = []
        self._cull()
        self._prepare()

    # -- setup --------------------------------------------------------------

    def _cull(self):
        keep = np.ones(len(self.obs_y), dtype=bool)
        if len(self.obs_y):
            z = self._camera_points(self.poses, self.landmarks)[:, 2]
            behind = z <= self.z_min
            if np.any(behind):
                self.warnings.append(f"culled {int(behind.sum())} observations behind the camera")
                logger.warning(self.warnings[-1])
                keep &= ~behind
        counts = np.bincount(self.obs_landmark[keep], minlength=len(self.landmarks))
        keep &= counts[self.obs_landmark] >= 2
        if not np.all(keep):
            self._select_obs(keep)
        used = np.unique(self.obs_landmark)
        if len(used) != len(self.landmarks):
            remap = -np.ones(len(self.landmarks), dtype=np.int64)
            remap[used] = np.arange(len(used))
            self.landmarks = self.landmarks[used]
            self.landmark_ids = np.asarray(self.landmark_ids)[used]
            self.obs_landmark = remap[self.obs_landmark]

        if len(self.sun_dir):
            zen = vec_to_azzen(self.sun_dir)[:, 0]
            pole = zen < POLE_ZENITH
            if np.any(pole):
                self.warnings.append(f"skipped {int(pole.sum())} sun measurements at the zenith pole")
                logger.warning(self.warnings[-1])
                k = ~pole
                self.sun_pose, self.sun_dir = self.sun_pose[k], self.sun_dir[k]
                self.sun_cov, self.sun_s0 = self.sun_cov[k], self.sun_s0[k]

    def _select_obs(self, keep):
        self.obs_pose = self.obs_pose[keep]
        self.obs_landmark = self.obs_landmark[keep]
        self.obs_y = self.obs_y[keep]
        if np.ndim(self.obs_noise) == 3:
            self.obs_noise = self.obs_noise[keep]

    def _prepare(self):
        noise = np.asarray(self.obs_noise, dtype=float)
        self._obs_whiten = np.linalg.inv(np.linalg.cholesky(noise))  # W with W R W^T = I
        Tp_inv = inverse(self.prior)
        self._prior_inv = Tp_inv
        self._prior_ad = adjoint(Tp_inv)
        cov_r = self._prior_ad @ self.prior.covariance @ self._prior_ad.T
        self._prior_info = np.linalg.inv(0.5 * (cov_r + cov_r.T))
        if len(self.sun_cov):
            self._sun_info = np.linalg.inv(self.sun_cov)
            self._sun_f = vec_to_azzen(self.sun_dir)
        else:
            self._sun_info = np.zeros((0, 2, 2))
            self._sun_f = np.zeros((0, 2))
        self._pose_seg = _Segments(self.obs_pose, self.n_poses)
        self._lm_seg = _Segments(self.obs_landmark, len(self.landmarks))
        key = self.obs_pose * max(len(self.landmarks), 1) + self.obs_landmark
        self._unique_pairs = len(np.unique(key)) == len(key)

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    # -- state ----------------------------------------------------------------

    @staticmethod
    def _state(poses):
        return np.stack([T.rotation for T in poses]), np.stack([T.translation for T in poses])

    def _camera_points(self, poses, landmarks):
        R, t = self._state(poses)
        return self._points(R, t, landmarks)

    def _points(self, R, t, L):
        return (R[self.obs_pose] @ L[self.obs_landmark][..., None])[..., 0] + t[self.obs_pose]

    def _evaluate(self, R, t, L) -> dict:
        """Residuals and per-term costs at an array state."""
        P = self._points(R, t, L)
        if np.any(P[:, 2] <= self.z_min):
            raise PointBehindCamera("a landmark moved behind the camera")
        e = project_unchecked(self.intrinsics, P) - self.obs_y
        r = (self._obs_whiten @ e[..., None])[..., 0]
        Ri, ti = self._prior_inv.rotation, self._prior_inv.translation
        ep = log_rt(Ri @ R[0], Ri @ t[0] + ti)
        ev = {"P": P, "e": e, "r": r, "ep": ep}
        rep = float(np.sum(r * r))
        pri = float(ep @ self._prior_info @ ep)
        sun = 0.0
        if len(self.sun_pose):
            s_hat = (R[self.sun_pose] @ self.sun_s0[..., None])[..., 0]
            es = self._sun_f - vec_to_azzen(s_hat)
            es[:, 1] = wrap_angle(es[:, 1])
            u2 = np.einsum("ni,nij,nj->n", es, self._sun_info, es)
            ev.update(s_hat=s_hat, es=es, u2=u2)
            sun = float(np.sum(self._huber(u2)))
        ev["costs"] = {"reprojection": rep, "prior": pri, "sun": sun, "total": rep + pri + sun}
        return ev

    def _huber(self, u2):
        d = self.huber_delta
        u = np.sqrt(u2)
        return np.where(u <= d, u2, 2.0 * d * u - d * d)

    # -- residuals (pose-level API) -------------------------------------------

    def reprojection_residuals(self, poses, landmarks):
        """``g(T_k0 p_0) - y`` per observation and the camera-frame points."""
        P = self._camera_points(poses, landmarks)
        if np.any(P[:, 2] <= self.z_min):
            raise PointBehindCamera("a landmark moved behind the camera")
        return project_unchecked(self.intrinsics, P) - self.obs_y, P

    def prior_residual(self, poses):
        return log(compose(self._prior_inv, poses[0]))

    def sun_residuals(self, poses):
        if not len(self.sun_pose):
            return np.zeros((0, 2)), np.zeros((0, 3))
        R, _ = self._state(poses)
        s_hat = (R[self.sun_pose] @ self.sun_s0[..., None])[..., 0]
        e = self._sun_f - vec_to_azzen(s_hat)
        e[:, 1] = wrap_angle(e[:, 1])
        return e, s_hat

    def costs(self, poses=None, landmarks=None) -> Dict[str, float]:
        poses = self.poses if poses is None else poses
        landmarks = self.landmarks if landmarks is None else landmarks
        R, t = self._state(poses)
        return self._evaluate(R, t, np.asarray(landmarks, dtype=float))["costs"]

    # -- linearization ----------------------------------------------------------

    def _rep_jacobians(self, R, P):
        G = point_jacobian(self.intrinsics, P)
        Jp = np.concatenate([-G @ skew_batch(P), G], axis=-1)
        Jl = G @ R[self.obs_pose]
        return Jp, Jl

    def reprojection_jacobians(self, poses, landmarks):
        """Per-observation residuals and Jacobians w.r.t. pose (3x6) and landmark (3x3)."""
        e, P = self.reprojection_residuals(poses, landmarks)
        R, _ = self._state(poses)
        return (e,) + self._rep_jacobians(R, P)

    def _prior_jacobian(self, ep):
        return se3_left_jacobian_inv(ep) @ self._prior_ad

    def prior_jacobian(self, poses):
        e = self.prior_residual(poses)
        return e, self._prior_jacobian(e)

    def _sun_jacobians(self, s_hat):
        J = np.zeros((len(s_hat), 2, 6))
        for i, s in enumerate(s_hat):
            # e = f(s) - f(s_hat), d s_hat / d phi = -[s_hat]x
            J[i, :, :3] = azzen_jacobian(s) @ skew(s)
        return J

    def sun_jacobians(self, poses):
        """Residuals ``(m, 2)`` and Jacobians ``(m, 2, 6)`` w.r.t. the observing pose."""
        e, s_hat = self.sun_residuals(poses)
        return e, self._sun_jacobians(s_hat)

    def sun_weights(self, e):
        """IRLS weights of the Huber loss on the Mahalanobis norm."""
        u = np.sqrt(np.einsum("ni,nij,nj->n", e, self._sun_info, e))
        return np.where(u <= self.huber_delta, 1.0, self.huber_delta / np.maximum(u, 1e-300))

    def _linearize(self, R, t, L, ev):
        n_p, n_l = self.n_poses, len(L)
        Jp, Jl = self._rep_jacobians(R, ev["P"])
        J = self._obs_whiten @ np.concatenate([Jp, Jl], axis=-1)  # (M, 3, 9)
        Jt = np.swapaxes(J, 1, 2)
        JtJ = Jt @ J
        Jtr = (Jt @ ev["r"][..., None])[..., 0]
        Hpp = np.zeros((n_p, 6, n_p, 6))
        idx = np.arange(n_p)
        Hpp[idx, :, idx, :] = self._pose_seg.sum(np.ascontiguousarray(JtJ[:, :6, :6]))
        gp = self._pose_seg.sum(Jtr[:, :6])
        Hll = self._lm_seg.sum(np.ascontiguousarray(JtJ[:, 6:, 6:]))
        gl = self._lm_seg.sum(Jtr[:, 6:])
        Hpl = np.zeros((n_p, n_l, 6, 3))
        if self._unique_pairs:
            Hpl[self.obs_pose, self.obs_landmark] = JtJ[:, :6, 6:]
        else:
            np.add.at(Hpl, (self.obs_pose, self.obs_landmark), JtJ[:, :6, 6:])

        ep = ev["ep"]
        Jpr = self._prior_jacobian(ep)
        Hpp[0, :, 0, :] += Jpr.T @ self._prior_info @ Jpr
        gp[0] += Jpr.T @ self._prior_info @ ep

        if len(self.sun_pose):
            es = ev["es"]
            Js = self._sun_jacobians(ev["s_hat"])
            w = self.sun_weights(es)
            for i, k in enumerate(self.sun_pose):
                JtW = w[i] * Js[i].T @ self._sun_info[i]
                Hpp[k, :, k, :] += JtW @ Js[i]
                gp[k] += JtW @ es[i]
        return Hpp.reshape(6 * n_p, 6 * n_p), gp.reshape(-1), Hll, gl, Hpl

    def normal_equations(self, poses, landmarks):
        """Gauss-Newton blocks of the whitened system: ``Hpp (6P, 6P)``,
        ``gp (6P,)``, ``Hll (L, 3, 3)``, ``gl (L, 3)``, ``Hpl (P, L, 6, 3)``."""
        R, t = self._state(poses)
        L = np.asarray(landmarks, dtype=float)
        return self._linearize(R, t, L, self._evaluate(R, t, L))

    @staticmethod
    def reduced_system(Hpp, gp, Hll, gl, Hpl, damping=0.0):
        """Schur complement onto the poses: ``S, s, Hll_inv`` (optionally damped)."""
        if damping:
            Hpp, Hll = Hpp.copy(), Hll.copy()
            i = np.arange(len(Hpp))
            Hpp[i, i] += damping * np.maximum(Hpp[i, i], 1e-9)
            Hll[:, _I3, _I3] += damping * np.maximum(Hll[:, _I3, _I3], 1e-9)
        Hll_inv = np.linalg.inv(Hll)
        n_p, n_l = Hpl.shape[:2]
        X = Hpl @ Hll_inv[None]  # (P, L, 6, 3)
        Xd = X.transpose(0, 2, 1, 3).reshape(6 * n_p, 3 * n_l)
        Hd = Hpl.transpose(0, 2, 1, 3).reshape(6 * n_p, 3 * n_l)
        S = Hpp - Xd @ Hd.T
        s = gp - Xd @ gl.reshape(-1)
        return 0.5 * (S + S.T), s, Hll_inv

    @staticmethod
    def back_substitute(dp, gl, Hpl, Hll_inv):
        n_p = Hpl.shape[0]
        rhs = gl + np.einsum("plij,pi->lj", Hpl, dp.reshape(n_p, 6))
        return -(Hll_inv @ rhs[..., None])[..., 0]

    @staticmethod
    def _retract(R, t, dp, dl, L):
        dR = _exp_batch(dp.reshape(-1, 6)[:, :3])
        R_new = dR @ R
        t_new = (dR @ t[..., None])[..., 0] + dp.reshape(-1, 6)[:, 3:]
        return R_new, t_new, L + dl

    def retract(self, poses, landmarks, dx_p, dx_l):
        R, t = self._state(poses)
        R, t, L = self._retract(R, t, np.asarray(dx_p, dtype=float), np.asarray(dx_l, dtype=float), np.asarray(landmarks, dtype=float))
        return [Pose(Ri, ti) for Ri, ti in zip(R, t)], L

    def _covariance(self, R, t, L, ev=None) -> np.ndarray:
        ev = self._evaluate(R, t, L) if ev is None else ev
        Hpp, gp, Hll, gl, Hpl = self._linearize(R, t, L, ev)
        try:
            S, _, _ = self.reduced_system(Hpp, gp, Hll, gl, Hpl)
            C = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("pose information matrix is not positive definite") from exc
        Ci = np.linalg.inv(C)
        cov = Ci.T @ Ci
        return 0.5 * (cov + cov.T)

    def pose_covariance(self, poses=None, landmarks=None) -> np.ndarray:
        """Joint 6P x 6P covariance of the window poses with landmarks marginalized."""
        poses = self.poses if poses is None else poses
        landmarks = self.landmarks if landmarks is None else landmarks
        R, t = self._state(poses)
        return self._covariance(R, t, np.asarray(landmarks, dtype=float))


class _Segments:
    """Sums of per-observation rows grouped by an integer key."""

    def __init__(self, keys, n):
        keys = np.asarray(keys, dtype=int)
        self.onehot = np.zeros((n, len(keys)))
        self.onehot[keys, np.arange(len(keys))] = 1.0
        self.n = n

    def sum(self, values):
        return (self.onehot @ values.reshape(len(values), -1)).reshape((self.n,) + values.shape[1:])


def _exp_batch(phi):
    if len(phi) <= 4:
        return np.stack([so3_exp(p) for p in phi])
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew_batch(phi)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / (th * th))
    return np.eye(3) + a * K + b * (K @ K)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    return np.where(w == -math.pi, math.pi, w)


@dataclass(eq=False)
class WindowSolution:
    frame_ids: List[int]
    poses: List[Pose]  # each carries its marginal 6x6 covariance
    landmarks: np.ndarray
    landmark_ids: np.ndarray
    joint_covariance: np.ndarray
    initial_cost: float
    cost: float
    breakdown: Dict[str, float]
    converged: bool
    iterations: int
    cost_history: List[float]
    n_sun_terms: int
    n_observations: int
    warnings: List[str] = field(default_factory=list)

    def pose(self, frame_id: int) -> Pose:
        try:
            return self.poses[self.frame_ids.index(frame_id)]
        except ValueError:
            raise FrameNotInWindow(f"frame {frame_id} is not in window {self.frame_ids}") from None


def solve_window(problem: WindowProblem) -> WindowSolution:
    """Levenberg-Marquardt over all window poses and landmarks."""
    st = problem.settings
    R, t = problem._state(problem.poses)
    L = problem.landmarks.copy()
    ev = problem._evaluate(R, t, L)
    cost = ev["costs"]["total"]
    initial = cost
    history = [cost]
    mu = st.damping_init
    converged = False
    it = 0
    while it < st.max_iterations:
        it += 1
        Hpp, gp, Hll, gl, Hpl = problem._linearize(R, t, L, ev)
        grad_inf = max(np.abs(gp).max(initial=0.0), np.abs(gl).max(initial=0.0))
        if grad_inf < st.gradient_tol:
            converged = True
            it -= 1
            break
        x_norm = math.sqrt(float(np.sum(t * t)) + float(np.sum(L * L)))
        accepted = False
        while not accepted:
            S, s, Hll_inv = problem.reduced_system(Hpp, gp, Hll, gl, Hpl, damping=mu)
            try:
                dp = -np.linalg.solve(S, s)
            except np.linalg.LinAlgError:
                mu *= st.damping_up
                if mu > st.damping_max:
                    raise SolverDiverged("damped system stayed singular") from None
                continue
            dl = problem.back_substitute(dp, gl, Hpl, Hll_inv)
            step = math.sqrt(float(dp @ dp) + float(np.sum(dl * dl)))
            if step <= st.step_tol * (x_norm + st.step_tol):
                converged = True
                break
            R_new, t_new, L_new = problem._retract(R, t, dp, dl, L)
            try:
                ev_new = problem._evaluate(R_new, t_new, L_new)
                new_cost = ev_new["costs"]["total"]
            except PointBehindCamera:
                new_cost = math.inf
            if new_cost <= cost:
                accepted = True
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                R, t, L, ev, cost = R_new, t_new, L_new, ev_new, new_cost
                history.append(cost)
                mu = max(mu * st.damping_down, 1e-15)
                if rel_change <= st.function_tol:
                    converged = True
            else:
                mu *= st.damping_up
                if mu > st.damping_max:
                    raise SolverDiverged(f"cost increase persists at damping {mu:.3g}")
        if converged:
            break

    joint = problem._covariance(R, t, L, ev)
    out_poses = [Pose._trusted(R[k].copy(), t[k].copy(), joint[6 * k : 6 * k + 6, 6 * k : 6 * k + 6].copy()) for k in range(problem.n_poses)]
    return WindowSolution(
        frame_ids=list(problem.frame_ids),
        poses=out_poses,
        landmarks=L,
        landmark_ids=np.asarray(problem.landmark_ids),
        joint_covariance=joint,
        initial_cost=initial,
        cost=cost,
        breakdown=dict(ev["costs"]),
        converged=converged,
        iterations=it,
        cost_history=history,
        n_sun_terms=int(len(problem.sun_pose)),
        n_observations=int(len(problem.obs_y)),
        warnings=list(problem.warnings),
    )


def propagate_prior(solution: WindowSolution, next_window_first_frame: int) -> Pose:
    """The refined pose of that frame with its marginal covariance."""
    return solution.pose(next_window_first_frame)


def marginalize(H: np.ndarray, b: np.ndarray, keep: Sequence[int]):
    """Schur complement of an information system onto the ``keep`` indices."""
    keep = np.asarray(keep)
    drop = np.setdiff1d(np.arange(H.shape[0]), keep)
    Hkk = H[np.ix_(keep, keep)]
    if not len(drop):
        return Hkk, b[keep]
    Hkd = H[np.ix_(keep, drop)]
    Hdd_inv = np.linalg.inv(H[np.ix_(drop, drop)])
    return Hkk - Hkd @ Hdd_inv @ Hkd.T, b[keep] - Hkd @ Hdd_inv @ b[drop]
