"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that the terminal summary prints (see conftest.py)."""

import contextlib
import hashlib
import io
import logging
import math
from datetime import datetime, timedelta, timezone

import numpy as np

from acceptance_log import criterion
from helpers import K, random_window, two_frame_tracks, window_jacobian_errors
from oracles import central_diff, noaa_solar_position, rel_err
from test_dropout_net import _numeric_grads
import test_window_ba as window_tests
from sunvo.camera import DEFAULT_NOISE, project, projection_jacobians
from sunvo.cli import main
from sunvo.dropout_net import DropoutNetwork, MCConfig, make_shadow_task, mc_measurements, train_toy_network
from sunvo.ephemeris import GeodeticAnchor, azzen_to_vec, solar_position, vec_to_azzen
from sunvo.evaluation import sun_errors, trajectory_errors
from sunvo.frontend import RansacConfig, SyntheticSceneConfig, TrajectorySpec, generate_scene, ransac_frame_alignment
from sunvo.pipeline import PipelineConfig, relative_motions, run_pipeline, select_sun
from sunvo.se3 import compose, exp, inverse, log, random_pose
from sunvo.sun_sensing import SunMeasurement, cosine_loss, euclidean_half_sq_loss, mc_covariance_azzen, mc_mean
from sunvo.window_ba import solve_window

ANCHOR = GeodeticAnchor(49.01, 8.41, "2011-09-26T11:00:00Z")


def _units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_criterion_01_geometry():
    with criterion(1, "exp/log round trip and analytic Jacobians", limit_s=10.0) as info:
        rng = np.random.default_rng(100)
        worst = 0.0
        for _ in range(10_000):
            axis = rng.normal(size=3)
            phi = axis / np.linalg.norm(axis) * rng.uniform(0.0, math.pi - 0.1)
            xi = np.r_[phi, rng.normal(scale=10.0, size=3)]
            worst = max(worst, float(np.abs(log(exp(xi)) - xi).max()))
        info["roundtrip_max"] = f"{worst:.1e}"
        assert worst < 1e-9

        cam = 0.0
        for _ in range(100):
            T = random_pose(rng, 1.0, 2.0)
            pc = np.array([rng.uniform(-5, 5), rng.uniform(-3, 3), rng.uniform(3, 40)])
            p0 = T.rotation.T @ (pc - T.translation)
            Jp, Jl = projection_jacobians(K, T, p0)
            nJp = central_diff(lambda d: project(K, _transform(exp(d), T, p0)), np.zeros(6))
            nJl = central_diff(lambda q: project(K, T.rotation @ q + T.translation), p0)
            cam = max(cam, rel_err(Jp, nJp), rel_err(Jl, nJl))
        gaps = {"reprojection": 0.0, "prior": 0.0, "sun": 0.0}
        for _ in range(100):
            for k, v in window_jacobian_errors(random_window(rng, n_landmarks=3)).items():
                gaps[k] = max(gaps[k], v)
        info["camera"] = f"{cam:.1e}"
        info.update({k: f"{v:.1e}" for k, v in gaps.items()})
        assert cam < 1e-5 and max(gaps.values()) < 1e-5


def _transform(D, T, p):
    TT = compose(D, T)
    return TT.rotation @ p + TT.translation


def test_criterion_02_loss_identity():
    with criterion(2, "half squared chord equals cosine loss") as info:
        rng = np.random.default_rng(200)
        a, b = _units(rng, 10_000), _units(rng, 10_000)
        gap = float(np.abs(euclidean_half_sq_loss(a, b) - cosine_loss(a, b)).max())
        info["max_gap"] = f"{gap:.1e}"
        assert gap < 1e-12


def test_criterion_03_mc_moments():
    with criterion(3, "MC mean and covariance recovery", limit_s=5.0) as info:
        rng = np.random.default_rng(300)
        mean, sd = np.array([1.0, 0.5]), np.array([0.05, 0.1])
        v = azzen_to_vec(mean + rng.normal(size=(100_000, 2)) * sd)
        m = vec_to_azzen(mc_mean(v))
        C = mc_covariance_azzen(v, 0.0)
        dmean = float(np.degrees(np.abs(m - mean)).max())
        # the reference is the sample covariance of the drawn angles
        cov_rel = float(np.abs(np.diag(C) / sd**2 - 1.0).max())
        info["mean_err_deg"] = round(dmean, 4)
        info["cov_rel"] = round(cov_rel, 4)
        assert dmean < 0.2 and cov_rel < 0.05
        assert abs(C[0, 1]) < 0.05 * sd[0] * sd[1]
        same = np.tile(v[0], (25, 1))
        floor = mc_covariance_azzen(same)
        info["floor_exact"] = bool(np.array_equal(floor, 0.015 * np.eye(2)))
        assert info["floor_exact"]


def test_criterion_04_anees_calibration():
    with criterion(4, "ANEES of self-consistent sun errors") as info:
        rng = np.random.default_rng(400)
        n = 5000
        truth = np.column_stack([rng.uniform(0.4, 2.7, n), rng.uniform(-math.pi, math.pi, n)])
        covs = []
        for _ in range(n):
            Q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
            covs.append(Q @ np.diag(rng.uniform(1e-4, 4e-3, 2)) @ Q.T)
        covs = np.array(covs)
        err = np.einsum("nij,nj->ni", np.linalg.cholesky(covs), rng.normal(size=(n, 2)))
        S = azzen_to_vec(truth + err)
        gt = azzen_to_vec(truth)
        meas = [SunMeasurement(i, S[i], covs[i]) for i in range(n)]
        a1 = sun_errors(meas, gt).anees
        a2 = sun_errors([SunMeasurement(i, S[i], 2.0 * covs[i]) for i in range(n)], gt).anees
        info["anees"] = round(a1, 4)
        info["ratio_x2"] = round(a2 / a1, 4)
        assert 0.9 <= a1 <= 1.1
        assert abs(a2 / a1 - 0.5) <= 0.05 * 0.5


def test_criterion_05_ephemeris():
    with criterion(5, "ephemeris against the NOAA-style oracle") as info:
        rng = np.random.default_rng(500)
        t0 = datetime(1990, 1, 1, tzinfo=timezone.utc)
        worst = 0.0
        for _ in range(20):
            when = t0 + timedelta(seconds=float(rng.uniform(0, 40 * 365.25 * 86400)))
            lat, lon = rng.uniform(-80, 80), rng.uniform(-180, 180)
            z, a = noaa_solar_position(lat, lon, when)
            sp = solar_position(GeodeticAnchor(lat, lon, when))
            dz = abs(math.degrees(sp.zenith) - z)
            da = abs((math.degrees(sp.azimuth) - a + 180.0) % 360.0 - 180.0)
            worst = max(worst, dz, da)
        info["max_err_deg"] = f"{worst:.2e}"
        assert worst < 0.2


def test_criterion_06_frontend():
    with criterion(6, "frontend exactness and RANSAC recall", limit_s=30.0) as info:
        ds = generate_scene(SyntheticSceneConfig(trajectory=TrajectorySpec(n_frames=100), n_landmarks=300, seed=0), ANCHOR)
        worst = 0.0
        for m in relative_motions(ds, RansacConfig(iterations=50)):
            truth = compose(ds.gt_poses[m.frame + 1], inverse(ds.gt_poses[m.frame]))
            worst = max(worst, float(np.abs(m.pose.matrix() - truth.matrix()).max()))
        info["noiseless_max"] = f"{worst:.1e}"
        assert worst < 1e-9
        found = total = 0
        per_seed = []
        for seed in range(100):
            tracks, _, out = two_frame_tracks(seed, outlier_fraction=0.3, pixel_noise=1.0)
            _, inl = ransac_frame_alignment(tracks, K, 0, 1, RansacConfig.for_noise(DEFAULT_NOISE, seed=seed))
            true_inl = set(np.flatnonzero(~out).tolist())
            hit = len(inl & true_inl)
            found, total = found + hit, total + len(true_inl)
            per_seed.append(hit / len(true_inl))
        info["recall"] = round(found / total, 4)
        info["worst_seed"] = round(min(per_seed), 4)
        assert found / total >= 0.95


def test_criterion_07_solver():
    with criterion(7, "solver correctness") as info:
        ds = generate_scene(SyntheticSceneConfig(trajectory=TrajectorySpec(n_frames=6), n_landmarks=300, seed=2), ANCHOR)
        sol = solve_window(window_tests.gt_window(ds, [0, 1, 2], sun=True))
        info["perfect_cost"] = f"{sol.cost:.1e}"
        info["perfect_iters"] = sol.iterations
        assert sol.cost < 1e-12 and sol.iterations <= 2
        window_tests.test_sliding_window_matches_batch_on_linear_gaussian_chain()
        info["batch_vs_sliding"] = "ok"
        scene = generate_scene(
            SyntheticSceneConfig(trajectory=TrajectorySpec(n_frames=100), n_landmarks=500, seed=7, pixel_noise=1.0,
                                 outlier_fraction=0.05, yaw_rate_bias=1e-3), ANCHOR)
        cfg = PipelineConfig(ransac=RansacConfig.for_noise(scene.observation_noise, iterations=50), max_landmarks=30)
        res = run_pipeline(scene, select_sun(scene, "simulated", 10.0, 5, 7), cfg)
        steps = sum(max(len(w["cost_history"]) - 1, 0) for w in res.windows)
        info["windows"] = len(res.windows)
        info["accepted_steps"] = steps
        assert steps > len(res.windows)
        assert all(b <= a for w in res.windows for a, b in zip(w["cost_history"], w["cost_history"][1:]))


def _rot_trans(res, ds):
    r = trajectory_errors(res.poses, ds.gt_poses)
    return r.rot_armse, r.trans_armse


def test_criterion_08_fusion():
    with criterion(8, "sun fusion reduces drift", limit_s=300.0) as info:
        logging.disable(logging.WARNING)
        try:
            totals = {}
            for seed in range(20):
                ds = generate_scene(SyntheticSceneConfig(trajectory=TrajectorySpec(n_frames=500), n_landmarks=1500, seed=seed,
                                                         pixel_noise=2.0, yaw_rate_bias=1e-3), ANCHOR)
                cfg = PipelineConfig(ransac=RansacConfig.for_noise(ds.observation_noise, iterations=25), max_landmarks=20)
                motions = relative_motions(ds, cfg.ransac)
                for name, target in (("none", None), (0, 0.0), (10, 10.0), (20, 20.0), (30, 30.0)):
                    sun = None if target is None else select_sun(ds, "simulated", target, 10, seed)
                    totals.setdefault(name, []).append(_rot_trans(run_pipeline(ds, sun, cfg, motions), ds))
        finally:
            logging.disable(logging.NOTSET)
        mean = {k: np.mean(v, axis=0) for k, v in totals.items()}
        rot = [mean[k][0] for k in (0, 10, 20, 30, "none")]
        red_rot = 1.0 - mean[0][0] / mean["none"][0]
        red_tr = 1.0 - mean[0][1] / mean["none"][1]
        info["rot_armse"] = "/".join(f"{r:.4f}" for r in rot)
        info["rot_red_pct"] = round(100 * red_rot, 1)
        info["trans_red_pct"] = round(100 * red_tr, 1)
        assert all(a < b for a, b in zip(rot, rot[1:]))
        assert red_rot >= 0.30 and red_tr >= 0.20


def test_criterion_09_toy_network():
    with criterion(9, "toy dropout network end to end", limit_s=120.0) as info:
        X, S = make_shadow_task(2000, 0)
        Xt, St = make_shadow_task(500, 1)
        net = train_toy_network(X, S, DropoutNetwork.create([8, 64, 64, 3], dropout=0.05, seed=0), epochs=40)
        rep = sun_errors(mc_measurements(net, Xt, MCConfig(25, 0), 0.015), St)
        med = float(np.median(rep.vector_error))
        info["median_deg"] = round(med, 2)
        info["anees"] = round(rep.anees, 3)
        assert med < 15.0 and 0.5 <= rep.anees <= 2.0

        rng = np.random.default_rng(900)
        small = DropoutNetwork.create([5, 7, 3], dropout=0.3, seed=1)
        for layer in small.layers:
            layer.bias = rng.normal(scale=0.5, size=layer.bias.shape)
        Xs, Ss = make_shadow_task(6, 2, dim=5)
        masks = small.sample_masks(rng, len(Xs))
        _, grads = small.loss_and_grads(Xs, Ss, 1e-3, masks)
        num = _numeric_grads(small, Xs, Ss, 1e-3, masks)
        g = max(rel_err(a, b) for pa, pb in zip(grads, num) for a, b in zip(pa, pb))
        info["grad_rel"] = f"{g:.1e}"
        assert g < 1e-4


COMMANDS = [
    ["simulate", "--out", "ds", "--n-frames", "15", "--n-landmarks", "150", "--pixel-noise", "1.0", "--yaw-rate-bias", "1e-3"],
    ["sun-sim", "--dataset", "ds", "--target-deg", "0", "10", "--every-n", "3", "--seed", "4"],
    ["vo", "--dataset", "ds", "--out", "vo", "--ransac-iterations", "30", "--sun", "file", "ds/sun_gt10.csv"],
    ["vo", "--dataset", "ds", "--out", "vo_sim", "--ransac-iterations", "30", "--sun", "simulated", "--sun-target-deg", "5"],
    ["eval", "--gt", "ds", "--est", "vo/trajectory.csv", "--est", "vo_sim/trajectory.csv", "--compare", "--sun", "ds/sun_gt10.csv", "--out", "ev"],
    ["sun-train", "--n-train", "200", "--n-test", "50", "--epochs", "2", "--out", "m"],
    ["ephemeris", "--lat", "49.011", "--lon", "8.4164", "--utc", "2011-09-26T11:00:00Z"],
]


def _run_all(root, monkeypatch):
    """Run every command in ``root``; digest of each command's stdout and of
    every file it left behind."""
    digests = {}
    monkeypatch.chdir(root)
    for argv in COMMANDS:
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(list(argv))
        assert code in (0, 2), (argv, code)
        digests["stdout:" + " ".join(argv[:4])] = hashlib.sha256(buf.getvalue().encode()).hexdigest()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            digests[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return digests


def test_criterion_10_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("SUNVO_OUTPUT_ROOT", raising=False)
    with criterion(10, "CLI reruns are byte-identical") as info:
        runs = []
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            runs.append(_run_all(tmp_path / name, monkeypatch))
        differ = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
        info["artifacts"] = len(runs[0])
        info["commands"] = len({a[0] for a in COMMANDS})
        info["differ"] = differ or "none"
        assert runs[0].keys() == runs[1].keys() and not differ
