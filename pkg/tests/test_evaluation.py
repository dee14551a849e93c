import math

import numpy as np
import pytest

from sunvo.errors import LengthMismatch
from sunvo.evaluation import (
    compare_runs,
    crmse_series,
    improvement,
    read_long_csv,
    sun_errors,
    trajectory_errors,
    write_long_csv,
)
from sunvo.se3 import Pose, exp, random_pose, so3_exp
from sunvo.sun_sensing import SunMeasurement


def _traj(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return [random_pose(rng, 0.5) for _ in range(n)]


def test_identical_trajectories_have_zero_error():
    gt = _traj()
    rep = trajectory_errors(gt, gt)
    assert rep.trans_armse == 0.0 and rep.rot_armse == 0.0 and rep.trans_armse_en == 0.0
    np.testing.assert_array_equal(rep.crmse_trans, 0.0)


def test_known_offsets():
    gt = _traj(4)
    # shift every camera centre by (3, 4, 12) m: norm 13, EN norm 5
    est = [Pose(T.rotation, T.translation - T.rotation @ np.array([3.0, 4.0, 12.0])) for T in gt]
    rep = trajectory_errors(est, gt)
    assert rep.trans_armse == pytest.approx(13.0)
    assert rep.trans_armse_en == pytest.approx(5.0)
    rot = [Pose(T.rotation @ so3_exp([0.0, 0.0, 0.1 * (k + 1)]), T.translation) for k, T in enumerate(gt)]
    r = trajectory_errors(rot, gt)
    assert r.rot_armse == pytest.approx(math.sqrt(np.mean((0.1 * np.arange(1, 5)) ** 2)))


def test_crmse_is_running_rms():
    gt = _traj(5)
    est = [exp([0, 0, 0, 0.0, 0.0, float(k)]) @ T for k, T in enumerate(gt)]
    c = crmse_series(est, gt)["trans"]
    norms = np.array([np.linalg.norm(e.center() - g.center()) for e, g in zip(est, gt)])
    np.testing.assert_allclose(c, [math.sqrt(np.mean(norms[: t + 1] ** 2)) for t in range(5)])
    assert c[-1] == pytest.approx(trajectory_errors(est, gt).trans_armse)


def test_length_mismatch():
    gt = _traj(3)
    with pytest.raises(LengthMismatch):
        trajectory_errors(gt[:2], gt)
    with pytest.raises(LengthMismatch):
        trajectory_errors([], [])


def test_improvement_percentages():
    assert improvement(2.0, 1.0) == 50.0
    assert improvement(1.0, 1.5) == -50.0
    out = compare_runs({"trans_armse": 10.0, "rot_armse": 0.2}, {"trans_armse": 8.0, "rot_armse": 0.1})
    assert out == {"trans_armse": pytest.approx(20.0), "rot_armse": pytest.approx(50.0)}


def _meas(frame, zen, az, cov=0.015):
    s = np.array([math.sin(zen) * math.sin(az), -math.cos(zen), math.sin(zen) * math.cos(az)])
    return SunMeasurement(frame, s, cov * np.eye(2))


def test_sun_errors_signed_and_wrapped():
    truth = [_meas(0, 1.0, math.radians(179.0)).direction, _meas(1, 1.0, 0.5).direction]
    meas = [_meas(0, 1.0, math.radians(-179.0)), _meas(1, 1.1, 0.5)]
    rep = sun_errors(meas, truth)
    np.testing.assert_allclose(rep.azimuth_error, [2.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(rep.zenith_error, [0.0, math.degrees(0.1)], atol=1e-9)
    np.testing.assert_allclose(rep.nees[1], 0.5 * 0.1**2 / 0.015)
    assert rep.vector_error[1] == pytest.approx(math.degrees(0.1))
    assert rep.summary["zenith"]["mean"] == pytest.approx(math.degrees(0.05))


def test_anees_gate_excludes_gross_errors():
    truth = [_meas(0, 1.0, 0.0).direction] * 2
    rep = sun_errors([_meas(0, 1.0, 0.0), _meas(1, 1.0, math.pi)], truth)
    assert rep.anees_count == 1 and rep.anees == 0.0


def test_long_csv_roundtrip(tmp_path):
    gt = _traj(3)
    est = [exp([0.01, 0, 0, 0.1, 0, 0]) @ T for T in gt]
    rep = trajectory_errors(est, gt, frame_ids=[5, 6, 7])
    write_long_csv(tmp_path / "e.csv", rep)
    rows = read_long_csv(tmp_path / "e.csv")
    assert len(rows) == 3 * 7
    got = {(m, k): v for m, k, v in rows}
    assert got[("crmse_rot", 7)] == rep.crmse_rot[2]
    assert got[("trans_err_norm", 5)] == pytest.approx(np.linalg.norm(rep.translation_errors[0]))
