import hashlib
import json
import subprocess
import sys

import pytest

from sunvo.cli import main


def _digest(d):
    return {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("SUNVO_OUTPUT_ROOT", raising=False)
    return tmp_path


def _simulate(out="ds", *extra):
    return main(["simulate", "--out", out, "--n-frames", "20", "--n-landmarks", "200", "--pixel-noise", "0.5", *extra])


def test_simulate_writes_dataset(work, capsys):
    assert _simulate() == 0
    names = sorted(p.name for p in (work / "ds").iterdir())
    assert names == ["gt_poses.csv", "manifest.json", "scene.json", "tracks.csv"]
    assert json.loads(capsys.readouterr().out)["frames"] == 20


def test_config_file_and_flag_precedence(work):
    (work / "c.yaml").write_text("n_frames: 12\nn_landmarks: 150\nseed: 3\nscene:\n  pixel_noise: 0.2\n")
    assert main(["simulate", "--config", "c.yaml", "--out", "a"]) == 0
    assert main(["simulate", "--config", "c.yaml", "--out", "b", "--n-frames", "15"]) == 0
    scene_a = json.loads((work / "a" / "scene.json").read_text())
    scene_b = json.loads((work / "b" / "scene.json").read_text())
    assert scene_a["trajectory"]["n_frames"] == 12 and scene_a["pixel_noise"] == 0.2 and scene_a["seed"] == 3
    assert scene_b["trajectory"]["n_frames"] == 15


def test_output_root_env(work, monkeypatch):
    (work / "root").mkdir()
    monkeypatch.setenv("SUNVO_OUTPUT_ROOT", str(work / "root"))
    assert _simulate("ds") == 0
    assert (work / "root" / "ds" / "tracks.csv").is_file()
    monkeypatch.setenv("SUNVO_OUTPUT_ROOT", str(work / "missing"))
    assert _simulate("ds") == 3


def test_sun_sim_vo_and_eval(work, capsys):
    assert _simulate() == 0
    assert main(["sun-sim", "--dataset", "ds", "--target-deg", "0", "10", "--every-n", "5"]) == 0
    rows = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert [r["rows"] for r in rows] == [4, 4]
    assert rows[0]["mean_vector_error_deg"] == 0.0
    assert main(["vo", "--dataset", "ds", "--out", "none", "--ransac-iterations", "30"]) in (0, 2)
    assert main(["vo", "--dataset", "ds", "--out", "sun", "--ransac-iterations", "30", "--sun", "file", "ds/sun_gt10.csv"]) in (0, 2)
    report = json.loads((work / "sun" / "report.json").read_text())
    assert report["sun_measurements"] == 4 and report["sun_terms"] > 0
    capsys.readouterr()
    code = main(["eval", "--gt", "ds", "--est", "none/trajectory.csv", "--est", "sun/trajectory.csv", "--compare", "--sun", "ds/sun_gt10.csv"])
    assert code == 0
    ev = json.loads((work / "eval" / "eval.json").read_text())
    assert len(ev["runs"]) == 2 and "rot_armse" in ev["improvement_pct"][0] and ev["sun"]["n"] == 4
    assert (work / "eval" / "eval.csv").read_text().startswith("metric,frame_id,value\n")


def test_eval_against_pose_file(work):
    assert _simulate() == 0
    assert main(["eval", "--gt", "ds/gt_poses.csv", "--est", "ds/gt_poses.csv"]) == 0
    ev = json.loads((work / "eval" / "eval.json").read_text())
    assert ev["runs"][0]["trans_armse"] == 0.0


def test_ephemeris(capsys):
    assert main(["ephemeris", "--lat", "49.011", "--lon", "8.4164", "--utc", "2011-09-26T11:00:00Z"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["zenith_deg"] - 50.36) < 0.05 and abs(out["azimuth_deg"] - 174.22) < 0.05


def test_sun_train(work):
    args = ["sun-train", "--n-train", "400", "--n-test", "100", "--epochs", "5", "--out", "m"]
    assert main(args) in (0, 2)
    rep = json.loads((work / "m" / "report.json").read_text())
    assert rep["mc_samples"] == 25 and rep["n_test"] == 100
    assert (work / "m" / "weights.json").is_file()
    assert main(args + ["--input-dim", "5"]) == 3  # DimensionMismatch is a runtime failure


@pytest.mark.parametrize(
    "argv, code, needle",
    [
        (["vo", "--dataset", "nowhere"], 3, "nowhere"),
        (["vo", "--bogus"], 1, "unrecognized"),
        (["ephemeris", "--lat", "95", "--lon", "0", "--utc", "2011-09-26T11:00:00Z"], 1, "latitude"),
        (["ephemeris", "--lat", "0", "--lon", "0"], 1, "--utc"),
        (["eval", "--gt", "x"], 1, "--est"),
        ([], 1, ""),
    ],
)
def test_exit_codes(work, capsys, argv, code, needle):
    assert main(argv) == code
    assert needle in capsys.readouterr().err


def test_invalid_window_size_and_corrupt_input(work, capsys):
    assert _simulate() == 0
    assert main(["vo", "--dataset", "ds", "--window-size", "1"]) == 1
    assert "window_size" in capsys.readouterr().err
    tracks = work / "ds" / "tracks.csv"
    lines = tracks.read_text().splitlines()
    lines[3] = "0,1,abc,2,3"
    tracks.write_text("\n".join(lines) + "\n")
    assert main(["vo", "--dataset", "ds"]) == 3
    assert "tracks.csv:4" in capsys.readouterr().err
    (work / "bad.yaml").write_text("a: 1\nb: [1, 2\n")
    assert main(["simulate", "--config", "bad.yaml"]) == 1
    assert "bad.yaml:3" in capsys.readouterr().err


def test_reruns_are_byte_identical(work, monkeypatch):
    # same commands, same relative paths, two separate working directories
    outs = []
    for run in ("r1", "r2"):
        (work / run).mkdir()
        monkeypatch.chdir(work / run)
        assert main(["simulate", "--out", "ds", "--n-frames", "15", "--n-landmarks", "150", "--pixel-noise", "1.0", "--yaw-rate-bias", "1e-3"]) == 0
        assert main(["sun-sim", "--dataset", "ds", "--target-deg", "10", "--every-n", "3", "--seed", "4"]) == 0
        assert main(["vo", "--dataset", "ds", "--out", "vo", "--ransac-iterations", "30", "--sun", "file", "ds/sun_gt10.csv"]) in (0, 2)
        assert main(["eval", "--gt", "ds", "--est", "vo/trajectory.csv", "--out", "ev"]) == 0
        assert main(["sun-train", "--n-train", "200", "--n-test", "50", "--epochs", "2", "--out", "m"]) in (0, 2)
        outs.append(_digest(work / run))
    assert outs[0] == outs[1]
    assert len(outs[0]) >= 12


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "sunvo.cli", "ephemeris", "--lat", "0", "--lon", "0", "--utc", "2020-03-20T12:07:00Z"],
        capture_output=True, text=True, check=True, cwd=tmp_path,
    )
    assert json.loads(out.stdout)["zenith_deg"] < 0.5
