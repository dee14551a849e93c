"""Sequence container and the on-disk exchange formats.

Dataset directory::

    manifest.json   anchor, intrinsics, frame timestamps, observation noise
    gt_poses.csv    frame_id, 12 row-major values of the 3x4 matrix T_k0
    tracks.csv      frame_id,track_id,u,v,d
    sun.csv         frame_id,sx,sy,sz,c00,c01,c10,c11   (optional)

``T_k0`` maps base-frame (ENU) points into camera ``k``. All floats are
written with 17 significant digits so every file round-trips exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .camera import DEFAULT_NOISE, StereoIntrinsics
from .ephemeris import GeodeticAnchor
from .errors import DataFileError, ParseError
from .se3 import Pose
from .sun_sensing import SunMeasurement

FORMAT_VERSION = "sunvo-dataset/1"
TRACK_HEADER = ["frame_id", "track_id", "u", "v", "d"]
SUN_HEADER = ["frame_id", "sx", "sy", "sz", "c00", "c01", "c10", "c11"]
POSE_HEADER = ["frame_id"] + [f"T{r}{c}" for r in range(3) for c in range(4)]
_TRIU = np.triu_indices(6)
TRAJ_HEADER = POSE_HEADER + [f"C{r}{c}" for r, c in zip(*_TRIU)]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


class TrackTable:
    """Stereo observations grouped by frame.

    Stored as parallel arrays; ``frame(k)`` returns ``(track_ids, Y)`` with
    ``Y`` of shape ``(n, 3)`` holding ``(u, v, d)``.
    """

    def __init__(self, frame_ids, track_ids, Y):
        self.frame_ids = np.asarray(frame_ids, dtype=np.int64)
        self.track_ids = np.asarray(track_ids, dtype=np.int64)
        self.Y = np.asarray(Y, dtype=float).reshape(-1, 3)
        order = np.lexsort((self.track_ids, self.frame_ids))
        self.frame_ids, self.track_ids, self.Y = self.frame_ids[order], self.track_ids[order], self.Y[order]
        self._index: Dict[int, slice] = {}
        if len(self.frame_ids):
            bounds = np.flatnonzero(np.diff(self.frame_ids)) + 1
            starts = np.concatenate([[0], bounds])
            ends = np.concatenate([bounds, [len(self.frame_ids)]])
            for s, e in zip(starts, ends):
                self._index[int(self.frame_ids[s])] = slice(int(s), int(e))
        for k, sl in self._index.items():
            ids = self.track_ids[sl]
            if np.any(np.diff(ids) == 0):
                raise ValueError(f"duplicate track id in frame {k}")

    def __len__(self) -> int:
        return len(self.frame_ids)

    def frames(self) -> List[int]:
        return sorted(self._index)

    def frame(self, k: int):
        sl = self._index.get(int(k))
        if sl is None:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
        return self.track_ids[sl], self.Y[sl]

    def shared(self, a: int, b: int):
        """Tracks seen in both frames: ``(ids, Y_a, Y_b)``."""
        ia, Ya = self.frame(a)
        ib, Yb = self.frame(b)
        ids, xa, xb = np.intersect1d(ia, ib, assume_unique=True, return_indices=True)
        return ids, Ya[xa], Yb[xb]

    def drop_singletons(self) -> "TrackTable":
        ids, counts = np.unique(self.track_ids, return_counts=True)
        keep = np.isin(self.track_ids, ids[counts >= 2])
        return TrackTable(self.frame_ids[keep], self.track_ids[keep], self.Y[keep])


@dataclass(eq=False)
class SequenceDataset:
    anchor: GeodeticAnchor
    intrinsics: StereoIntrinsics
    timestamps: np.ndarray  # seconds since anchor.timestamp, one per frame
    gt_poses: List[Pose]
    tracks: TrackTable
    observation_noise: np.ndarray = field(default_factory=lambda: DEFAULT_NOISE.copy())
    image_size: tuple = (1242, 375)
    sun: Optional[List[SunMeasurement]] = None
    # simulation-only extras, never written to disk
    landmarks: Optional[np.ndarray] = None
    outlier_mask: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)


# -- writers ----------------------------------------------------------------


def _write_rows(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_poses(path, frame_ids, poses: Sequence[Pose]) -> None:
    rows = [[str(int(k))] + [fmt(x) for x in T.matrix3x4().ravel()] for k, T in zip(frame_ids, poses)]
    _write_rows(Path(path), POSE_HEADER, rows)


def write_trajectory(path, frame_ids, poses: Sequence[Pose]) -> None:
    rows = []
    for k, T in zip(frame_ids, poses):
        cov = T.covariance[_TRIU] if T.covariance is not None else np.full(21, np.nan)
        rows.append([str(int(k))] + [fmt(x) for x in T.matrix3x4().ravel()] + [fmt(x) for x in cov])
    _write_rows(Path(path), TRAJ_HEADER, rows)


def write_tracks(path, tracks: TrackTable) -> None:
    rows = [
        [str(int(k)), str(int(j)), fmt(y[0]), fmt(y[1]), fmt(y[2])]
        for k, j, y in zip(tracks.frame_ids, tracks.track_ids, tracks.Y)
    ]
    _write_rows(Path(path), TRACK_HEADER, rows)


def write_sun(path, measurements: Sequence[SunMeasurement]) -> None:
    rows = [
        [str(int(m.frame_id))] + [fmt(x) for x in m.direction] + [fmt(x) for x in m.covariance.ravel()]
        for m in measurements
    ]
    _write_rows(Path(path), SUN_HEADER, rows)


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_dataset(directory, ds: SequenceDataset) -> Path:
    d = Path(directory)
    if not d.parent.exists():
        raise DataFileError(f"parent directory does not exist: {d.parent}")
    d.mkdir(exist_ok=True)
    manifest = {
        "format": FORMAT_VERSION,
        "anchor": ds.anchor.to_dict(),
        "intrinsics": ds.intrinsics.to_dict(),
        "image_size": [int(ds.image_size[0]), int(ds.image_size[1])],
        "observation_noise": [[float(x) for x in row] for row in ds.observation_noise],
        "timestamps": [float(t) for t in ds.timestamps],
    }
    write_json(d / "manifest.json", manifest)
    write_poses(d / "gt_poses.csv", range(ds.n_frames), ds.gt_poses)
    write_tracks(d / "tracks.csv", ds.tracks)
    if ds.sun is not None:
        write_sun(d / "sun.csv", ds.sun)
    return d


# -- readers ----------------------------------------------------------------


def _read_rows(path, header):
    path = Path(path)
    if not path.is_file():
        raise DataFileError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if [h.strip() for h in first] != header:
            raise ParseError(path, 1, f"expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _int(path, lineno, text):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, lineno, f"not an integer: {text!r}") from None


def _floats(path, lineno, fields):
    try:
        return [float(x) for x in fields]
    except ValueError as exc:
        raise ParseError(path, lineno, str(exc)) from None


def read_poses(path):
    ids, poses = [], []
    for lineno, row in _read_rows(path, POSE_HEADER):
        ids.append(_int(path, lineno, row[0]))
        M = np.array(_floats(path, lineno, row[1:])).reshape(3, 4)
        poses.append(Pose(M[:, :3], M[:, 3]))
    return ids, poses


def read_trajectory(path):
    ids, poses = [], []
    for lineno, row in _read_rows(path, TRAJ_HEADER):
        ids.append(_int(path, lineno, row[0]))
        vals = np.array(_floats(path, lineno, row[1:]))
        M = vals[:12].reshape(3, 4)
        c = vals[12:]
        cov = None
        if not np.all(np.isnan(c)):
            cov = np.zeros((6, 6))
            cov[_TRIU] = c
            cov = cov + np.triu(cov, 1).T
        try:
            poses.append(Pose(M[:, :3], M[:, 3], cov))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return ids, poses


def read_tracks(path) -> TrackTable:
    fr, tr, Y = [], [], []
    for lineno, row in _read_rows(path, TRACK_HEADER):
        fr.append(_int(path, lineno, row[0]))
        tr.append(_int(path, lineno, row[1]))
        y = _floats(path, lineno, row[2:])
        if not y[2] > 0:
            raise ParseError(path, lineno, f"disparity must be positive, got {y[2]}")
        Y.append(y)
    try:
        return TrackTable(fr, tr, np.array(Y).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None


def read_sun(path) -> List[SunMeasurement]:
    out = []
    for lineno, row in _read_rows(path, SUN_HEADER):
        k = _int(path, lineno, row[0])
        v = _floats(path, lineno, row[1:])
        try:
            out.append(SunMeasurement(k, np.array(v[:3]), np.array(v[3:]).reshape(2, 2)))
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return out


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise DataFileError(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None


def read_dataset(directory, sun_file=None) -> SequenceDataset:
    d = Path(directory)
    if not d.is_dir():
        raise DataFileError(f"dataset directory not found: {d}")
    m = read_json(d / "manifest.json")
    try:
        anchor = GeodeticAnchor.from_dict(m["anchor"])
        K = StereoIntrinsics.from_dict(m["intrinsics"])
        timestamps = np.asarray(m["timestamps"], dtype=float)
        noise = np.asarray(m.get("observation_noise", DEFAULT_NOISE), dtype=float)
        size = tuple(m.get("image_size", (1242, 375)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(d / "manifest.json", 0, f"invalid manifest: {exc}") from None
    ids, poses = read_poses(d / "gt_poses.csv")
    if ids != list(range(len(timestamps))):
        raise ParseError(d / "gt_poses.csv", 0, "frame ids must be 0..n-1 matching the manifest timestamps")
    tracks = read_tracks(d / "tracks.csv")
    sun_path = Path(sun_file) if sun_file is not None else d / "sun.csv"
    sun = read_sun(sun_path) if (sun_file is not None or sun_path.is_file()) else None
    return SequenceDataset(anchor, K, timestamps, poses, tracks, noise, size, sun)
