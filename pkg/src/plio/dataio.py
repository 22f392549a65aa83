"""Dataset file formats.

imu.csv:   header, then rows t,gx,gy,gz,ax,ay,az (s, rad/s, m/s^2)
lidar.csv: header, then rows frame_id,frame_t,point_t_offset,x,y,z
labels.csv: header, then rows frame_id,point_index,plane_id (tests only)
*.tum:     rows t px py pz qx qy qz qw (quaternion scalar-last)

All ASCII, comma separated for csv, space separated for tum, '.' decimal,
values at 9 significant digits.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DatasetError, IoFailure
from .imu import ImuSample, ImuState
from .mapping import LidarFrame

FMT = "%.9g"


def write_imu_csv(path, samples: list[ImuSample]) -> None:
    rows = np.array([[s.t, *s.gyro, *s.accel] for s in samples]).reshape(-1, 7)
    _write_csv(path, "t,gx,gy,gz,ax,ay,az", rows)


def read_imu_csv(path) -> list[ImuSample]:
    rows = _read_csv(path, 7)
    return [ImuSample(t=r[0], gyro=r[1:4].copy(), accel=r[4:7].copy()) for r in rows]


def write_lidar_csv(path, frames: list[LidarFrame]) -> None:
    chunks = []
    for fid, frame in enumerate(frames):
        if frame.size == 0:
            continue
        block = np.empty((frame.size, 6))
        block[:, 0] = fid
        block[:, 1] = frame.t
        block[:, 2] = frame.t_offset
        block[:, 3:6] = frame.xyz
        chunks.append(block)
    rows = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 6))
    _write_csv(path, "frame_id,frame_t,point_t_offset,x,y,z", rows)


def read_lidar_csv(path, labels_path=None) -> list[LidarFrame]:
    rows = _read_csv(path, 6)
    labels = _read_labels(labels_path) if labels_path is not None else None
    frames = []
    if rows.shape[0] == 0:
        return frames
    ids = rows[:, 0].astype(int)
    for fid in np.unique(ids):
        sel = ids == fid
        block = rows[sel]
        lab = None
        if labels is not None and int(fid) in labels:
            lab = labels[int(fid)]
            if len(lab) != block.shape[0]:
                raise DatasetError(f"labels for frame {fid} do not match point count")
        frames.append(
            LidarFrame(
                t=float(block[0, 1]),
                xyz=block[:, 3:6].copy(),
                t_offset=block[:, 2].copy(),
                labels=lab,
            )
        )
    frames.sort(key=lambda f: f.t)
    return frames


def write_labels_csv(path, frames: list[LidarFrame]) -> None:
    chunks = []
    for fid, frame in enumerate(frames):
        if frame.size == 0 or frame.labels is None:
            continue
        block = np.empty((frame.size, 3))
        block[:, 0] = fid
        block[:, 1] = np.arange(frame.size)
        block[:, 2] = frame.labels
        chunks.append(block)
    rows = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    _write_csv(path, "frame_id,point_index,plane_id", rows)


def _read_labels(path) -> dict[int, np.ndarray]:
    rows = _read_csv(path, 3)
    out: dict[int, np.ndarray] = {}
    ids = rows[:, 0].astype(int)
    for fid in np.unique(ids):
        block = rows[ids == fid]
        order = np.argsort(block[:, 1])
        out[int(fid)] = block[order, 2].astype(np.int64)
    return out


def write_tum(path, t: np.ndarray, p: np.ndarray, q_wxyz: np.ndarray) -> None:
    """TUM trajectory rows; quaternions are stored scalar-last."""
    rows = np.column_stack([t, p, q_wxyz[:, 1:4], q_wxyz[:, 0]])
    try:
        with open(path, "w") as fh:
            for r in rows:
                fh.write(" ".join(FMT % v for v in r) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from None


def read_tum(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (t, p, q) with scalar-first quaternions."""
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from None
    rows = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{path}:{lineno}: expected 8 fields")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad number") from None
    if not rows:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4))
    arr = np.array(rows)
    q = np.column_stack([arr[:, 7], arr[:, 4], arr[:, 5], arr[:, 6]])
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return arr[:, 0], arr[:, 1:4], q


def write_dataset(imu, frames, ground_truth: list[ImuState], directory) -> list[Path]:
    """Emit imu.csv, lidar.csv, groundtruth.tum (and labels.csv when the
    frames are labeled) into a directory."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {d}: {e}") from None
    write_imu_csv(d / "imu.csv", imu)
    write_lidar_csv(d / "lidar.csv", frames)
    out = [d / "imu.csv", d / "lidar.csv", d / "groundtruth.tum"]
    t = np.array([s.t for s in ground_truth])
    p = np.array([s.p for s in ground_truth]).reshape(-1, 3)
    q = np.array([s.q for s in ground_truth]).reshape(-1, 4)
    write_tum(d / "groundtruth.tum", t, p, q)
    if any(f.labels is not None for f in frames):
        write_labels_csv(d / "labels.csv", frames)
        out.append(d / "labels.csv")
    return out


def _write_csv(path, header: str, rows: np.ndarray) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for r in rows:
                fh.write(",".join(FMT % v for v in r) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from None


def _read_csv(path, n_cols: int) -> np.ndarray:
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from None
    lines = raw.splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise DatasetError(f"{path}:{lineno}: expected {n_cols} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad number") from None
    return np.array(rows) if rows else np.zeros((0, n_cols))
