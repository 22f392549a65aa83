"""LiDAR frame handling: de-skew, keyframe maps, voxel filter, k-NN search.

Frames store their points as arrays (one row per return) in the LiDAR frame
at each point's own sample time; de-skew re-expresses all points in the
LiDAR frame at the frame timestamp.  Keyframe point-cloud maps accumulate the
frames since the previous keyframe, projected with the INS prior poses into
the keyframe's own LiDAR frame, then voxel-downsampled.  Searches are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMap, TrajectoryGap
from .imu import PoseTrajectory
from .poses import Pose, compose, inverse, transform, transform_batch
from .rotations import log_map, quat_conj, quat_mul, quats_to_mats

# label given to voxels whose constituent points disagree on the source plane
MIXED_LABEL = -1


@dataclass
class LidarFrame:
    """One scan: frame timestamp, points (N, 3) in the r-frame, per-point
    time offsets (N,) within [0, frame period), optional ground-truth labels."""

    t: float
    xyz: np.ndarray
    t_offset: np.ndarray
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.xyz.shape[0]


@dataclass
class VoxelFilterConfig:
    voxel_size: float = 0.1


@dataclass
class Keyframe:
    """A window node's point-cloud context.

    raw_points are the keyframe's own de-skewed returns; local_map is the
    downsampled accumulation of all frames since the previous keyframe,
    expressed in this keyframe's r-frame, with an exact k-NN index over it.
    """

    t: float
    node_index: int
    raw_points: np.ndarray
    local_map: np.ndarray
    map_labels: np.ndarray | None = None
    spatial_index: cKDTree | None = field(default=None, repr=False)

    def build_index(self) -> None:
        self.spatial_index = cKDTree(self.local_map)


def deskew(frame: LidarFrame, trajectory: PoseTrajectory, extrinsics: Pose) -> LidarFrame:
    """Re-express every point in the r-frame at the frame timestamp.

    Each point is lifted to the world with the interpolated body pose at its
    own sample time and brought back with the pose at frame.t, both through
    the LiDAR-IMU extrinsics.
    """
    if frame.size == 0:
        return frame
    t_end = frame.t + float(frame.t_offset.max())
    if not trajectory.covers(frame.t, t_end):
        raise TrajectoryGap(
            f"trajectory [{trajectory.t[0]:.3f}, {trajectory.t[-1]:.3f}] does not "
            f"cover frame [{frame.t:.3f}, {t_end:.3f}]"
        )
    ts = frame.t + frame.t_offset
    p_b, q_b = trajectory.interpolate(ts)
    # world coordinates of each return at its sample time
    pts_b = transform(extrinsics, frame.xyz)
    pts_w = transform_batch(p_b, q_b, pts_b)
    # back into the r-frame at the frame timestamp
    p0, q0 = trajectory.interpolate(np.array([frame.t]))
    t_w_r0 = compose((p0[0], q0[0]), extrinsics)
    out = transform(inverse(t_w_r0), pts_w)
    return LidarFrame(t=frame.t, xyz=out, t_offset=frame.t_offset.copy(), labels=frame.labels)


def reskew(frame: LidarFrame, trajectory: PoseTrajectory, extrinsics: Pose) -> LidarFrame:
    """Inverse of deskew (points back to their per-sample-time r-frames)."""
    if frame.size == 0:
        return frame
    ts = frame.t + frame.t_offset
    p_b, q_b = trajectory.interpolate(ts)
    p0, q0 = trajectory.interpolate(np.array([frame.t]))
    t_w_r0 = compose((p0[0], q0[0]), extrinsics)
    pts_w = transform(t_w_r0, frame.xyz)
    # per-point inverse transforms
    pts_b = np.einsum("nij,nj->ni", quats_to_mats(q_b).transpose(0, 2, 1), pts_w - p_b)
    out = transform(inverse(extrinsics), pts_b)
    return LidarFrame(t=frame.t, xyz=out, t_offset=frame.t_offset.copy(), labels=frame.labels)


@dataclass
class KeyframeGateConfig:
    translation: float = 0.3
    rotation_deg: float = 10.0
    interval: float = 1.0


def is_new_keyframe(
    last_kf_pose: Pose, current_pose: Pose, elapsed: float, config: KeyframeGateConfig
) -> bool:
    """Trigger on translation, rotation, or elapsed-time thresholds."""
    dp = np.linalg.norm(current_pose[0] - last_kf_pose[0])
    if dp > config.translation:
        return True
    rel = quat_mul(quat_conj(last_kf_pose[1]), current_pose[1])
    if np.degrees(np.linalg.norm(log_map(rel))) > config.rotation_deg:
        return True
    return elapsed > config.interval


def voxel_downsample(
    xyz: np.ndarray, voxel_size: float, labels: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Centroid-per-voxel downsampling.

    Labels, when given, survive only for voxels whose constituent points all
    agree; mixed voxels get MIXED_LABEL.  Output order follows the voxel key
    sort, so the result is deterministic.
    """
    if xyz.shape[0] == 0:
        return xyz.copy(), (labels.copy() if labels is not None else None)
    keys = np.floor(xyz / voxel_size).astype(np.int64)
    # single sortable key per voxel
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    xyz_sorted = xyz[order]
    boundaries = np.any(np.diff(keys_sorted, axis=0) != 0, axis=1)
    group_id = np.concatenate([[0], np.cumsum(boundaries)])
    n_groups = group_id[-1] + 1
    counts = np.bincount(group_id, minlength=n_groups)
    sums = np.zeros((n_groups, 3))
    np.add.at(sums, group_id, xyz_sorted)
    centroids = sums / counts[:, None]
    out_labels = None
    if labels is not None:
        lab_sorted = labels[order].astype(np.int64)
        lab_min = np.full(n_groups, np.iinfo(np.int64).max)
        lab_max = np.full(n_groups, np.iinfo(np.int64).min)
        np.minimum.at(lab_min, group_id, lab_sorted)
        np.maximum.at(lab_max, group_id, lab_sorted)
        out_labels = np.where(lab_min == lab_max, lab_min, MIXED_LABEL)
    return centroids, out_labels


def accumulate_map(
    keyframe_pose: Pose,
    frames: list[tuple[Pose, LidarFrame]],
    filt: VoxelFilterConfig,
    t: float = 0.0,
    node_index: int = -1,
    raw_points: np.ndarray | None = None,
) -> Keyframe:
    """Merge frames into a keyframe map in the keyframe's r-frame.

    Each (pose, frame) pair carries the frame's world pose of the r-frame at
    its timestamp (INS prior); points are assumed de-skewed already.
    """
    merged = []
    merged_labels = []
    have_labels = all(f.labels is not None for _, f in frames) and len(frames) > 0
    t_kf_inv = inverse(keyframe_pose)
    for pose, frame in frames:
        if frame.size == 0:
            continue
        rel = compose(t_kf_inv, pose)
        merged.append(transform(rel, frame.xyz))
        if have_labels:
            merged_labels.append(frame.labels)
    if not merged:
        raise EmptyMap("no points to accumulate")
    pts = np.concatenate(merged, axis=0)
    labels = np.concatenate(merged_labels) if have_labels else None
    down, down_labels = voxel_downsample(pts, filt.voxel_size, labels)
    if down.shape[0] == 0:
        raise EmptyMap("no points survived the voxel filter")
    kf = Keyframe(
        t=t,
        node_index=node_index,
        raw_points=raw_points if raw_points is not None else down,
        local_map=down,
        map_labels=down_labels,
    )
    kf.build_index()
    return kf


def knn(keyframe: Keyframe, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact k nearest map points to a query, ascending by distance.

    Returns (points (m, 3), indices (m,), distances (m,)) with m = min(k, map
    size).  Exact-distance ties are broken by point index.
    """
    size = keyframe.local_map.shape[0]
    m = min(k, size)
    # over-query so boundary ties can be re-ranked by index
    kq = min(size, k + 4)
    dists, idx = keyframe.spatial_index.query(query, k=kq)
    dists = np.atleast_1d(dists)
    idx = np.atleast_1d(idx)
    order = np.lexsort((idx, dists))
    sel = idx[order][:m]
    return keyframe.local_map[sel], sel, np.atleast_1d(dists[order][:m])


def knn_batch(keyframe: Keyframe, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized k-NN: (M, k) distances and indices for (M, 3) queries."""
    dists, idx = keyframe.spatial_index.query(queries, k=k)
    if k == 1:
        dists = dists[:, None]
        idx = idx[:, None]
    return dists, idx
