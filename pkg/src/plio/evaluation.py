"""Trajectory evaluation: ATE, ARE, and end-to-end error.

Estimate poses are matched to ground truth by nearest timestamp within a
10 ms window.  ATE is the RMSE of translation after one rigid SE(3)
least-squares alignment of the matched position sets; ARE applies the same
alignment and takes the RMSE of the rotation error angles.  End-to-end error
aligns at the first matched pose only and measures the final position gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap, TooFewPairs
from .rotations import log_map, mat_to_quat, quat_conj, quat_mul, quat_to_mat, quats_to_mats

ASSOC_WINDOW = 0.010


@dataclass
class TrajectoryRecord:
    """Timestamped poses in the world frame, quaternions scalar-first."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory timestamps must strictly increase")

    @property
    def size(self) -> int:
        return self.t.size


def associate(est: TrajectoryRecord, truth: TrajectoryRecord, window: float = ASSOC_WINDOW):
    """Nearest-truth-timestamp pairing; returns (est_idx, truth_idx)."""
    if est.size == 0 or truth.size == 0:
        raise NoOverlap("empty trajectory")
    if est.t[-1] < truth.t[0] - window or truth.t[-1] < est.t[0] - window:
        raise NoOverlap("no common time span")
    pos = np.searchsorted(truth.t, est.t)
    best = np.clip(pos, 1, truth.t.size - 1)
    left = best - 1
    choose_left = np.abs(truth.t[left] - est.t) <= np.abs(truth.t[best] - est.t)
    idx_truth = np.where(choose_left, left, best)
    ok = np.abs(truth.t[idx_truth] - est.t) <= window
    idx_est = np.where(ok)[0]
    idx_truth = idx_truth[ok]
    if idx_est.size < 3:
        raise TooFewPairs(f"only {idx_est.size} matched pose pairs")
    return idx_est, idx_truth


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid transform (R, t) with R @ src + t ~= dst."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = c_dst - r @ c_src
    return r, t


def ate_rmse(est: TrajectoryRecord, truth: TrajectoryRecord) -> float:
    """Translation RMSE after a single rigid alignment."""
    ie, it = associate(est, truth)
    r, t = rigid_align(est.p[ie], truth.p[it])
    err = est.p[ie] @ r.T + t - truth.p[it]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def are_rmse_deg(est: TrajectoryRecord, truth: TrajectoryRecord) -> float:
    """Rotation-angle RMSE (degrees) after the ATE alignment."""
    ie, it = associate(est, truth)
    r, _ = rigid_align(est.p[ie], truth.p[it])
    q_align = mat_to_quat(r)
    angles = []
    for i, j in zip(ie, it):
        q_est = quat_mul(q_align, est.q[i])
        err = log_map(quat_mul(quat_conj(truth.q[j]), q_est))
        angles.append(np.linalg.norm(err))
    angles = np.array(angles)
    return float(np.degrees(np.sqrt(np.mean(angles * angles))))


def end_to_end_error(est: TrajectoryRecord, truth: TrajectoryRecord) -> float:
    """Final-position error with the alignment fixed at the start pose only."""
    ie, it = associate(est, truth)
    r0_est = quat_to_mat(est.q[ie[0]])
    r0_tru = quat_to_mat(truth.q[it[0]])
    r = r0_tru @ r0_est.T
    t = truth.p[it[0]] - r @ est.p[ie[0]]
    p_final = r @ est.p[ie[-1]] + t
    return float(np.linalg.norm(p_final - truth.p[it[-1]]))


def error_series(est: TrajectoryRecord, truth: TrajectoryRecord):
    """Per-axis position and attitude errors after rigid alignment.

    Returns (t, pos_err (N, 3), att_err_deg (N, 3)) where attitude errors are
    the world-frame rotation-vector components of the error rotation.
    """
    ie, it = associate(est, truth)
    r, t = rigid_align(est.p[ie], truth.p[it])
    pos_err = est.p[ie] @ r.T + t - truth.p[it]
    q_align = mat_to_quat(r)
    att = np.empty((ie.size, 3))
    for k, (i, j) in enumerate(zip(ie, it)):
        q_est = quat_mul(q_align, est.q[i])
        # error expressed in the world frame: R_est R_true^T
        err = log_map(quat_mul(q_est, quat_conj(truth.q[j])))
        att[k] = np.degrees(err)
    return est.t[ie], pos_err, att


def evaluate(est: TrajectoryRecord, truth: TrajectoryRecord, mode: str) -> float:
    if mode == "ate":
        return ate_rmse(est, truth)
    if mode == "are":
        return are_rmse_deg(est, truth)
    if mode == "end_to_end":
        return end_to_end_error(est, truth)
    raise ValueError(f"unknown evaluation mode {mode!r}")
