"""Rigid transforms as (position, quaternion) pairs.

A pose (p, q) maps local coordinates into the parent frame:
``x_parent = R(q) @ x_local + p``.
"""

from __future__ import annotations

import numpy as np

from .rotations import quat_conj, quat_mul, quat_to_mat, quats_to_mats

Pose = tuple[np.ndarray, np.ndarray]


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of b expressed through a: (a ∘ b)(x) = a(b(x))."""
    pa, qa = a
    pb, qb = b
    return quat_to_mat(qa) @ pb + pa, quat_mul(qa, qb)


def inverse(a: Pose) -> Pose:
    pa, qa = a
    qi = quat_conj(qa)
    return -(quat_to_mat(qi) @ pa), qi


def transform(a: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply pose to (3,) or (N, 3) points."""
    p, q = a
    return pts @ quat_to_mat(q).T + p


def relative(a: Pose, b: Pose) -> Pose:
    """Pose of b in a's frame: a^{-1} ∘ b."""
    return compose(inverse(a), b)


def transform_batch(p: np.ndarray, q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Per-point poses: (N, 3) positions, (N, 4) quats applied to (N, 3) points."""
    mats = quats_to_mats(q)
    return np.einsum("nij,nj->ni", mats, pts) + p
