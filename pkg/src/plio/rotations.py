"""Rotation algebra shared by all modules.

Quaternions are Hamilton convention, scalar first ``[w, x, y, z]``, stored as
plain numpy arrays of shape (4,).  ``R(q)`` is the matrix such that rotating a
vector v by q equals ``R(q) @ v``.  Rotation vectors are radians, shape (3,).

Batch variants operate on arrays with a leading axis and are used by the
simulator and the association pipeline; the scalar functions are the reference
implementations.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    return q / np.linalg.norm(q)


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, renormalized to absorb drift."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    out = np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return normalize(out)


def exp_map(phi: np.ndarray) -> np.ndarray:
    """Rotation vector to unit quaternion.

    Taylor branch below |phi| = 1e-8 avoids division by zero near identity.
    """
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < SMALL_ANGLE:
        q = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
        return normalize(q)
    half = 0.5 * angle
    s = np.sin(half) / angle
    return np.array([np.cos(half), s * phi[0], s * phi[1], s * phi[2]])


def log_map(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to rotation vector with |result| <= pi.

    The double cover is resolved by forcing w >= 0 before taking the log, so
    q and -q map to the same rotation vector.
    """
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    vec = q[1:4]
    vn = np.linalg.norm(vec)
    if vn < SMALL_ANGLE:
        return 2.0 * vec / q[0]
    angle = 2.0 * np.arctan2(vn, q[0])
    return vec * (angle / vn)


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with skew(v) @ u = v x u."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method), w >= 0."""
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (m[2, 1] - m[1, 2]) / s,
                (m[0, 2] - m[2, 0]) / s,
                (m[1, 0] - m[0, 1]) / s,
            ]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[2, 1] - m[1, 2]) / s,
                0.25 * s,
                (m[0, 1] + m[1, 0]) / s,
                (m[0, 2] + m[2, 0]) / s,
            ]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[0, 2] - m[2, 0]) / s,
                (m[0, 1] + m[1, 0]) / s,
                0.25 * s,
                (m[1, 2] + m[2, 1]) / s,
            ]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [
                (m[1, 0] - m[0, 1]) / s,
                (m[0, 2] + m[2, 0]) / s,
                (m[1, 2] + m[2, 1]) / s,
                0.25 * s,
            ]
        )
    q = normalize(q)
    if q[0] < 0.0:
        q = -q
    return q


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q."""
    return quat_to_mat(q) @ v


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Geodesic interpolation q0 -> q1 at fraction u in [0, 1]."""
    rel = quat_mul(quat_conj(q0), q1)
    return quat_mul(q0, exp_map(u * log_map(rel)))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian Jr of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr d)."""
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < 1e-5:
        return np.eye(3) - 0.5 * k + (1.0 / 6.0) * (k @ k)
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * k
        + (angle - np.sin(angle)) / (a2 * angle) * (k @ k)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3)."""
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < 1e-5:
        return np.eye(3) + 0.5 * k + (1.0 / 12.0) * (k @ k)
    a2 = angle * angle
    coef = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * k + coef * (k @ k)


# ---------------------------------------------------------------------------
# Batch variants (leading axis N).
# ---------------------------------------------------------------------------


def quats_to_mats(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions to (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 4) x (N, 4) Hamilton products, renormalized."""
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def exp_map_batch(phi: np.ndarray) -> np.ndarray:
    """(N, 3) rotation vectors to (N, 4) unit quaternions."""
    angle = np.linalg.norm(phi, axis=1)
    half = 0.5 * angle
    s = np.empty_like(angle)
    small = angle < SMALL_ANGLE
    s[small] = 0.5
    s[~small] = np.sin(half[~small]) / angle[~small]
    q = np.empty((phi.shape[0], 4))
    q[:, 0] = np.cos(half)
    q[:, 1:] = phi * s[:, None]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def log_map_batch(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions to (N, 3) rotation vectors, |phi| <= pi."""
    q = np.where(q[:, :1] < 0.0, -q, q)
    vec = q[:, 1:]
    vn = np.linalg.norm(vec, axis=1)
    out = np.empty_like(vec)
    small = vn < SMALL_ANGLE
    if np.any(small):
        out[small] = 2.0 * vec[small] / q[small, :1]
    big = ~small
    angle = 2.0 * np.arctan2(vn[big], q[big, 0])
    out[big] = vec[big] * (angle / vn[big])[:, None]
    return out
