"""IMU mechanization, static initialization, and preintegration.

Frames: the w-frame is gravity aligned (gravity along -z by default) with zero
initial yaw; the b-frame is the IMU body frame.  States carry the body pose,
velocity, and gyro/accel biases.  The 15-dim error state used everywhere is
ordered (dp, dphi, dv, dbg, dba) with attitude errors applied by right
multiplication: q <- q ⊗ Exp(dphi).

Preintegration accumulates gravity-free relative motion deltas between two
time nodes with midpoint integration, first-order bias Jacobians, and a
discrete error-state covariance.  Gravity enters the residual, not the delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ExcessMotion, InsufficientData, NonMonotonicTime, OutOfRange
from .rotations import (
    IDENTITY_QUAT,
    exp_map,
    exp_map_batch,
    log_map,
    log_map_batch,
    quat_conj,
    quat_mul,
    quat_mul_batch,
    quat_to_mat,
    right_jacobian,
    right_jacobian_inv,
    skew,
    slerp,
)

# error-state slices shared with the estimator
P, PHI, V, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))

# residual rows are stacked (position, velocity, attitude, bg, ba); this
# permutation maps residual rows to error-state indices
RESIDUAL_TO_ERROR = np.array([0, 1, 2, 6, 7, 8, 3, 4, 5, 9, 10, 11, 12, 13, 14])


@dataclass
class ImuSample:
    """One IMU reading: time (s), angular rate (rad/s), specific force (m/s^2)."""

    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class ImuState:
    """Body state at time t: position/attitude/velocity in w, biases in b."""

    t: float
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray

    def copy(self) -> "ImuState":
        return ImuState(
            self.t, self.p.copy(), self.q.copy(), self.v.copy(), self.bg.copy(), self.ba.copy()
        )


def _default_gravity() -> np.ndarray:
    return np.array([0.0, 0.0, -9.81])


@dataclass
class WorldConfig:
    """Gravity vector and continuous-time IMU noise densities.

    Noise densities are in rad/s/sqrt(Hz) and m/s^2/sqrt(Hz); bias walks in
    rad/s^2/sqrt(Hz) and m/s^3/sqrt(Hz).
    """

    g_w: np.ndarray = field(default_factory=_default_gravity)
    gyro_noise_density: float = 2.4e-4
    accel_noise_density: float = 1.7e-3
    gyro_bias_walk: float = 1.0e-5
    accel_bias_walk: float = 1.0e-4


@dataclass
class PreintegrationDelta:
    """Relative-motion measurement between two nodes.

    dp, dv, dq are expressed in the body frame of the first sample.  The
    bias Jacobian rows are ordered (dp, dphi, dv) against columns (bg, ba);
    cov is 15x15 in the (dp, dphi, dv, dbg, dba) error ordering.
    """

    dt_total: float
    dp: np.ndarray
    dv: np.ndarray
    dq: np.ndarray
    bias_jacobians: np.ndarray
    cov: np.ndarray
    linearization_bias: tuple[np.ndarray, np.ndarray]


def static_initialize(
    samples: list[ImuSample],
    world: WorldConfig,
    min_duration: float = 1.0,
    max_gyro_std: float = 0.05,
) -> ImuState:
    """Level the platform and estimate gyro biases from stationary data.

    Roll and pitch come from the mean specific force; yaw is zero, position
    and velocity are zero, the gyro bias is the mean angular rate, and the
    accelerometer bias starts at zero.
    """
    if not samples:
        raise InsufficientData("no samples")
    span = samples[-1].t - samples[0].t
    if span < min_duration:
        raise InsufficientData(f"{span:.3f} s of data, need {min_duration:.3f} s")
    gyro = np.array([s.gyro for s in samples])
    accel = np.array([s.accel for s in samples])
    gyro_std = gyro.std(axis=0).max()
    if gyro_std > max_gyro_std:
        raise ExcessMotion(f"gyro std {gyro_std:.4f} rad/s exceeds {max_gyro_std}")
    f = accel.mean(axis=0)
    roll = np.arctan2(f[1], f[2])
    pitch = np.arctan2(-f[0], np.hypot(f[1], f[2]))
    q = quat_mul(exp_map(np.array([0.0, pitch, 0.0])), exp_map(np.array([roll, 0.0, 0.0])))
    return ImuState(
        t=samples[-1].t,
        p=np.zeros(3),
        q=q,
        v=np.zeros(3),
        bg=gyro.mean(axis=0),
        ba=np.zeros(3),
    )


def mechanize(state: ImuState, s0: ImuSample, s1: ImuSample, world: WorldConfig) -> ImuState:
    """Propagate the state over one sample interval with midpoint integration."""
    dt = s1.t - s0.t
    if dt <= 0.0:
        raise NonMonotonicTime(f"interval {dt} s")
    w_mid = 0.5 * (s0.gyro + s1.gyro) - state.bg
    q1 = quat_mul(state.q, exp_map(w_mid * dt))
    a_w = 0.5 * (
        quat_to_mat(state.q) @ (s0.accel - state.ba) + quat_to_mat(q1) @ (s1.accel - state.ba)
    ) + world.g_w
    v1 = state.v + a_w * dt
    p1 = state.p + state.v * dt + 0.5 * a_w * dt * dt
    return ImuState(t=s1.t, p=p1, q=q1, v=v1, bg=state.bg.copy(), ba=state.ba.copy())


class PoseTrajectory:
    """Time-indexed pose buffer with fast interpolation.

    Positions interpolate linearly, attitudes along the geodesic between the
    bracketing nodes.
    """

    def __init__(self, t: np.ndarray, p: np.ndarray, q: np.ndarray):
        self.t = np.asarray(t, dtype=float)
        self.p = np.asarray(p, dtype=float)
        self.q = np.asarray(q, dtype=float)

    @classmethod
    def from_states(cls, states: list[ImuState]) -> "PoseTrajectory":
        return cls(
            np.array([s.t for s in states]),
            np.array([s.p for s in states]),
            np.array([s.q for s in states]),
        )

    def covers(self, t0: float, t1: float, tol: float = 1e-9) -> bool:
        return self.t[0] - tol <= t0 and t1 <= self.t[-1] + tol

    def interpolate(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized pose lookup for an array of query times."""
        ts = np.asarray(ts, dtype=float)
        if ts.min() < self.t[0] - 1e-9 or ts.max() > self.t[-1] + 1e-9:
            raise OutOfRange(
                f"query span [{ts.min():.6f}, {ts.max():.6f}] outside "
                f"[{self.t[0]:.6f}, {self.t[-1]:.6f}]"
            )
        idx = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, len(self.t) - 2)
        t0 = self.t[idx]
        dt = self.t[idx + 1] - t0
        u = np.clip((ts - t0) / dt, 0.0, 1.0)
        p = self.p[idx] + (self.p[idx + 1] - self.p[idx]) * u[:, None]
        q0 = self.q[idx]
        q1 = self.q[idx + 1]
        rel = quat_mul_batch(_conj_batch(q0), q1)
        q = quat_mul_batch(q0, exp_map_batch(log_map_batch(rel) * u[:, None]))
        return p, q


def _conj_batch(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[:, 1:] = -out[:, 1:]
    return out


def interpolate_pose(trajectory: list[ImuState], t: float) -> tuple[np.ndarray, np.ndarray]:
    """Pose at time t from a time-ordered state list.

    Linear in position, spherical-linear in attitude between the bracketing
    states.  Raises OutOfRange outside the trajectory span.
    """
    times = [s.t for s in trajectory]
    if not trajectory or t < times[0] - 1e-12 or t > times[-1] + 1e-12:
        raise OutOfRange(f"t={t} outside trajectory")
    i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    a, b = trajectory[i], trajectory[i + 1]
    if b.t == a.t:
        return a.p.copy(), a.q.copy()
    u = float(np.clip((t - a.t) / (b.t - a.t), 0.0, 1.0))
    return a.p + (b.p - a.p) * u, slerp(a.q, b.q, u)


def preintegrate(
    samples: list[ImuSample],
    bias: tuple[np.ndarray, np.ndarray],
    world: WorldConfig,
) -> PreintegrationDelta:
    """Integrate gravity-free motion deltas over a sample list.

    Midpoint rule throughout; the covariance is propagated with the
    discrete first-order error model and the bias Jacobians accumulate the
    same transition chain for first-order bias correction.
    """
    if len(samples) < 2:
        raise NonMonotonicTime("need at least two samples")
    bg, ba = np.asarray(bias[0], dtype=float), np.asarray(bias[1], dtype=float)
    dp = np.zeros(3)
    dv = np.zeros(3)
    dq = IDENTITY_QUAT.copy()
    jac = np.eye(15)
    cov = np.zeros((15, 15))
    sg2 = world.gyro_noise_density**2
    sa2 = world.accel_noise_density**2
    swg2 = world.gyro_bias_walk**2
    swa2 = world.accel_bias_walk**2
    t_accum = 0.0
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        if dt <= 0.0:
            raise NonMonotonicTime(f"interval {dt} s at t={s0.t}")
        w_mid = 0.5 * (s0.gyro + s1.gyro) - bg
        a0 = s0.accel - ba
        a1 = s1.accel - ba
        r0 = quat_to_mat(dq)
        dq_next = quat_mul(dq, exp_map(w_mid * dt))
        r1 = quat_to_mat(dq_next)
        a_mid = 0.5 * (r0 @ a0 + r1 @ a1)
        dp_next = dp + dv * dt + 0.5 * a_mid * dt * dt
        dv_next = dv + a_mid * dt

        # error-state transition (dp, dphi, dv, dbg, dba)
        x_att = quat_to_mat(exp_map(w_mid * dt)).T
        jr_dt = right_jacobian(w_mid * dt) * dt
        r0a0 = r0 @ skew(a0)
        r1a1 = r1 @ skew(a1)
        f_vphi = -0.5 * dt * (r0a0 + r1a1 @ x_att)
        f_vbg = 0.5 * dt * (r1a1 @ jr_dt)
        f_vba = -0.5 * dt * (r0 + r1)
        f = np.eye(15)
        f[P, PHI] = 0.5 * dt * f_vphi
        f[P, V] = np.eye(3) * dt
        f[P, BG] = 0.5 * dt * f_vbg
        f[P, BA] = 0.5 * dt * f_vba
        f[PHI, PHI] = x_att
        f[PHI, BG] = -jr_dt
        f[V, PHI] = f_vphi
        f[V, BG] = f_vbg
        f[V, BA] = f_vba

        # noise insertion (ng0, ng1, na0, na1, nbg_walk, nba_walk)
        g = np.zeros((15, 18))
        g_vg = 0.25 * dt * dt * r1a1
        g[V, 0:3] = g_vg
        g[V, 3:6] = g_vg
        g[V, 6:9] = 0.5 * dt * r0
        g[V, 9:12] = 0.5 * dt * r1
        g[P, 0:3] = 0.5 * dt * g_vg
        g[P, 3:6] = 0.5 * dt * g_vg
        g[P, 6:9] = 0.25 * dt * dt * r0
        g[P, 9:12] = 0.25 * dt * dt * r1
        g[PHI, 0:3] = -0.5 * jr_dt
        g[PHI, 3:6] = -0.5 * jr_dt
        g[BG, 12:15] = np.eye(3)
        g[BA, 15:18] = np.eye(3)
        q_diag = np.concatenate(
            [
                np.full(3, sg2 / dt),
                np.full(3, sg2 / dt),
                np.full(3, sa2 / dt),
                np.full(3, sa2 / dt),
                np.full(3, swg2 * dt),
                np.full(3, swa2 * dt),
            ]
        )
        cov = f @ cov @ f.T + (g * q_diag) @ g.T
        cov = 0.5 * (cov + cov.T)
        jac = f @ jac
        dp, dv, dq = dp_next, dv_next, dq_next
        t_accum += dt

    bias_jac = jac[0:9, 9:15].copy()
    return PreintegrationDelta(
        dt_total=t_accum,
        dp=dp,
        dv=dv,
        dq=dq,
        bias_jacobians=bias_jac,
        cov=cov,
        linearization_bias=(bg.copy(), ba.copy()),
    )


def corrected_delta(
    delta: PreintegrationDelta, bg: np.ndarray, ba: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """First-order bias-corrected deltas for bias estimates (bg, ba).

    Returns (dp, dv, dq, dbg, dba) where dbg/dba are the deviations from the
    linearization bias that were applied.
    """
    dbg = bg - delta.linearization_bias[0]
    dba = ba - delta.linearization_bias[1]
    jp = delta.bias_jacobians[0:3]
    jq = delta.bias_jacobians[3:6, 0:3]
    jv = delta.bias_jacobians[6:9]
    dp = delta.dp + jp[:, 0:3] @ dbg + jp[:, 3:6] @ dba
    dv = delta.dv + jv[:, 0:3] @ dbg + jv[:, 3:6] @ dba
    dq = quat_mul(delta.dq, exp_map(jq @ dbg))
    return dp, dv, dq, dbg, dba


def preintegration_residual(
    x_prev: ImuState, x_curr: ImuState, delta: PreintegrationDelta, world: WorldConfig
) -> np.ndarray:
    """15-vector residual (position, velocity, attitude, bg, ba).

    The measured deltas are first-order bias corrected with the previous
    node's bias estimates before differencing.
    """
    dp, dv, dq, _, _ = corrected_delta(delta, x_prev.bg, x_prev.ba)
    r1t = quat_to_mat(x_prev.q).T
    dt = delta.dt_total
    g = world.g_w
    r = np.empty(15)
    r[0:3] = r1t @ (x_curr.p - x_prev.p - x_prev.v * dt - 0.5 * g * dt * dt) - dp
    r[3:6] = r1t @ (x_curr.v - x_prev.v - g * dt) - dv
    r[6:9] = log_map(quat_mul(quat_mul(quat_conj(x_curr.q), x_prev.q), dq))
    r[9:12] = x_curr.bg - x_prev.bg
    r[12:15] = x_curr.ba - x_prev.ba
    return r


def preintegration_jacobians(
    x_prev: ImuState, x_curr: ImuState, delta: PreintegrationDelta, world: WorldConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus its Jacobians w.r.t. both nodes' error states.

    Rows follow the residual stacking (p, v, phi, bg, ba); columns follow the
    error ordering (dp, dphi, dv, dbg, dba) of each node.
    """
    dp, dv, dq, dbg, _ = corrected_delta(delta, x_prev.bg, x_prev.ba)
    r1t = quat_to_mat(x_prev.q).T
    dt = delta.dt_total
    g = world.g_w
    jp = delta.bias_jacobians[0:3]
    jq = delta.bias_jacobians[3:6, 0:3]
    jv = delta.bias_jacobians[6:9]

    r = np.empty(15)
    r[0:3] = r1t @ (x_curr.p - x_prev.p - x_prev.v * dt - 0.5 * g * dt * dt) - dp
    r[3:6] = r1t @ (x_curr.v - x_prev.v - g * dt) - dv
    r_att = log_map(quat_mul(quat_mul(quat_conj(x_curr.q), x_prev.q), dq))
    r[6:9] = r_att
    r[9:12] = x_curr.bg - x_prev.bg
    r[12:15] = x_curr.ba - x_prev.ba

    j_prev = np.zeros((15, 15))
    j_curr = np.zeros((15, 15))
    # position rows
    j_prev[0:3, P] = -r1t
    j_prev[0:3, PHI] = skew(r1t @ (x_curr.p - x_prev.p - x_prev.v * dt - 0.5 * g * dt * dt))
    j_prev[0:3, V] = -r1t * dt
    j_prev[0:3, BG] = -jp[:, 0:3]
    j_prev[0:3, BA] = -jp[:, 3:6]
    j_curr[0:3, P] = r1t
    # velocity rows
    j_prev[3:6, PHI] = skew(r1t @ (x_curr.v - x_prev.v - g * dt))
    j_prev[3:6, V] = -r1t
    j_prev[3:6, BG] = -jv[:, 0:3]
    j_prev[3:6, BA] = -jv[:, 3:6]
    j_curr[3:6, V] = r1t
    # attitude rows
    jr_inv = right_jacobian_inv(r_att)
    q_err = quat_to_mat(exp_map(r_att))
    j_prev[6:9, PHI] = jr_inv @ quat_to_mat(dq).T
    j_prev[6:9, BG] = jr_inv @ right_jacobian(jq @ dbg) @ jq
    j_curr[6:9, PHI] = -jr_inv @ q_err.T
    # bias rows
    j_prev[9:12, BG] = -np.eye(3)
    j_prev[12:15, BA] = -np.eye(3)
    j_curr[9:12, BG] = np.eye(3)
    j_curr[12:15, BA] = np.eye(3)
    return r, j_prev, j_curr


def residual_covariance(delta: PreintegrationDelta) -> np.ndarray:
    """Preintegration covariance permuted to the residual row ordering."""
    perm = RESIDUAL_TO_ERROR
    return delta.cov[np.ix_(perm, perm)]
