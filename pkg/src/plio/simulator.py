"""Synthetic-world generator: planar rooms, smooth trajectories, IMU and
LiDAR synthesis with ground-truth labels.

Trajectories are analytic: positions carry hand-derived first and second
derivatives; body angular rates come from a high-accuracy five-point stencil
on the analytic attitude, so the generated IMU stream is kinematically
consistent with the ground-truth poses to well below the integration error of
the consumers.

LiDAR frames are produced by casting rays over a forward cone whose direction
pattern advances with a golden-angle spiral every frame, approximating the
coverage growth of a non-repetitive scanning head.  Range noise is applied
along the ray.  Every return carries the id of the plane it hit; labels ride
along for tests only and never enter the estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imu import ImuSample, ImuState
from .mapping import LidarFrame
from .errors import UnknownPreset
from .poses import Pose
from .rotations import exp_map, quat_mul_batch, quats_to_mats

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
PHI_INV = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# worlds
# ---------------------------------------------------------------------------


@dataclass
class WorldPlane:
    """A finite convex planar patch: unit normal n, offset d, polygon vertices."""

    n: np.ndarray
    d: float
    vertices: np.ndarray
    label: int


@dataclass
class WorldModel:
    planes: list[WorldPlane]
    seed: int = 0


def _rect(center, half_u, half_v, label) -> WorldPlane:
    c = np.asarray(center, dtype=float)
    a = np.asarray(half_u, dtype=float)
    b = np.asarray(half_v, dtype=float)
    n = np.cross(a, b)
    n = n / np.linalg.norm(n)
    verts = np.array([c - a - b, c + a - b, c + a + b, c - a + b])
    return WorldPlane(n=n, d=-float(n @ c), vertices=verts, label=label)


def box_world(size=(10.0, 8.0, 4.0), margin: float = 0.0) -> WorldModel:
    """Closed rectangular room centered on the origin in x/y, floor at z=0.

    A positive margin shrinks every face so the faces no longer touch at the
    edges (used by label-purity tests: no voxel can then mix two planes).
    """
    sx, sy, sz = size
    hx, hy = sx / 2, sy / 2
    m = margin
    ex = np.array([1.0, 0, 0])
    ey = np.array([0.0, 1, 0])
    ez = np.array([0.0, 0, 1])
    planes = [
        _rect([0, 0, 0], (hx - m) * ex, (hy - m) * ey, 0),          # floor
        _rect([0, 0, sz], (hx - m) * ex, (hy - m) * ey, 1),         # ceiling
        _rect([hx, 0, sz / 2], (hy - m) * ey, (sz / 2 - m) * ez, 2),   # +x wall
        _rect([-hx, 0, sz / 2], (hy - m) * ey, (sz / 2 - m) * ez, 3),  # -x wall
        _rect([0, hy, sz / 2], (hx - m) * ex, (sz / 2 - m) * ez, 4),   # +y wall
        _rect([0, -hy, sz / 2], (hx - m) * ex, (sz / 2 - m) * ez, 5),  # -y wall
    ]
    return WorldModel(planes=planes)


def corridor_world(width: float = 4.0, length: float = 60.0, height: float = 4.0) -> WorldModel:
    """Two parallel walls along y; translation along the corridor axis and
    absolute height are unconstrained by the geometry."""
    ey = np.array([0.0, 1, 0])
    ez = np.array([0.0, 0, 1])
    planes = [
        _rect([width / 2, 0, height / 2], (length / 2) * ey, (height / 2) * ez, 0),
        _rect([-width / 2, 0, height / 2], (length / 2) * ey, (height / 2) * ez, 1),
    ]
    return WorldModel(planes=planes)


def corner_world(extent: float = 8.0, height: float = 5.0) -> WorldModel:
    """Two perpendicular walls meeting at an edge."""
    ex = np.array([1.0, 0, 0])
    ey = np.array([0.0, 1, 0])
    ez = np.array([0.0, 0, 1])
    planes = [
        _rect([4.0, 0.0, height / 2 - 1.0], (extent / 2) * ey, (height / 2) * ez, 0),
        _rect([0.0, 4.0, height / 2 - 1.0], (extent / 2) * ex, (height / 2) * ez, 1),
    ]
    return WorldModel(planes=planes)


def panels_world() -> WorldModel:
    """Box faces shrunk away from the edges: spatially disjoint planes."""
    return box_world(margin=0.5)


WORLD_PRESETS = {
    "box": box_world,
    "corridor": corridor_world,
    "corner": corner_world,
    "panels": panels_world,
}


def make_world(name: str) -> WorldModel:
    try:
        return WORLD_PRESETS[name]()
    except KeyError:
        raise UnknownPreset(f"world preset {name!r}") from None


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectorySpec:
    kind: str = "circle"
    duration: float = 60.0
    imu_rate: float = 200.0
    lidar_rate: float = 10.0
    rays_per_frame: int = 1200
    stationary_lead: float = 1.5
    ramp: float = 2.0
    radius: float = 2.5
    speed: float = 0.5
    height: float = 1.5
    z_amp: float = 0.0
    # one z cycle per revolution keeps the path free of the 180-degree
    # rotational symmetry that would make rigid trajectory alignment ambiguous
    z_cycles: float = 1.0
    wobble_deg: float = 0.0
    wobble_hz: float = 0.25
    yaw_rate_scale: float = 1.0


def _smoothstep(u):
    """Quintic smoothstep with zero first and second derivatives at 0 and 1."""
    u = np.clip(u, 0.0, 1.0)
    s = u**3 * (6 * u * u - 15 * u + 10)
    ds = 30 * u * u * (u - 1) ** 2
    return s, ds


def _smoothstep_integral(u):
    u = np.clip(u, 0.0, 1.0)
    return u**4 * (u * u - 3 * u + 2.5)


class _Ramp:
    """Scalar phase theta(t) that accelerates smoothly from rest to rate."""

    def __init__(self, rate: float, lead: float, ramp: float):
        self.rate = rate
        self.lead = lead
        self.ramp = max(ramp, 1e-6)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tau = (t - self.lead) / self.ramp
        s, ds = _smoothstep(tau)
        si = _smoothstep_integral(tau)
        theta = self.rate * self.ramp * si
        after = tau > 1.0
        theta = np.where(after, self.rate * (0.5 * self.ramp + (t - self.lead - self.ramp)), theta)
        dtheta = self.rate * s
        ddtheta = self.rate * ds / self.ramp
        ddtheta = np.where(after, 0.0, ddtheta)
        return theta, dtheta, ddtheta


class AnalyticTrajectory:
    """Vectorized ground-truth kinematics for one TrajectorySpec."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        if spec.kind not in ("circle", "figure8", "straight", "rich"):
            raise UnknownPreset(f"trajectory preset {spec.kind!r}")
        if spec.kind == "rich" and spec.wobble_deg == 0.0:
            spec.wobble_deg = 12.0
        rate = spec.speed / max(spec.radius, 1e-9)
        if spec.kind == "straight":
            rate = spec.speed
        self._phase = _Ramp(rate, spec.stationary_lead, spec.ramp)
        # wobble amplitude shares the main ramp so the lead stays stationary
        self._wobble = np.radians(spec.wobble_deg)

    # -- position ----------------------------------------------------------
    def pva(self, t):
        """Position, velocity, acceleration in the world frame, (N, 3) each."""
        spec = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        th, dth, ddth = self._phase(t)
        n = t.shape[0]
        p = np.zeros((n, 3))
        v = np.zeros((n, 3))
        a = np.zeros((n, 3))
        if spec.kind == "straight":
            p[:, 0] = th
            v[:, 0] = dth
            a[:, 0] = ddth
        elif spec.kind == "figure8":
            aa, bb = spec.radius, 0.6 * spec.radius
            p[:, 0] = aa * np.sin(th)
            p[:, 1] = bb * np.sin(2 * th)
            v[:, 0] = aa * np.cos(th) * dth
            v[:, 1] = 2 * bb * np.cos(2 * th) * dth
            a[:, 0] = aa * (np.cos(th) * ddth - np.sin(th) * dth**2)
            a[:, 1] = 2 * bb * (np.cos(2 * th) * ddth - 2 * np.sin(2 * th) * dth**2)
        else:  # circle, rich
            r = spec.radius
            p[:, 0] = r * (np.cos(th) - 1.0)
            p[:, 1] = r * np.sin(th)
            v[:, 0] = -r * np.sin(th) * dth
            v[:, 1] = r * np.cos(th) * dth
            a[:, 0] = -r * (np.cos(th) * dth**2 + np.sin(th) * ddth)
            a[:, 1] = r * (np.cos(th) * ddth - np.sin(th) * dth**2)
        if spec.z_amp > 0.0:
            k = spec.z_cycles
            p[:, 2] = spec.z_amp * np.sin(k * th)
            v[:, 2] = spec.z_amp * k * np.cos(k * th) * dth
            a[:, 2] = spec.z_amp * k * (np.cos(k * th) * ddth - k * np.sin(k * th) * dth**2)
        p[:, 2] += spec.height
        return p, v, a

    # -- attitude ----------------------------------------------------------
    def _angles(self, t):
        spec = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        th, _, _ = self._phase(t)
        yaw = spec.yaw_rate_scale * th
        if spec.kind == "straight":
            yaw = np.zeros_like(t)
        pitch = np.zeros_like(t)
        roll = np.zeros_like(t)
        if self._wobble > 0.0:
            tau = (t - spec.stationary_lead) / spec.ramp
            gate, _ = _smoothstep(tau)
            w = 2 * np.pi * spec.wobble_hz
            tt = t - spec.stationary_lead
            roll = self._wobble * gate * np.sin(w * tt)
            pitch = 0.7 * self._wobble * gate * np.sin(1.37 * w * tt + 0.9)
        return yaw, pitch, roll

    def attitude(self, t):
        """(N, 4) body-to-world quaternions (yaw-pitch-roll composition)."""
        yaw, pitch, roll = self._angles(t)
        qyaw = _axis_quats(yaw, 2)
        qpitch = _axis_quats(pitch, 1)
        qroll = _axis_quats(roll, 0)
        return quat_mul_batch(quat_mul_batch(qyaw, qpitch), qroll)

    def body_rate(self, t):
        """Body angular rate via a five-point stencil on the attitude."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        h = 1e-4
        r_m2 = quats_to_mats(self.attitude(t - 2 * h))
        r_m1 = quats_to_mats(self.attitude(t - h))
        r_p1 = quats_to_mats(self.attitude(t + h))
        r_p2 = quats_to_mats(self.attitude(t + 2 * h))
        rdot = (-r_p2 + 8 * r_p1 - 8 * r_m1 + r_m2) / (12 * h)
        r = quats_to_mats(self.attitude(t))
        w_mat = np.einsum("nji,njk->nik", r, rdot)
        w_mat = 0.5 * (w_mat - w_mat.transpose(0, 2, 1))
        return np.stack([w_mat[:, 2, 1], w_mat[:, 0, 2], w_mat[:, 1, 0]], axis=1)

    def states(self, t, bg=None, ba=None) -> list[ImuState]:
        p, v, _ = self.pva(t)
        q = self.attitude(t)
        bg = np.zeros(3) if bg is None else bg
        ba = np.zeros(3) if ba is None else ba
        return [
            ImuState(float(ti), p[i].copy(), q[i].copy(), v[i].copy(), bg.copy(), ba.copy())
            for i, ti in enumerate(np.atleast_1d(t))
        ]


def _axis_quats(angle: np.ndarray, axis: int) -> np.ndarray:
    q = np.zeros((angle.shape[0], 4))
    q[:, 0] = np.cos(angle / 2)
    q[:, 1 + axis] = np.sin(angle / 2)
    return q


TRAJECTORY_PRESETS = {
    "circle": dict(kind="circle"),
    "figure8": dict(kind="figure8"),
    "straight": dict(kind="straight", speed=0.4),
    "rich": dict(kind="rich", speed=0.6, wobble_deg=12.0, z_amp=0.15),
}


def make_trajectory_spec(name: str, duration: float, **overrides) -> TrajectorySpec:
    try:
        base = dict(TRAJECTORY_PRESETS[name])
    except KeyError:
        raise UnknownPreset(f"trajectory preset {name!r}") from None
    base.update(overrides)
    return TrajectorySpec(duration=duration, **base)


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------


def _default_extr_t() -> np.ndarray:
    return np.array([0.1, 0.0, -0.05])


def _default_extr_q() -> np.ndarray:
    return exp_map(np.array([0.0, 0.0, 0.0]))


@dataclass
class SensorNoiseSpec:
    """Ground-truth sensor imperfections used during generation."""

    lidar_range_sigma: float = 0.02
    gyro_noise_density: float = 2.4e-4
    accel_noise_density: float = 1.7e-3
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extrinsic_translation: np.ndarray = field(default_factory=_default_extr_t)
    extrinsic_rotation: np.ndarray = field(default_factory=_default_extr_q)
    t_d: float = 0.0

    @property
    def extrinsics(self) -> Pose:
        return (self.extrinsic_translation, self.extrinsic_rotation)


def noise_preset(name: str) -> SensorNoiseSpec:
    if name == "noisefree":
        return SensorNoiseSpec(
            lidar_range_sigma=0.0, gyro_noise_density=0.0, accel_noise_density=0.0
        )
    if name == "mems":
        return SensorNoiseSpec(
            lidar_range_sigma=0.02,
            gyro_noise_density=2.4e-4,
            accel_noise_density=1.7e-3,
            gyro_bias=np.array([0.002, -0.0015, 0.001]),
            accel_bias=np.array([0.02, -0.015, 0.01]),
        )
    raise UnknownPreset(f"noise preset {name!r}")


def generate_imu(
    traj: AnalyticTrajectory, noise: SensorNoiseSpec, world, seed: int = 0
) -> tuple[list[ImuSample], list[ImuState]]:
    """IMU stream plus ground-truth states at the IMU rate.

    Gyro = true body rate + bias + white noise; accel = specific force
    (body acceleration minus gravity, in the body frame) + bias + noise.
    """
    spec = traj.spec
    n = int(round(spec.duration * spec.imu_rate)) + 1
    ts = np.arange(n) / spec.imu_rate
    _, v, a = traj.pva(ts)
    q = traj.attitude(ts)
    w_b = traj.body_rate(ts)
    mats = quats_to_mats(q)
    f_b = np.einsum("nji,nj->ni", mats, a - world.g_w)
    rng = np.random.default_rng(seed)
    sf = math.sqrt(spec.imu_rate)
    gyro = w_b + noise.gyro_bias + noise.gyro_noise_density * sf * rng.standard_normal((n, 3))
    accel = f_b + noise.accel_bias + noise.accel_noise_density * sf * rng.standard_normal((n, 3))
    samples = [ImuSample(float(ts[i]), gyro[i], accel[i]) for i in range(n)]
    states = traj.states(ts, bg=noise.gyro_bias, ba=noise.accel_bias)
    return samples, states


def _cone_directions(global_index: np.ndarray, half_angle: float) -> np.ndarray:
    """Low-discrepancy directions over a forward cone about +x."""
    u = (global_index * PHI_INV) % 1.0
    beta = half_angle * np.sqrt(u)
    gamma = global_index * GOLDEN_ANGLE
    sb = np.sin(beta)
    return np.stack([np.cos(beta), sb * np.cos(gamma), sb * np.sin(gamma)], axis=1)


def _cast_rays(world: WorldModel, origins: np.ndarray, dirs: np.ndarray):
    """First-hit ray casting against all world polygons.

    Returns (ranges (N,), labels (N,)); misses get range inf and label -1.
    """
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_label = np.full(n_rays, -1, dtype=np.int64)
    for plane in world.planes:
        denom = dirs @ plane.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hit = -(origins @ plane.n + plane.d) / denom
        valid = (np.abs(denom) > 1e-9) & (t_hit > 0.05) & (t_hit < best_t)
        if not np.any(valid):
            continue
        hits = origins[valid] + t_hit[valid, None] * dirs[valid]
        verts = plane.vertices
        smin = np.full(hits.shape[0], np.inf)
        smax = np.full(hits.shape[0], -np.inf)
        for i in range(len(verts)):
            e = verts[(i + 1) % len(verts)] - verts[i]
            s = np.cross(np.broadcast_to(e, hits.shape), hits - verts[i]) @ plane.n
            smin = np.minimum(smin, s)
            smax = np.maximum(smax, s)
        inside = (smin >= -1e-9) | (smax <= 1e-9)
        sel = np.where(valid)[0][inside]
        best_t[sel] = t_hit[valid][inside]
        best_label[sel] = plane.label
    return best_t, best_label


def generate_lidar(
    traj: AnalyticTrajectory,
    world_model: WorldModel,
    noise: SensorNoiseSpec,
    seed: int = 0,
    cone_full_angle_deg: float = 70.0,
) -> list[LidarFrame]:
    """Ray-cast LiDAR frames with per-point ground-truth plane labels.

    Points are stored in the r-frame at their individual sample times (raw,
    motion-skewed returns); frame timestamps are shifted by -t_d so a consumer
    adding its configured t_d recovers the IMU clock.
    """
    spec = traj.spec
    period = 1.0 / spec.lidar_rate
    half_angle = math.radians(cone_full_angle_deg / 2.0)
    n_frames = int(math.floor((spec.duration - period) * spec.lidar_rate)) + 1
    rng = np.random.default_rng(seed + 1)
    frames = []
    n_rays = spec.rays_per_frame
    extr_p, extr_q = noise.extrinsics
    for f in range(n_frames):
        t_f = f * period
        offsets = np.arange(n_rays) * (period / n_rays)
        ts = t_f + offsets
        p_b, _, _ = traj.pva(ts)
        q_b = traj.attitude(ts)
        mats = quats_to_mats(q_b)
        origins = np.einsum("nij,j->ni", mats, extr_p) + p_b
        r_wr = np.einsum("nij,jk->nik", mats, quats_to_mats(extr_q[None])[0])
        dirs_r = _cone_directions(np.arange(f * n_rays, (f + 1) * n_rays, dtype=float), half_angle)
        dirs_w = np.einsum("nij,nj->ni", r_wr, dirs_r)
        ranges, labels = _cast_rays(world_model, origins, dirs_w)
        hit = np.isfinite(ranges)
        if noise.lidar_range_sigma > 0.0:
            ranges = ranges + noise.lidar_range_sigma * rng.standard_normal(n_rays)
        else:
            rng.standard_normal(n_rays)  # keep the stream position seed-stable
        xyz = dirs_r[hit] * ranges[hit, None]
        frames.append(
            LidarFrame(
                t=t_f - noise.t_d,
                xyz=xyz,
                t_offset=offsets[hit],
                labels=labels[hit],
            )
        )
    return frames
