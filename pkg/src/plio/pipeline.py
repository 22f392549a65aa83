"""Odometry orchestration: initialization, mechanization, keyframing,
association, sliding-window optimization, and marginalization.

The processing is INS centric: a mechanized state chain anchored at the
newest optimized node provides prior poses for de-skew, map accumulation,
keyframe gating, and the initial guess of each new node.  The chain is
re-anchored after every window optimization.

A keyframe's point-cloud map accumulates every frame until the next keyframe
appears; association for a new keyframe therefore runs against finalized maps
of the older window keyframes.  Nodes leave the window through Schur
marginalization, their keyframes and maps are dropped with them, and the
marginalized pose is appended to the output trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .association import AssociationConfig, associate_keyframe
from .config import RunConfig
from .errors import InitializationFailure, TrajectoryGap
from .estimator import (
    BAFactor,
    Extrinsics,
    MargPrior,
    PreintFactor,
    SolverConfig,
    WindowState,
    marginal_covariance,
    marginalize_oldest,
    solve,
    two_step_optimize,
)
from .imu import (
    ImuSample,
    ImuState,
    PoseTrajectory,
    WorldConfig,
    mechanize,
    preintegrate,
    static_initialize,
)
from .mapping import (
    Keyframe,
    KeyframeGateConfig,
    LidarFrame,
    VoxelFilterConfig,
    accumulate_map,
    deskew,
    is_new_keyframe,
)
from .poses import Pose, compose, relative
from .rotations import exp_map, log_map
from .evaluation import TrajectoryRecord


@dataclass
class KeyframeReport:
    t: float
    node_id: int
    n_nodes: int
    n_ba_new: int
    n_ba_active: int
    n_preint: int
    n_culled_step1: int
    iterations: int
    cost_final: float
    timing: dict[str, float] = field(default_factory=dict)
    pos_cov_diag: np.ndarray | None = None
    att_cov_diag: np.ndarray | None = None
    removed_injected: int = 0
    removed_clean: int = 0
    active_injected: int = 0
    active_clean: int = 0


@dataclass
class RunReport:
    keyframes: list[KeyframeReport] = field(default_factory=list)
    covariance_mode: str = "adaptive"
    jacobian_mode: str = "frozen"
    n_frames: int = 0
    n_imu: int = 0
    wall_time: float = 0.0
    lidar_rate: float = 10.0

    @property
    def total_ba_factors(self) -> int:
        return sum(k.n_ba_new for k in self.keyframes)

    def equivalent_fps(self, duration: float) -> float:
        if self.wall_time <= 0:
            return float("inf")
        return duration / self.wall_time * self.lidar_rate


def _world_from_config(cfg: RunConfig) -> WorldConfig:
    return WorldConfig(
        g_w=np.array([0.0, 0.0, -cfg.gravity]),
        gyro_noise_density=cfg.gyro_noise_density,
        accel_noise_density=cfg.accel_noise_density,
        gyro_bias_walk=cfg.gyro_bias_walk,
        accel_bias_walk=cfg.accel_bias_walk,
    )


def _assoc_from_config(cfg: RunConfig) -> AssociationConfig:
    return AssociationConfig(
        max_neighbor_radius=cfg.max_neighbor_radius,
        sigma_eps_f2f=cfg.sigma_eps_f2f,
        thickness_cap=cfg.thickness_cap,
        selection_index=cfg.selection_index,
        variance_floor=cfg.variance_floor,
        covariance_mode=cfg.covariance_mode,
        fixed_sigma_eps=cfg.fixed_sigma_eps,
        max_source_points=cfg.max_source_points,
        normal_consistency_deg=cfg.normal_consistency_deg,
        cull_sigma_floor=cfg.cull_sigma_floor,
    )


def _solver_from_config(cfg: RunConfig) -> SolverConfig:
    return SolverConfig(
        huber_delta=cfg.huber_delta,
        chi1d_threshold=cfg.chi1d_threshold,
        max_iterations=cfg.max_iterations,
        step1_iterations=cfg.step1_iterations,
        lambda_init=cfg.lambda_init,
        lambda_max=cfg.lambda_max,
        cost_tol=cfg.cost_tol,
        step_tol=cfg.step_tol,
        marg_regularizer=cfg.marg_regularizer,
        world=_world_from_config(cfg),
        jacobian_mode=cfg.jacobian_mode,
    )


def _initial_prior(node_id: int, node: ImuState, extr: Extrinsics, cfg: RunConfig) -> MargPrior:
    """Anchoring prior on the first node plus a loose extrinsic prior."""
    inv_sig = np.concatenate(
        [
            np.full(3, 1.0 / cfg.init_pos_sigma),
            [
                1.0 / cfg.init_rollpitch_sigma,
                1.0 / cfg.init_rollpitch_sigma,
                1.0 / cfg.init_yaw_sigma,
            ],
            np.full(3, 1.0 / cfg.init_vel_sigma),
            np.full(3, 1.0 / cfg.init_bg_sigma),
            np.full(3, 1.0 / cfg.init_ba_sigma),
        ]
    )
    inv_sig_e = np.concatenate(
        [np.full(3, 1.0 / cfg.extr_pos_sigma), np.full(3, 1.0 / cfg.extr_rot_sigma)]
    )
    jac_node = np.zeros((21, 15))
    jac_node[0:15, :] = np.diag(inv_sig)
    jac_extr = np.zeros((21, 6))
    jac_extr[15:21, :] = np.diag(inv_sig_e)
    return MargPrior(
        node_ids=[node_id],
        jac_nodes={node_id: jac_node},
        jac_extr=jac_extr,
        r0=np.zeros(21),
        lin_nodes={node_id: node.copy()},
        lin_extr=extr.copy(),
        constant=0.0,
    )


class OdometryPipeline:
    """Stateful frame-by-frame estimator driven by process_dataset."""

    def __init__(self, config: RunConfig):
        self.cfg = config.validate()
        self.world = _world_from_config(config)
        self.assoc_cfg = _assoc_from_config(config)
        self.solver_cfg = _solver_from_config(config)
        self.gate = KeyframeGateConfig(
            translation=config.keyframe_translation,
            rotation_deg=config.keyframe_rotation_deg,
            interval=config.keyframe_interval,
        )
        self.voxel = VoxelFilterConfig(config.voxel_size)
        self.extrinsics = Extrinsics(
            config.extrinsic_translation.copy(), exp_map(config.extrinsic_rotvec)
        )
        self.initialized = False
        self.window: WindowState | None = None
        self.keyframes: list[Keyframe | None] = []
        self.ba_factors: list[BAFactor] = []
        self.preint_factors: list[PreintFactor] = []
        self.ins_chain: list[ImuState] = []
        self.samples_since_anchor: list[ImuSample] = []
        self.pending_frames: list[LidarFrame] = []
        self.next_node_id = 0
        self.out_rows: list[tuple[float, np.ndarray, np.ndarray]] = []
        self.report = RunReport(
            covariance_mode=config.covariance_mode, jacobian_mode=config.jacobian_mode
        )
        self.injected_ids: set[int] = set()

    # -- INS chain ---------------------------------------------------------

    def _anchor_chain(self, state: ImuState) -> None:
        """Rebuild the mechanized chain from an optimized state.

        The anchor time need not land on a sample; an interpolated boundary
        sample keeps the first integration interval exact.
        """
        samples = self.samples_since_anchor
        kept = [s for s in samples if s.t > state.t + 1e-9]
        before = [s for s in samples if s.t <= state.t + 1e-9]
        if kept and before:
            a, b = before[-1], kept[0]
            if state.t > a.t + 1e-9:
                u = (state.t - a.t) / (b.t - a.t)
                kept.insert(
                    0,
                    ImuSample(
                        t=state.t,
                        gyro=a.gyro + (b.gyro - a.gyro) * u,
                        accel=a.accel + (b.accel - a.accel) * u,
                    ),
                )
            else:
                kept.insert(0, before[-1])
        elif before:
            kept = [before[-1]]
        self.samples_since_anchor = kept
        self.ins_chain = [state.copy()]
        chain = self.ins_chain
        for s0, s1 in zip(kept[:-1], kept[1:]):
            if s1.t <= chain[-1].t + 1e-12:
                continue
            chain.append(mechanize(chain[-1], s0, s1, self.world))

    def _extend_chain(self, sample: ImuSample) -> None:
        self.samples_since_anchor.append(sample)
        if len(self.samples_since_anchor) >= 2 and self.ins_chain:
            s0 = self.samples_since_anchor[-2]
            if sample.t > self.ins_chain[-1].t + 1e-12:
                self.ins_chain.append(mechanize(self.ins_chain[-1], s0, sample, self.world))

    def _chain_trajectory(self) -> PoseTrajectory:
        return PoseTrajectory.from_states(self.ins_chain)

    def _chain_state_at(self, t: float) -> ImuState:
        """Mechanized state at time t (nearest-sample interpolation)."""
        traj = self._chain_trajectory()
        p, q = traj.interpolate(np.array([t]))
        # velocity and biases from the nearest chain state
        idx = int(np.argmin(np.abs(traj.t - t)))
        base = self.ins_chain[idx]
        return ImuState(t=t, p=p[0], q=q[0], v=base.v.copy(), bg=base.bg.copy(), ba=base.ba.copy())

    # -- sample interpolation for preintegration ---------------------------

    @staticmethod
    def _samples_between(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
        """Samples covering [t0, t1] with linearly interpolated endpoints."""
        ts = np.array([s.t for s in samples])
        i0 = int(np.searchsorted(ts, t0, side="right"))
        i1 = int(np.searchsorted(ts, t1, side="left"))
        if i0 == 0 or i1 >= len(samples):
            raise TrajectoryGap(f"IMU does not cover [{t0:.3f}, {t1:.3f}]")

        def interp(t, a, b):
            u = (t - a.t) / (b.t - a.t)
            return ImuSample(
                t=t, gyro=a.gyro + (b.gyro - a.gyro) * u, accel=a.accel + (b.accel - a.accel) * u
            )

        first = interp(t0, samples[i0 - 1], samples[i0])
        last = interp(t1, samples[i1 - 1], samples[i1])
        mid = [s for s in samples[i0:i1] if t0 + 1e-12 < s.t < t1 - 1e-12]
        return [first] + mid + [last]

    # -- keyframe handling --------------------------------------------------

    def _node_pose(self, slot: int) -> Pose:
        node = self.window.nodes[slot]
        return (node.p, node.q)

    def _finalize_previous_map(self, frames: list[LidarFrame], slot_prev: int, slot_new: int) -> None:
        """Rebuild a keyframe's map from its epoch with an endpoint-corrected
        chain.

        The mechanized increments over the epoch are pinned to the optimized
        states of the epoch's two bounding nodes; the residual endpoint gap is
        distributed log-linearly over time.  Map smear then depends only on
        the mechanization curvature error between pinned endpoints, not on
        the velocity or bias error of the estimate when the epoch was
        recorded.
        """
        if not frames:
            return
        kf = self.keyframes[slot_prev]
        traj = self._chain_trajectory()
        n_prev = self.window.nodes[slot_prev]
        n_new = self.window.nodes[slot_new]
        t0, t1 = n_prev.t, n_new.t
        if not traj.covers(t0, t1):
            return
        p0, q0 = traj.interpolate(np.array([t0, t1]))
        chain0 = (p0[0], q0[0])
        chain1 = (p0[1], q0[1])
        t_prev_cur = (n_prev.p, n_prev.q)
        t_new_cur = (n_new.p, n_new.q)
        rel_chain_end = relative(chain0, chain1)
        gap = relative(compose(t_prev_cur, rel_chain_end), t_new_cur)
        gap_phi = log_map(gap[1])
        span = max(t1 - t0, 1e-9)
        pairs = []
        for frame in frames:
            pf, qf = traj.interpolate(np.array([frame.t]))
            rel_t = relative(chain0, (pf[0], qf[0]))
            s = np.clip((frame.t - t0) / span, 0.0, 1.0)
            corr = (s * gap[0], exp_map(s * gap_phi))
            body = compose(compose(t_prev_cur, rel_t), corr)
            pairs.append((compose(body, self.extrinsics.pose), frame))
        kf_pose_r = compose(t_prev_cur, self.extrinsics.pose)
        new_kf = accumulate_map(
            kf_pose_r, pairs, self.voxel, t=kf.t, node_index=kf.node_index, raw_points=kf.raw_points
        )
        self.keyframes[slot_prev] = new_kf

    def _window_poses(self) -> list[Pose]:
        return [self._node_pose(i) for i in range(self.window.n_nodes)]

    def _record_marginalized(self) -> None:
        node = self.window.nodes[0]
        self.out_rows.append((node.t, node.p.copy(), node.q.copy()))

    # -- main per-frame step -------------------------------------------------

    def handle_frame(self, frame: LidarFrame, corrupt_hook=None) -> None:
        if frame.size == 0:
            return
        traj = self._chain_trajectory()
        t_end = frame.t + float(frame.t_offset.max())
        if not traj.covers(frame.t, t_end):
            raise TrajectoryGap(f"INS chain does not cover frame at {frame.t:.3f}")
        frame = deskew(frame, traj, self.extrinsics.pose)
        p, q = traj.interpolate(np.array([frame.t]))
        body_pose = (p[0], q[0])

        if self.window is None:
            self._start_first_keyframe(frame, body_pose)
            return

        last_kf_slot = len(self.keyframes) - 1
        last_pose = self._node_pose(last_kf_slot)
        elapsed = frame.t - self.window.nodes[last_kf_slot].t
        gate = self.gate
        if self.next_node_id <= self.cfg.calibrate_extrinsics_after:
            gate = KeyframeGateConfig(
                translation=min(self.gate.translation, 0.15),
                rotation_deg=min(self.gate.rotation_deg, 5.0),
                interval=min(self.gate.interval, self.cfg.bootstrap_interval),
            )
        if not is_new_keyframe(last_pose, body_pose, elapsed, gate):
            self.pending_frames.append(frame)
            return
        self._new_keyframe(frame, corrupt_hook)

    def _start_first_keyframe(self, frame: LidarFrame, body_pose: Pose) -> None:
        node = self._chain_state_at(frame.t)
        kf = accumulate_map(
            compose(body_pose, self.extrinsics.pose),
            [(compose(body_pose, self.extrinsics.pose), frame)],
            self.voxel,
            t=frame.t,
            node_index=0,
        )
        self.window = WindowState(
            nodes=[node],
            extrinsics=self.extrinsics,
            t_d=self.cfg.t_d,
            ids=[self.next_node_id],
        )
        self.window.prior = _initial_prior(self.next_node_id, node, self.extrinsics, self.cfg)
        self.next_node_id += 1
        self.keyframes = [kf]
        self.pending_frames = [frame]
        self._anchor_chain(node)

    def _new_keyframe(self, frame: LidarFrame, corrupt_hook=None) -> None:
        timing = {}
        epoch_frames = list(self.pending_frames)
        node = self._chain_state_at(frame.t)
        node_id = self.next_node_id
        self.next_node_id += 1
        slot = self.window.n_nodes
        self.window.nodes.append(node)
        self.window.ids.append(node_id)
        body_pose = (node.p, node.q)
        kf = accumulate_map(
            compose(body_pose, self.extrinsics.pose),
            [(compose(body_pose, self.extrinsics.pose), frame)],
            self.voxel,
            t=frame.t,
            node_index=slot,
        )
        self.keyframes.append(kf)

        t0 = time.perf_counter()
        prev_t = self.window.nodes[slot - 1].t
        seg = self._samples_between(self.samples_since_anchor, prev_t, frame.t)
        prev = self.window.nodes[slot - 1]
        delta = preintegrate(seg, (prev.bg.copy(), prev.ba.copy()), self.world)
        self.preint_factors.append(PreintFactor(delta=delta, i=slot - 1, j=slot))
        timing["preint"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        assocs = associate_keyframe(
            self._window_poses(), self.keyframes, slot, self.extrinsics.pose, self.assoc_cfg
        )
        if len(assocs) > self.cfg.max_ba_factors:
            order = np.argsort([-a.member_count for a in assocs], kind="stable")
            assocs = [assocs[i] for i in order[: self.cfg.max_ba_factors]]
        new_factors = [BAFactor(association=a) for a in assocs]
        timing["associate"] = time.perf_counter() - t0

        if corrupt_hook is not None:
            injected = corrupt_hook(node_id, new_factors, self.window)
            for f in injected:
                self.injected_ids.add(id(f))
        self.ba_factors.extend(new_factors)

        t0 = time.perf_counter()
        fixed = None
        if self.next_node_id <= self.cfg.calibrate_extrinsics_after:
            eo = 15 * self.window.n_nodes
            fixed = np.arange(eo, eo + 6)
        window, report, survivors, removed = two_step_optimize(
            self.window, self.ba_factors, self.preint_factors, self.solver_cfg, fixed_dims=fixed
        )
        self.window = window
        self.extrinsics = self.window.extrinsics
        removed_injected = sum(
            1 for f, r in zip(self.ba_factors, removed) if r and id(f) in self.injected_ids
        )
        removed_clean = int(removed.sum()) - removed_injected
        active_injected = sum(1 for f in self.ba_factors if id(f) in self.injected_ids)
        self.ba_factors = survivors
        timing["solve"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        self._finalize_previous_map(epoch_frames, slot - 1, slot)
        timing["map"] = time.perf_counter() - t0

        kf_rep = KeyframeReport(
            t=frame.t,
            node_id=node_id,
            n_nodes=self.window.n_nodes,
            n_ba_new=len(new_factors),
            n_ba_active=len(self.ba_factors),
            n_preint=len(self.preint_factors),
            n_culled_step1=int(removed.sum()),
            iterations=report.iterations,
            cost_final=report.cost_final,
            timing=timing,
            removed_injected=removed_injected,
            removed_clean=removed_clean,
            active_injected=active_injected,
            active_clean=len(removed) - active_injected,
        )
        if report.hessian is not None:
            cols = np.arange(15 * slot, 15 * slot + 6)
            cov = marginal_covariance(report.hessian, cols)
            kf_rep.pos_cov_diag = np.diag(cov)[0:3].copy()
            kf_rep.att_cov_diag = np.diag(cov)[3:6].copy()
        self.report.keyframes.append(kf_rep)

        t0 = time.perf_counter()
        while self.window.n_nodes > self.cfg.window_size + 1:
            self._record_marginalized()
            self.window, self.ba_factors, self.preint_factors = marginalize_oldest(
                self.window, self.ba_factors, self.preint_factors, self.solver_cfg
            )
            self.keyframes.pop(0)
            for k in self.keyframes:
                if k is not None:
                    k.node_index -= 1
        timing["marginalize"] = time.perf_counter() - t0

        # re-anchor mechanization at the newest optimized node
        newest = self.window.nodes[-1]
        self._anchor_chain(newest)
        self.pending_frames = [frame]

    def finish(self) -> TrajectoryRecord:
        rows = list(self.out_rows)
        if self.window is not None:
            for node in self.window.nodes:
                rows.append((node.t, node.p.copy(), node.q.copy()))
        if not rows:
            return TrajectoryRecord(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
        rows.sort(key=lambda r: r[0])
        t = np.array([r[0] for r in rows])
        p = np.array([r[1] for r in rows])
        q = np.array([r[2] for r in rows])
        keep = np.concatenate([[True], np.diff(t) > 0])
        return TrajectoryRecord(t[keep], p[keep], q[keep])


def run_odometry(
    imu_samples: list[ImuSample],
    frames: list[LidarFrame],
    config: RunConfig,
    corrupt_hook=None,
) -> tuple[TrajectoryRecord, RunReport]:
    """Batch driver: initialize on the leading stationary segment, then feed
    frames in time order while pumping IMU samples.

    Raises InitializationFailure when the leading segment is too short or not
    stationary.
    """
    start_wall = time.perf_counter()
    pipe = OdometryPipeline(config)
    if not imu_samples:
        raise InitializationFailure("no IMU data")
    t_start = imu_samples[0].t
    init_end = t_start + config.init_duration
    init_samples = [s for s in imu_samples if s.t <= init_end + 1e-9]
    try:
        init_state = static_initialize(
            init_samples,
            pipe.world,
            min_duration=config.init_duration * 0.999,
            max_gyro_std=config.init_max_gyro_std,
        )
    except Exception as e:
        raise InitializationFailure(str(e)) from e
    pipe.initialized = True
    pipe.samples_since_anchor = list(init_samples)
    pipe._anchor_chain(init_state)

    frames = sorted(frames, key=lambda f: f.t)
    frame_iter = iter(frames)
    pending = next(frame_iter, None)
    for sample in imu_samples[len(init_samples) :]:
        pipe._extend_chain(sample)
        while pending is not None:
            t_shifted = pending.t + config.t_d
            t_end = t_shifted + (float(pending.t_offset.max()) if pending.size else 0.0)
            if t_end >= sample.t - 1e-9:
                break
            if t_shifted >= init_state.t:
                frame = LidarFrame(
                    t=t_shifted,
                    xyz=pending.xyz,
                    t_offset=pending.t_offset,
                    labels=pending.labels,
                )
                pipe.handle_frame(frame, corrupt_hook)
            pending = next(frame_iter, None)
    record = pipe.finish()
    pipe.report.n_frames = len(frames)
    pipe.report.n_imu = len(imu_samples)
    pipe.report.wall_time = time.perf_counter() - start_wall
    return record, pipe.report
