import numpy as np
import pytest

from plio.errors import EmptyMap, TrajectoryGap
from plio.imu import PoseTrajectory
from plio.mapping import (
    Keyframe,
    KeyframeGateConfig,
    LidarFrame,
    VoxelFilterConfig,
    accumulate_map,
    deskew,
    is_new_keyframe,
    knn,
    knn_batch,
    reskew,
    voxel_downsample,
)
from plio.poses import compose, transform
from plio.rotations import exp_map

IDENT = np.array([1.0, 0.0, 0.0, 0.0])
EXTR_ID = (np.zeros(3), IDENT)


def const_traj(t0, t1, p=np.zeros(3), q=IDENT):
    return PoseTrajectory(np.array([t0, t1]), np.array([p, p]), np.array([q, q]))


def make_frame(xyz, t=0.0, offsets=None):
    xyz = np.asarray(xyz, dtype=float)
    if offsets is None:
        offsets = np.zeros(len(xyz))
    return LidarFrame(t=t, xyz=xyz, t_offset=np.asarray(offsets, dtype=float))


# ---------------------------------------------------------------------------
# de-skew
# ---------------------------------------------------------------------------


def test_deskew_stationary_is_identity():
    rng = np.random.default_rng(0)
    frame = make_frame(rng.normal(size=(50, 3)), t=1.0, offsets=rng.uniform(0, 0.1, 50))
    out = deskew(frame, const_traj(0.9, 1.2), EXTR_ID)
    assert np.allclose(out.xyz, frame.xyz, atol=1e-12)


def test_deskew_constant_velocity():
    # body translating at 1 m/s along x, identity attitude, identity extrinsics
    v = np.array([1.0, 0.0, 0.0])
    t = np.array([0.0, 1.0])
    traj = PoseTrajectory(t, np.array([t[0] * v, t[1] * v]), np.array([IDENT, IDENT]))
    pt = np.array([[2.0, 0.0, 0.0]])
    frame = make_frame(pt, t=0.0, offsets=[0.05])
    out = deskew(frame, traj, EXTR_ID)
    # the sensor had advanced 0.05 m when it measured the return, so in the
    # frame-start r-frame the point sits 0.05 m farther ahead
    assert np.allclose(out.xyz[0], [2.05, 0.0, 0.0], atol=1e-12)


def test_deskew_rotation_matches_pose_chain_oracle():
    rate = 0.1  # rad/s about z
    ts = np.linspace(0.0, 0.2, 21)
    qs = np.array([exp_map(np.array([0, 0, rate * t])) for t in ts])
    traj = PoseTrajectory(ts, np.zeros((21, 3)), qs)
    extr = (np.array([0.1, -0.2, 0.05]), exp_map(np.array([0.02, 0.01, -0.03])))
    rng = np.random.default_rng(1)
    xyz = rng.uniform(-2, 2, size=(40, 3))
    offsets = rng.uniform(0.0, 0.1, size=40)
    frame = LidarFrame(t=0.05, xyz=xyz, t_offset=offsets)
    out = deskew(frame, traj, extr)
    # per-point oracle built from explicit pose chains
    from plio.imu import interpolate_pose
    from plio.imu import ImuState
    from plio.poses import inverse

    states = [
        ImuState(t, np.zeros(3), q, np.zeros(3), np.zeros(3), np.zeros(3))
        for t, q in zip(ts, qs)
    ]
    p0, q0 = interpolate_pose(states, 0.05)
    t_w_r0 = compose((p0, q0), extr)
    for i in range(40):
        pi, qi = interpolate_pose(states, 0.05 + offsets[i])
        pw = transform(compose((pi, qi), extr), xyz[i])
        expected = transform(inverse(t_w_r0), pw)
        assert np.allclose(out.xyz[i], expected, atol=1e-9)


def test_deskew_reskew_roundtrip():
    ts = np.linspace(0.0, 0.3, 31)
    ps = np.stack([0.5 * ts, -0.2 * ts, 0.05 * ts], axis=1)
    qs = np.array([exp_map(np.array([0.05 * t, -0.02 * t, 0.3 * t])) for t in ts])
    traj = PoseTrajectory(ts, ps, qs)
    extr = (np.array([0.05, 0.0, -0.1]), exp_map(np.array([0.0, 0.1, 0.0])))
    rng = np.random.default_rng(2)
    frame = LidarFrame(
        t=0.1, xyz=rng.uniform(-3, 3, size=(60, 3)), t_offset=rng.uniform(0, 0.1, 60)
    )
    out = reskew(deskew(frame, traj, extr), traj, extr)
    assert np.allclose(out.xyz, frame.xyz, atol=1e-9)


def test_deskew_requires_coverage():
    frame = make_frame(np.ones((3, 3)), t=1.0, offsets=[0.0, 0.1, 0.3])
    with pytest.raises(TrajectoryGap):
        deskew(frame, const_traj(0.9, 1.2), EXTR_ID)


# ---------------------------------------------------------------------------
# keyframe gate
# ---------------------------------------------------------------------------


def test_keyframe_gate():
    cfg = KeyframeGateConfig()
    pose = (np.zeros(3), IDENT)
    assert not is_new_keyframe(pose, pose, 0.1, cfg)
    assert is_new_keyframe(pose, (np.array([0.5, 0, 0]), IDENT), 0.1, cfg)
    rotated = (np.zeros(3), exp_map(np.array([0, 0, 0.2])))
    # 0.2 rad is about 11.5 degrees, above the 10-degree gate
    assert np.degrees(0.2) > cfg.rotation_deg
    assert is_new_keyframe(pose, rotated, 0.1, cfg)
    assert is_new_keyframe(pose, pose, 1.5, cfg)


# ---------------------------------------------------------------------------
# voxel filter and map accumulation
# ---------------------------------------------------------------------------


def test_voxel_downsample_centroids_match_bruteforce():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, size=(500, 3))
    voxel = 0.25
    down, _ = voxel_downsample(pts, voxel)
    # brute-force binning oracle
    keys = {}
    for p in pts:
        k = tuple(np.floor(p / voxel).astype(int))
        keys.setdefault(k, []).append(p)
    expected = {k: np.mean(v, axis=0) for k, v in keys.items()}
    assert down.shape[0] == len(expected)
    got = {tuple(np.floor(c / voxel).astype(int)): c for c in down}
    for k, c in expected.items():
        assert np.allclose(got[k], c, atol=1e-12)


def test_voxel_downsample_idempotent():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-2, 2, size=(1000, 3))
    once, _ = voxel_downsample(pts, 0.3)
    twice, _ = voxel_downsample(once, 0.3)
    assert once.shape == twice.shape
    assert np.allclose(np.sort(once, axis=0), np.sort(twice, axis=0), atol=1e-15)


def test_voxel_downsample_label_purity():
    pts = np.array([[0.01, 0, 0], [0.02, 0, 0], [0.5, 0, 0], [0.52, 0, 0]])
    labels = np.array([1, 1, 2, 3])
    down, out = voxel_downsample(pts, 0.1, labels)
    by_key = {tuple(np.floor(c / 0.1).astype(int)): l for c, l in zip(down, out)}
    assert by_key[(0, 0, 0)] == 1
    assert by_key[(5, 0, 0)] == -1


def test_accumulate_map_single_frame_at_pose():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, size=(200, 3))
    frame = make_frame(pts)
    kf_pose = (np.zeros(3), IDENT)
    kf = accumulate_map(kf_pose, [(kf_pose, frame)], VoxelFilterConfig(0.2))
    expected, _ = voxel_downsample(pts, 0.2)
    assert np.allclose(np.sort(kf.local_map, axis=0), np.sort(expected, axis=0))


def test_accumulate_map_projects_frames():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(100, 3))
    frame = make_frame(pts)
    kf_pose = (np.array([1.0, 2.0, 0.0]), exp_map(np.array([0, 0, 0.5])))
    frame_pose = (np.array([1.5, 2.0, 0.1]), exp_map(np.array([0, 0, 0.7])))
    kf = accumulate_map(kf_pose, [(frame_pose, frame)], VoxelFilterConfig(1e-6))
    from plio.poses import inverse, compose as pcompose

    rel = pcompose(inverse(kf_pose), frame_pose)
    expected = transform(rel, pts)
    assert np.allclose(
        np.sort(kf.local_map, axis=0), np.sort(expected, axis=0), atol=1e-12
    )


def test_accumulate_two_identical_frames_dedupes():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, size=(300, 3))
    pose = (np.zeros(3), IDENT)
    kf = accumulate_map(pose, [(pose, make_frame(pts)), (pose, make_frame(pts))], VoxelFilterConfig(0.2))
    single, _ = voxel_downsample(pts, 0.2)
    assert kf.local_map.shape[0] == single.shape[0]
    assert kf.local_map.shape[0] <= 600


def test_accumulate_map_empty_raises():
    with pytest.raises(EmptyMap):
        accumulate_map((np.zeros(3), IDENT), [], VoxelFilterConfig())


# ---------------------------------------------------------------------------
# k-NN
# ---------------------------------------------------------------------------


def brute_force_knn(pts, query, k):
    d = np.linalg.norm(pts - query, axis=1)
    order = np.lexsort((np.arange(len(pts)), d))
    return order[:k]


def make_keyframe(pts):
    kf = Keyframe(t=0.0, node_index=0, raw_points=pts, local_map=pts)
    kf.build_index()
    return kf


def test_knn_exact_and_sorted():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-5, 5, size=(1000, 3))
    kf = make_keyframe(pts)
    query = pts[123]
    got, idx, dists = knn(kf, query, 5)
    assert idx[0] == 123 and dists[0] == 0.0
    assert np.all(np.diff(dists) >= 0)
    assert set(idx) == set(brute_force_knn(pts, query, 5))


def test_knn_whole_map():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-1, 1, size=(8, 3))
    kf = make_keyframe(pts)
    got, idx, dists = knn(kf, np.zeros(3), 8)
    assert len(idx) == 8
    assert np.all(np.diff(dists) >= 0)


def test_knn_k_larger_than_map():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    kf = make_keyframe(pts)
    got, idx, dists = knn(kf, np.array([0.1, 0, 0]), 5)
    assert len(idx) == 3


def test_knn_matches_linear_scan_randomized():
    rng = np.random.default_rng(10)
    for _ in range(20):
        pts = rng.uniform(-3, 3, size=(rng.integers(6, 400), 3))
        kf = make_keyframe(pts)
        query = rng.uniform(-3, 3, size=3)
        _, idx, _ = knn(kf, query, 5)
        assert list(idx) == list(brute_force_knn(pts, query, min(5, len(pts))))


def test_knn_batch_matches_single():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-2, 2, size=(500, 3))
    kf = make_keyframe(pts)
    queries = rng.uniform(-2, 2, size=(50, 3))
    dists, idx = knn_batch(kf, queries, 5)
    for i in range(50):
        _, idx_i, d_i = knn(kf, queries[i], 5)
        assert set(idx[i]) == set(idx_i)
