"""F2F data association and same-plane point sets across keyframes.

A source point from the latest keyframe is projected into every other
keyframe's point-cloud map; five neighbors are found and a plane fitted.  A
projection that lands on a well-conditioned, thin neighbor plane within the
distance gate counts as a successful frame-to-frame association.  The nearest
neighbor of each successful association plus the original point form the
same-plane observation set; a set keeps at least five members across distinct
keyframes after +-3 sigma outlier culling in the world frame.

The per-factor measurement variance is the mean of the squared neighbor-set
thicknesses over the contributing keyframes (the latest keyframe has no
neighbor set of its own, so it does not contribute), floored to keep
noise-free data well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, MapTooSmall
from .mapping import Keyframe, knn, knn_batch
from .planes import fit_plane, fit_planes_batch, plane_thickness
from .poses import Pose, compose, inverse, relative, transform
from .rotations import quat_to_mat

NEIGHBOR_COUNT = 5


@dataclass
class AssociationConfig:
    max_neighbor_radius: float = 1.0
    sigma_eps_f2f: float = 0.05
    thickness_cap: float = 0.0025
    selection_index: int = 0
    min_members: int = 5
    variance_floor: float = 1e-8
    covariance_mode: str = "adaptive"  # adaptive | fixed
    fixed_sigma_eps: float = 0.05
    max_source_points: int = 600
    # lower bound on the +-3 sigma culling std in adaptive mode: simulated
    # planes can be so flat that the thickness-derived sigma undercuts the
    # short-term INS drift and starves the estimator of measurements
    cull_sigma_floor: float = 0.03
    # a member whose local neighbor-plane normal deviates more than this from
    # the joint world-frame fit is dropped; near-collinear member sets can
    # otherwise absorb an off-plane point that the 3-sigma gate cannot see
    normal_consistency_deg: float = 20.0


@dataclass
class F2FMatch:
    """One successful frame-to-frame association of a source point."""

    source_point: np.ndarray
    target_keyframe: int
    neighbors: np.ndarray  # (5, 3), ascending distance to the projected point
    plane_n: np.ndarray
    plane_d: float
    thickness: float
    neighbor_labels: np.ndarray | None = None


@dataclass
class SamePlaneAssociation:
    """One multi-keyframe plane-point observation set.

    node_slots[i] is the window slot owning points_r[i] (expressed in that
    keyframe's r-frame); exactly one member belongs to the latest keyframe.
    """

    node_slots: np.ndarray
    points_r: np.ndarray
    latest_pos: int
    variance: float
    member_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.node_slots)
        if n < 5:
            raise ValueError(f"association needs >= 5 members, got {n}")
        if len(np.unique(self.node_slots)) != n:
            raise ValueError("association keyframes must be distinct")
        if self.variance <= 0.0:
            raise ValueError("association variance must be positive")
        if not 0 <= self.latest_pos < n:
            raise ValueError("latest_pos out of range")

    @property
    def member_count(self) -> int:
        return len(self.node_slots)


def adaptive_covariance(thicknesses, variance_floor: float = 1e-8) -> float:
    """Mean squared neighbor-set thickness over the contributing keyframes."""
    g = np.asarray(thicknesses, dtype=float)
    return max(float(np.mean(g * g)), variance_floor)


def _sigma_from_variance(variance: float) -> float:
    """Point-to-plane std backed out of a thickness variance."""
    return (0.5 * variance) ** 0.25


def f2f_associate(
    point: np.ndarray,
    latest_pose: Pose,
    target: Keyframe,
    target_pose: Pose,
    extrinsics: Pose,
    config: AssociationConfig,
) -> F2FMatch | None:
    """Single-point frame-to-frame association (reference implementation).

    latest_pose/target_pose are body poses; the point is projected through
    the extrinsics into the target keyframe's r-frame, five neighbors are
    looked up and validated.  Returns None on any soft validation failure.
    """
    if target.local_map.shape[0] < NEIGHBOR_COUNT:
        raise MapTooSmall(f"target map has {target.local_map.shape[0]} points")
    rel = relative(compose(target_pose, extrinsics), compose(latest_pose, extrinsics))
    projected = transform(rel, np.asarray(point, dtype=float))
    neighbors, idx, dists = knn(target, projected, NEIGHBOR_COUNT)
    if dists[-1] > config.max_neighbor_radius:
        return None
    try:
        plane = fit_plane(neighbors)
    except DegenerateGeometry:
        return None
    if abs(float(plane.n @ projected + plane.d)) > 3.0 * config.sigma_eps_f2f:
        return None
    if plane.thickness > config.thickness_cap:
        return None
    labels = target.map_labels[idx] if target.map_labels is not None else None
    return F2FMatch(
        source_point=np.asarray(point, dtype=float),
        target_keyframe=target.node_index,
        neighbors=neighbors,
        plane_n=plane.n,
        plane_d=plane.d,
        thickness=plane.thickness,
        neighbor_labels=labels,
    )


def f2f_associate_batch(
    points: np.ndarray,
    latest_pose: Pose,
    target: Keyframe,
    target_pose: Pose,
    extrinsics: Pose,
    config: AssociationConfig,
):
    """Vectorized f2f_associate over (M, 3) source points.

    Returns (ok (M,), selected (M, 3), gammas (M,), neighbors (M, 5, 3),
    neighbor_idx (M, 5), plane_n (M, 3), plane_d (M,)).
    """
    if target.local_map.shape[0] < NEIGHBOR_COUNT:
        raise MapTooSmall(f"target map has {target.local_map.shape[0]} points")
    rel = relative(compose(target_pose, extrinsics), compose(latest_pose, extrinsics))
    projected = points @ quat_to_mat(rel[1]).T + rel[0]
    dists, idx = knn_batch(target, projected, NEIGHBOR_COUNT)
    neighbors = target.local_map[idx]
    n, d, gamma, ok_fit = fit_planes_batch(neighbors)
    eps = np.einsum("mi,mi->m", n, projected) + d
    ok = (
        (dists[:, -1] <= config.max_neighbor_radius)
        & ok_fit
        & (np.abs(eps) <= 3.0 * config.sigma_eps_f2f)
        & (gamma <= config.thickness_cap)
    )
    selected = neighbors[:, config.selection_index, :]
    return ok, selected, gamma, neighbors, idx, n, d


def cull_outliers(
    node_slots: np.ndarray,
    points_r: np.ndarray,
    window_poses: list[Pose],
    extrinsics: Pose,
    sigma_eps_w: float,
) -> np.ndarray | None:
    """Single-pass +-3 sigma outlier mask over a same-plane candidate set.

    Projects every observation to the world frame, fits one plane, and keeps
    the members whose point-to-plane distance stays within 3 sigma.  Returns
    the keep mask, or None when the world-frame fit is degenerate.
    """
    if len(node_slots) < 3:
        return None
    pts_w = np.empty_like(points_r)
    for i, slot in enumerate(node_slots):
        t_w_r = compose(window_poses[slot], extrinsics)
        pts_w[i] = transform(t_w_r, points_r[i])
    try:
        plane = fit_plane(pts_w)
    except DegenerateGeometry:
        return None
    eps = pts_w @ plane.n + plane.d
    return np.abs(eps) <= 3.0 * sigma_eps_w


def _normals_consistent(
    matches: list[F2FMatch],
    slots: np.ndarray,
    pts_r: np.ndarray,
    window_poses: list[Pose],
    extrinsics: Pose,
    config: AssociationConfig,
) -> np.ndarray:
    """Per-member agreement of the local neighbor-plane normals with the
    joint world-frame plane.  The original point carries no local plane and
    always passes."""
    keep = np.ones(len(slots), dtype=bool)
    if not matches or config.normal_consistency_deg >= 90.0:
        return keep
    pts_w = np.empty_like(pts_r)
    normals_w = []
    for i, slot in enumerate(slots):
        t_w_r = compose(window_poses[slot], extrinsics)
        pts_w[i] = transform(t_w_r, pts_r[i])
        if i < len(matches) and matches[i].plane_n.size == 3:
            normals_w.append(quat_to_mat(t_w_r[1]) @ matches[i].plane_n)
        elif i < len(matches):
            normals_w.append(None)
    try:
        joint = fit_plane(pts_w)
    except DegenerateGeometry:
        return keep
    cos_tol = np.cos(np.radians(config.normal_consistency_deg))
    for i, n_w in enumerate(normals_w):
        if n_w is None:
            continue
        if abs(float(n_w @ joint.n)) < cos_tol:
            keep[i] = False
    return keep


def build_same_plane(
    source_point: np.ndarray,
    source_slot: int,
    matches: list[F2FMatch],
    window_poses: list[Pose],
    extrinsics: Pose,
    config: AssociationConfig,
    source_label: int | None = None,
) -> SamePlaneAssociation | None:
    """Assemble one same-plane observation set from the f2f matches.

    The observation set is the selected neighbor of every successful match
    plus the original point; the whole set must survive outlier culling with
    at least min_members members, the original point included.
    """
    if len(matches) + 1 < config.min_members:
        return None
    slots = np.array([m.target_keyframe for m in matches] + [source_slot])
    pts = np.vstack([m.neighbors[config.selection_index] for m in matches] + [source_point])
    gammas = np.array([m.thickness for m in matches])
    if config.covariance_mode == "fixed":
        s2 = config.fixed_sigma_eps**2
        variance = 2.0 * s2 * s2
        sigma_cull = config.fixed_sigma_eps
    else:
        variance = adaptive_covariance(gammas, config.variance_floor)
        sigma_cull = max(_sigma_from_variance(variance), config.cull_sigma_floor)
    keep = cull_outliers(slots, pts, window_poses, extrinsics, sigma_cull)
    if keep is None or not keep[-1]:
        return None
    keep &= _normals_consistent(matches, slots, pts, window_poses, extrinsics, config)
    if not keep[-1] or keep.sum() < config.min_members:
        return None
    if config.covariance_mode != "fixed":
        kept_gammas = gammas[keep[:-1]]
        if kept_gammas.size:
            variance = adaptive_covariance(kept_gammas, config.variance_floor)
    labels = None
    if source_label is not None and all(m.neighbor_labels is not None for m in matches):
        labels = np.array(
            [m.neighbor_labels[config.selection_index] for m in matches] + [source_label]
        )[keep]
    latest_pos = int(keep.sum()) - 1
    return SamePlaneAssociation(
        node_slots=slots[keep],
        points_r=pts[keep],
        latest_pos=latest_pos,
        variance=variance,
        member_labels=labels,
    )


def associate_keyframe(
    window_poses: list[Pose],
    keyframes: list[Keyframe | None],
    latest_slot: int,
    extrinsics: Pose,
    config: AssociationConfig,
) -> list[SamePlaneAssociation]:
    """Full association pass for a freshly created keyframe.

    Candidate source points come from the latest keyframe's map (stride
    subsampled to the configured budget); each is matched against every
    older keyframe map in the window.  Deterministic: fixed source order,
    fixed keyframe order.
    """
    latest = keyframes[latest_slot]
    sources = latest.local_map
    src_labels = latest.map_labels
    n_src = sources.shape[0]
    if n_src == 0:
        return []
    if n_src > config.max_source_points:
        sel = np.unique(np.linspace(0, n_src - 1, config.max_source_points).astype(int))
        sources = sources[sel]
        src_labels = src_labels[sel] if src_labels is not None else None
    latest_pose = window_poses[latest_slot]

    per_target = {}
    for slot, kf in enumerate(keyframes):
        if slot == latest_slot or kf is None:
            continue
        if kf.local_map.shape[0] < NEIGHBOR_COUNT:
            continue
        per_target[slot] = f2f_associate_batch(
            sources, latest_pose, kf, window_poses[slot], extrinsics, config
        )

    needed = config.min_members - 1
    if not per_target:
        return []
    ok_stack = np.stack([res[0] for res in per_target.values()])
    counts = ok_stack.sum(axis=0)
    candidates = np.where(counts >= needed)[0]
    out = []
    for i in candidates:
        matches = []
        for slot, (ok, selected, gammas, neighbors, idx, pn, pd) in per_target.items():
            if not ok[i]:
                continue
            kf = keyframes[slot]
            labels = kf.map_labels[idx[i]] if kf.map_labels is not None else None
            matches.append(
                F2FMatch(
                    source_point=sources[i],
                    target_keyframe=slot,
                    neighbors=neighbors[i],
                    plane_n=pn[i],
                    plane_d=float(pd[i]),
                    thickness=float(gammas[i]),
                    neighbor_labels=labels,
                )
            )
        assoc = build_same_plane(
            sources[i],
            latest_slot,
            matches,
            window_poses,
            extrinsics,
            config,
            source_label=int(src_labels[i]) if src_labels is not None else None,
        )
        if assoc is not None:
            out.append(assoc)
    return out
