"""Sliding-window factor-graph optimizer.

States: up to n+1 IMU nodes (15 error dims each, ordered dp, dphi, dv, dbg,
dba) plus the 6-dim LiDAR-IMU extrinsics.  Quaternions update by right
multiplication with the exponential map.  Factors:

* plane-point BA factor: scalar residual equal to the mean squared
  point-to-plane distance of one same-plane observation set projected to the
  world frame.  The plane is refit from the current projections once per
  solver iteration and held fixed inside the iteration, both for the cost and
  for the analytical Jacobians (the sensitivity of the fitted plane to the
  states is deliberately dropped; see the full-FD mode for the variant that
  keeps it).
* preintegration factor: 15-dim residual between consecutive nodes, whitened
  with the propagated covariance.
* marginalization prior: linear factor from Schur elimination of the oldest
  node, kept with its energy constant so the total cost is continuous across
  marginalization.

The damped normal equations are solved densely (state dim <= 171); Huber
weighting applies to BA residuals only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .association import SamePlaneAssociation
from .errors import DegenerateGeometry, SingularInformation, SolverDiverged
from .imu import ImuState, PreintegrationDelta, WorldConfig, preintegration_jacobians, residual_covariance
from .planes import fit_plane
from .poses import Pose
from .rotations import (
    exp_map,
    log_map,
    quat_conj,
    quat_mul,
    quat_to_mat,
    right_jacobian_inv,
    skew,
)

NODE_DIM = 15
EXTR_DIM = 6


@dataclass
class Extrinsics:
    p_br_b: np.ndarray
    q_r_b: np.ndarray

    def copy(self) -> "Extrinsics":
        return Extrinsics(self.p_br_b.copy(), self.q_r_b.copy())

    @property
    def pose(self) -> Pose:
        return (self.p_br_b, self.q_r_b)


@dataclass(eq=False)
class BAFactor:
    association: SamePlaneAssociation

    @property
    def variance(self) -> float:
        return self.association.variance


@dataclass(eq=False)
class PreintFactor:
    delta: PreintegrationDelta
    i: int
    j: int


@dataclass
class MargPrior:
    """Linear prior r0 + J dx with dx taken against stored linearization
    points; `constant` preserves the eliminated factors' energy."""

    node_ids: list[int]
    jac_nodes: dict[int, np.ndarray]
    jac_extr: np.ndarray
    r0: np.ndarray
    lin_nodes: dict[int, ImuState]
    lin_extr: Extrinsics
    constant: float = 0.0

    @property
    def dim(self) -> int:
        return self.r0.shape[0]


@dataclass
class WindowState:
    nodes: list[ImuState]
    extrinsics: Extrinsics
    t_d: float = 0.0
    prior: MargPrior | None = None
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.nodes)))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> int:
        return NODE_DIM * self.n_nodes + EXTR_DIM

    def extr_offset(self) -> int:
        return NODE_DIM * self.n_nodes

    def copy(self) -> "WindowState":
        return WindowState(
            nodes=[s.copy() for s in self.nodes],
            extrinsics=self.extrinsics.copy(),
            t_d=self.t_d,
            prior=self.prior,
            ids=list(self.ids),
        )

    def apply_step(self, dx: np.ndarray) -> "WindowState":
        out = self.copy()
        for k, node in enumerate(out.nodes):
            d = dx[NODE_DIM * k : NODE_DIM * (k + 1)]
            node.p = node.p + d[0:3]
            node.q = quat_mul(node.q, exp_map(d[3:6]))
            node.v = node.v + d[6:9]
            node.bg = node.bg + d[9:12]
            node.ba = node.ba + d[12:15]
        e = dx[self.extr_offset() :]
        out.extrinsics.p_br_b = out.extrinsics.p_br_b + e[0:3]
        out.extrinsics.q_r_b = quat_mul(out.extrinsics.q_r_b, exp_map(e[3:6]))
        return out


@dataclass
class SolverConfig:
    huber_delta: float = 1.345
    chi1d_threshold: float = 3.0
    max_iterations: int = 30
    step1_iterations: int = 5
    lambda_init: float = 1e-6
    lambda_max: float = 1e12
    cost_tol: float = 1e-8
    step_tol: float = 1e-10
    grad_tol: float = 1e-12
    marg_regularizer: float = 1e-8
    world: WorldConfig = field(default_factory=WorldConfig)
    jacobian_mode: str = "frozen"  # frozen | full


@dataclass
class SolveReport:
    iterations: int = 0
    cost_initial: float = 0.0
    cost_final: float = 0.0
    termination: str = ""
    ba_whitened: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ba_valid: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    hessian: np.ndarray | None = None
    fixed_dims: np.ndarray | None = None


# ---------------------------------------------------------------------------
# BA measurement model
# ---------------------------------------------------------------------------


def _obs_projections(factor: BAFactor, window: WindowState):
    """World-frame projections of the observation set plus chain pieces."""
    assoc = factor.association
    extr = window.extrinsics
    r_rb = quat_to_mat(extr.q_r_b)
    pts_b = assoc.points_r @ r_rb.T + extr.p_br_b
    k = assoc.member_count
    pts_w = np.empty((k, 3))
    mats = []
    for i in range(k):
        node = window.nodes[int(assoc.node_slots[i])]
        r = quat_to_mat(node.q)
        mats.append(r)
        pts_w[i] = r @ pts_b[i] + node.p
    return pts_w, pts_b, mats


def ba_plane(factor: BAFactor, window: WindowState):
    """Fit (n, d) to the current world-frame projections."""
    pts_w, _, _ = _obs_projections(factor, window)
    plane = fit_plane(pts_w)
    return plane.n, plane.d


def ba_residual_frozen(factor: BAFactor, window: WindowState, n: np.ndarray, d: float) -> float:
    """Mean squared point-to-plane distance against a fixed plane."""
    pts_w, _, _ = _obs_projections(factor, window)
    eps = pts_w @ n + d
    return float(np.mean(eps * eps))


def ba_residual(factor: BAFactor, window: WindowState) -> float:
    """Plane-point BA residual with the plane refit from the current state."""
    n, d = ba_plane(factor, window)
    return ba_residual_frozen(factor, window, n, d)


def ba_jacobians(factor: BAFactor, window: WindowState, plane=None, with_obs_rows=False):
    """Residual and analytical Jacobians with the plane parameters frozen.

    Returns (residual, {slot: (6,) block}, extr block (6,), (n, d)).  Blocks
    are gradients over (dp, dphi) per node and (dp_br, dphi_rb) for the
    extrinsics.  With with_obs_rows=True a fifth element carries the
    per-observation distance gradients [(slot, g_node (6,), g_extr (6,))],
    used by the solver to restore the curvature a rank-one normal-equation
    term cannot represent.
    """
    if plane is None:
        plane = ba_plane(factor, window)
    n, d = plane
    assoc = factor.association
    pts_w, pts_b, mats = _obs_projections(factor, window)
    k = assoc.member_count
    eps = pts_w @ n + d
    residual = float(np.mean(eps * eps))
    r_rb = quat_to_mat(window.extrinsics.q_r_b)
    node_blocks: dict[int, np.ndarray] = {}
    extr_block = np.zeros(6)
    obs_rows = [] if with_obs_rows else None
    for i in range(k):
        slot = int(assoc.node_slots[i])
        g_node = np.empty(6)
        g_node[0:3] = n
        g_node[3:6] = -(n @ mats[i]) @ skew(pts_b[i])
        g_extr = np.empty(6)
        g_extr[0:3] = n @ mats[i]
        g_extr[3:6] = -(n @ mats[i] @ r_rb) @ skew(assoc.points_r[i])
        scale = (2.0 / k) * eps[i]
        block = node_blocks.setdefault(slot, np.zeros(6))
        block += scale * g_node
        extr_block += scale * g_extr
        if with_obs_rows:
            obs_rows.append((slot, g_node, g_extr))
    if with_obs_rows:
        return residual, node_blocks, extr_block, (n, d), obs_rows
    return residual, node_blocks, extr_block, (n, d)


def ba_jacobians_full_fd(factor: BAFactor, window: WindowState, h: float = 1e-6):
    """Central finite differences of the residual including the plane refit.

    This keeps the plane-parameter sensitivity the analytical form drops
    (the "tiny terms").  Vectorized over all perturbations of the involved
    pose and extrinsic dims.
    """
    assoc = factor.association
    slots = sorted({int(s) for s in assoc.node_slots})
    k = assoc.member_count
    extr = window.extrinsics
    r_rb = quat_to_mat(extr.q_r_b)
    pts_b0 = assoc.points_r @ r_rb.T + extr.p_br_b
    node_r = {s: quat_to_mat(window.nodes[s].q) for s in slots}
    node_p = {s: window.nodes[s].p for s in slots}
    base_w = np.empty((k, 3))
    for i in range(k):
        s = int(assoc.node_slots[i])
        base_w[i] = node_r[s] @ pts_b0[i] + node_p[s]

    pert_axes = [(s, a) for s in slots for a in range(6)] + [(-1, a) for a in range(6)]
    n_pert = len(pert_axes)
    stack = np.tile(base_w, (2 * n_pert, 1, 1))
    for pi, (s, a) in enumerate(pert_axes):
        for sign_i, sign in enumerate((h, -h)):
            row = 2 * pi + sign_i
            if s >= 0:
                mask = assoc.node_slots == s
                if a < 3:
                    stack[row, mask] = base_w[mask]
                    stack[row, mask, a] += sign
                else:
                    dphi = np.zeros(3)
                    dphi[a - 3] = sign
                    r_new = node_r[s] @ quat_to_mat(exp_map(dphi))
                    stack[row, mask] = pts_b0[mask] @ r_new.T + node_p[s]
            else:
                if a < 3:
                    dp = np.zeros(3)
                    dp[a] = sign
                    pts_b = assoc.points_r @ r_rb.T + (extr.p_br_b + dp)
                else:
                    dphi = np.zeros(3)
                    dphi[a - 3] = sign
                    r_new = r_rb @ quat_to_mat(exp_map(dphi))
                    pts_b = assoc.points_r @ r_new.T + extr.p_br_b
                for i in range(k):
                    sl = int(assoc.node_slots[i])
                    stack[row, i] = node_r[sl] @ pts_b[i] + node_p[sl]

    from .planes import fit_planes_batch

    n_b, d_b, _, ok = fit_planes_batch(stack)
    eps = np.einsum("mki,mi->mk", stack, n_b) + d_b[:, None]
    res = np.mean(eps * eps, axis=1)
    grads = (res[0::2] - res[1::2]) / (2 * h)
    node_blocks = {}
    extr_block = np.zeros(6)
    for pi, (s, a) in enumerate(pert_axes):
        if s >= 0:
            node_blocks.setdefault(s, np.zeros(6))[a] = grads[pi]
        else:
            extr_block[a] = grads[pi]
    plane = fit_plane(base_w)
    residual = float(np.mean((base_w @ plane.n + plane.d) ** 2))
    return residual, node_blocks, extr_block, (plane.n, plane.d)


# ---------------------------------------------------------------------------
# batched BA evaluation (hot path of the solver)
# ---------------------------------------------------------------------------


class BABatch:
    """Flat-array view of a BA factor list for vectorized evaluation.

    Observations are concatenated; plane fits run in grouped batches by
    member count.  Built once per solve (the factor list is fixed inside)."""

    def __init__(self, factors: list[BAFactor]):
        self.factors = factors
        sizes = np.array([f.association.member_count for f in factors], dtype=int)
        self.sizes = sizes
        self.variance = np.array([f.variance for f in factors])
        self.sigma = np.sqrt(self.variance)
        if len(factors):
            self.obs_pt = np.concatenate([f.association.points_r for f in factors])
            self.obs_slot = np.concatenate(
                [f.association.node_slots.astype(int) for f in factors]
            )
            self.obs_fid = np.repeat(np.arange(len(factors)), sizes)
        else:
            self.obs_pt = np.zeros((0, 3))
            self.obs_slot = np.zeros(0, dtype=int)
            self.obs_fid = np.zeros(0, dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.groups = {}
        for k in np.unique(sizes):
            fids = np.where(sizes == k)[0]
            obs_idx = np.stack([np.arange(self.offsets[f], self.offsets[f] + k) for f in fids])
            self.groups[int(k)] = (fids, obs_idx)

    def project(self, window: WindowState):
        """World projections of every observation plus per-node chain pieces."""
        from .rotations import quats_to_mats

        extr = window.extrinsics
        r_rb = quat_to_mat(extr.q_r_b)
        pts_b = self.obs_pt @ r_rb.T + extr.p_br_b
        node_q = np.array([n.q for n in window.nodes])
        node_p = np.array([n.p for n in window.nodes])
        mats = quats_to_mats(node_q)
        m_obs = mats[self.obs_slot]
        pts_w = np.einsum("nij,nj->ni", m_obs, pts_b) + node_p[self.obs_slot]
        return pts_w, pts_b, m_obs, r_rb

    def fit_planes(self, pts_w):
        """(normals (F,3), offsets (F,), valid (F,)) via grouped batched fits."""
        from .planes import fit_planes_batch

        n_f = len(self.factors)
        n_all = np.zeros((n_f, 3))
        d_all = np.zeros(n_f)
        ok_all = np.zeros(n_f, dtype=bool)
        for k, (fids, obs_idx) in self.groups.items():
            stack = pts_w[obs_idx]
            n, d, _, ok = fit_planes_batch(stack)
            n_all[fids] = n
            d_all[fids] = d
            ok_all[fids] = ok
        return n_all, d_all, ok_all

    def residuals(self, pts_w, n_all, d_all):
        eps = np.einsum("ti,ti->t", pts_w, n_all[self.obs_fid]) + d_all[self.obs_fid]
        sums = np.bincount(self.obs_fid, weights=eps * eps, minlength=len(self.factors))
        return sums / np.maximum(self.sizes, 1), eps


def _ba_batch_cost(batch: BABatch, window: WindowState, config) -> tuple[float, np.ndarray, np.ndarray]:
    """Robust cost plus whitened residuals of all BA factors (planes refit)."""
    if not batch.factors:
        return 0.0, np.zeros(0), np.zeros(0, dtype=bool)
    pts_w, _, _, _ = batch.project(window)
    n_all, d_all, ok = batch.fit_planes(pts_w)
    res, _ = batch.residuals(pts_w, n_all, d_all)
    u = np.where(ok, res / batch.sigma, np.nan)
    au = np.abs(u[ok])
    delta = config.huber_delta
    rho = np.where(au <= delta, 0.5 * au * au, delta * au - 0.5 * delta * delta)
    return float(rho.sum()), u, ok


def _ba_batch_linearize(batch: BABatch, window: WindowState, config, H, b):
    """Accumulate whitened BA rows (and the squared-norm curvature) into H, b.

    Returns (cost, u (F,), valid (F,), planes list).  In 'full' Jacobian mode
    the factor gradient rows come from central differences with plane refits;
    the curvature term always uses the analytical distance gradients.
    """
    n_f = len(batch.factors)
    if n_f == 0:
        return 0.0, np.zeros(0), np.zeros(0, dtype=bool), []
    dim = window.dim
    eo = window.extr_offset()
    pts_w, pts_b, m_obs, r_rb = batch.project(window)
    n_all, d_all, ok = batch.fit_planes(pts_w)
    res, eps = batch.residuals(pts_w, n_all, d_all)
    u = np.where(ok, res / batch.sigma, np.nan)
    delta = config.huber_delta
    au = np.abs(np.where(ok, u, 0.0))
    w = np.where(au <= delta, 1.0, delta / np.maximum(au, 1e-300))
    rho = np.where(au <= delta, 0.5 * au * au, delta * au - 0.5 * delta * delta)
    cost = float(rho[ok].sum())

    # per-observation distance gradients
    n_obs = n_all[batch.obs_fid]
    g_p = n_obs  # d eps / d p_w -> node position block
    n_m = np.einsum("ti,tij->tj", n_obs, m_obs)  # n^T R_i
    # d eps / d phi = -(n^T R) x pts_b  (row of the cross-product matrix)
    g_phi = -np.cross(n_m, pts_b)
    g_ep = n_m
    g_ephi = -np.cross(n_m @ r_rb, batch.obs_pt)

    scale = (2.0 / batch.sizes)[batch.obs_fid] * eps  # d r / d eps weights
    rows = np.zeros((n_f, dim))
    cols_p = 15 * batch.obs_slot
    for a in range(3):
        np.add.at(rows, (batch.obs_fid, cols_p + a), scale * g_p[:, a])
        np.add.at(rows, (batch.obs_fid, cols_p + 3 + a), scale * g_phi[:, a])
        np.add.at(rows, (batch.obs_fid, eo + a), scale * g_ep[:, a])
        np.add.at(rows, (batch.obs_fid, eo + 3 + a), scale * g_ephi[:, a])
    if config.jacobian_mode == "full":
        for fi in np.where(ok)[0]:
            _, blocks, extr_block, _ = ba_jacobians_full_fd(batch.factors[fi], window)
            rows[fi] = 0.0
            for slot, block in blocks.items():
                rows[fi, 15 * slot : 15 * slot + 6] = block
            rows[fi, eo : eo + 6] = extr_block

    sw = np.where(ok, np.sqrt(w) / batch.sigma, 0.0)
    rows_w = rows * sw[:, None]
    H += rows_w.T @ rows_w
    b += rows_w.T @ (np.sqrt(w) * np.where(ok, u, 0.0))

    # curvature of the squared-norm residual (zero-gradient PSD term)
    obs_scale = (w * np.where(ok, u, 0.0) / batch.sigma * 2.0 / batch.sizes)[batch.obs_fid]
    g_rows = np.zeros((len(batch.obs_fid), dim))
    t_idx = np.arange(len(batch.obs_fid))
    for a in range(3):
        g_rows[t_idx, cols_p + a] = g_p[:, a]
        g_rows[t_idx, cols_p + 3 + a] = g_phi[:, a]
        g_rows[t_idx, eo + a] = g_ep[:, a]
        g_rows[t_idx, eo + 3 + a] = g_ephi[:, a]
    g_rows *= np.sqrt(np.maximum(obs_scale, 0.0))[:, None]
    H += g_rows.T @ g_rows

    planes = [
        (n_all[i], float(d_all[i])) if ok[i] else None for i in range(n_f)
    ]
    return cost, u, ok, planes


# ---------------------------------------------------------------------------
# prior evaluation
# ---------------------------------------------------------------------------


def _state_minus(node: ImuState, lin: ImuState) -> np.ndarray:
    d = np.empty(NODE_DIM)
    d[0:3] = node.p - lin.p
    d[3:6] = log_map(quat_mul(quat_conj(lin.q), node.q))
    d[6:9] = node.v - lin.v
    d[9:12] = node.bg - lin.bg
    d[12:15] = node.ba - lin.ba
    return d


def _extr_minus(extr: Extrinsics, lin: Extrinsics) -> np.ndarray:
    d = np.empty(EXTR_DIM)
    d[0:3] = extr.p_br_b - lin.p_br_b
    d[3:6] = log_map(quat_mul(quat_conj(lin.q_r_b), extr.q_r_b))
    return d


def evaluate_prior(prior: MargPrior, window: WindowState):
    """Residual and Jacobian blocks of the prior at the current estimate.

    Returns (r, {slot: (m, 15)}, extr (m, 6)).  Attitude columns are chained
    through the inverse right Jacobian of the accumulated deviation.
    """
    r = prior.r0.copy()
    blocks = {}
    for nid in prior.node_ids:
        if nid not in window.ids:
            continue
        slot = window.ids.index(nid)
        d = _state_minus(window.nodes[slot], prior.lin_nodes[nid])
        jac = prior.jac_nodes[nid]
        r = r + jac @ d
        jac_cur = jac.copy()
        jac_cur[:, 3:6] = jac[:, 3:6] @ right_jacobian_inv(d[3:6])
        blocks[slot] = jac_cur
    d_e = _extr_minus(window.extrinsics, prior.lin_extr)
    r = r + prior.jac_extr @ d_e
    jac_e = prior.jac_extr.copy()
    jac_e[:, 3:6] = prior.jac_extr[:, 3:6] @ right_jacobian_inv(d_e[3:6])
    return r, blocks, jac_e


# ---------------------------------------------------------------------------
# linearization and cost
# ---------------------------------------------------------------------------


def _huber_weight(u: float, delta: float) -> tuple[float, float]:
    """(IRLS weight, robust cost) for a scalar whitened residual."""
    au = abs(u)
    if au <= delta:
        return 1.0, 0.5 * u * u
    return delta / au, delta * au - 0.5 * delta * delta


def _preint_whitener(delta: PreintegrationDelta) -> np.ndarray:
    cov = residual_covariance(delta)
    cov = cov + 1e-14 * np.eye(15) * max(1.0, np.trace(cov) / 15.0)
    return np.linalg.cholesky(cov)


def _linearize(
    window, ba_factors, preint_factors, config, build_normal=True, refit_only=False, batch=None
):
    """One linearization pass over all factors.

    Returns (H, b, cost, planes, ba_whitened, ba_valid).  With
    build_normal=False only the cost and BA diagnostics are computed (planes
    always refit from the current projections).  A prebuilt BABatch may be
    passed to amortize the flat-array setup across iterations.
    """
    dim = window.dim
    eo = window.extr_offset()
    H = np.zeros((dim, dim)) if build_normal else None
    b = np.zeros(dim) if build_normal else None
    if batch is None:
        batch = BABatch(ba_factors)
    if build_normal:
        cost, ba_whitened, ba_valid, planes = _ba_batch_linearize(batch, window, config, H, b)
    else:
        cost, ba_whitened, ba_valid = _ba_batch_cost(batch, window, config)
        planes = None

    for factor in preint_factors:
        r, j_i, j_j = preintegration_jacobians(
            window.nodes[factor.i], window.nodes[factor.j], factor.delta, config.world
        )
        L = _preint_whitener(factor.delta)
        rw = solve_triangular(L, r, lower=True)
        cost += 0.5 * float(rw @ rw)
        if not build_normal:
            continue
        ji_w = solve_triangular(L, j_i, lower=True)
        jj_w = solve_triangular(L, j_j, lower=True)
        rows = np.zeros((15, dim))
        rows[:, NODE_DIM * factor.i : NODE_DIM * factor.i + 15] = ji_w
        rows[:, NODE_DIM * factor.j : NODE_DIM * factor.j + 15] = jj_w
        H += rows.T @ rows
        b += rows.T @ rw

    if window.prior is not None:
        r, blocks, jac_e = evaluate_prior(window.prior, window)
        cost += 0.5 * float(r @ r) + window.prior.constant
        if build_normal:
            rows = np.zeros((window.prior.dim, dim))
            for slot, jac in blocks.items():
                rows[:, NODE_DIM * slot : NODE_DIM * slot + 15] = jac
            rows[:, eo : eo + 6] = jac_e
            H += rows.T @ rows
            b += rows.T @ r

    return H, b, cost, planes, ba_whitened, ba_valid


def _default_fixed_dims(window: WindowState) -> np.ndarray:
    if window.prior is None and window.n_nodes > 0:
        return np.arange(6)
    return np.zeros(0, dtype=int)


def _apply_fixed(H, b, fixed):
    if fixed.size == 0:
        return H, b
    H = H.copy()
    b = b.copy()
    H[fixed, :] = 0.0
    H[:, fixed] = 0.0
    H[fixed, fixed] = 1.0
    b[fixed] = 0.0
    return H, b


def solve(
    window: WindowState,
    ba_factors: list[BAFactor],
    preint_factors: list[PreintFactor],
    config: SolverConfig,
    fixed_dims: np.ndarray | None = None,
    max_iterations: int | None = None,
) -> tuple[WindowState, SolveReport]:
    """Levenberg-Marquardt over the damped normal equations.

    The first node's pose is frozen until a marginalization prior exists;
    explicit fixed_dims override that default (tests use it to pin whole
    nodes).  Planes of BA factors are refit at each linearization and frozen
    within the iteration.
    """
    if max_iterations is None:
        max_iterations = config.max_iterations
    fixed = _default_fixed_dims(window) if fixed_dims is None else np.asarray(fixed_dims, int)
    report = SolveReport()
    lam = config.lambda_init
    current = window.copy()
    batch = BABatch(ba_factors)

    for it in range(max_iterations):
        H, b, cost, planes, _, _ = _linearize(
            current, ba_factors, preint_factors, config, batch=batch
        )
        if it == 0:
            report.cost_initial = cost
        report.iterations = it + 1
        Hm, bm = _apply_fixed(H, b, fixed)
        if np.max(np.abs(bm)) < config.grad_tol:
            report.termination = "gradient"
            break
        accepted = False
        while lam <= config.lambda_max:
            damp = np.clip(np.diag(Hm), 1e-12, None)
            try:
                c, low = cho_factor(Hm + lam * np.diag(damp), lower=True)
                dx = cho_solve((c, low), -bm)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = current.apply_step(dx)
            # the step is judged against the true objective (planes refit);
            # the within-iteration model stays frozen
            _, _, cost_trial, _, _, _ = _linearize(
                trial, ba_factors, preint_factors, config, build_normal=False, batch=batch
            )
            if cost_trial <= cost * (1.0 + 1e-12) + 1e-300:
                current = trial
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 10.0
        if not accepted:
            raise SolverDiverged(f"damping exceeded {config.lambda_max:g} without cost decrease")
        step_norm = float(np.linalg.norm(dx))
        rel_drop = (cost - cost_trial) / max(cost, 1e-300)
        if rel_drop < config.cost_tol:
            report.termination = "cost"
            break
        if step_norm < config.step_tol:
            report.termination = "step"
            break
    else:
        report.termination = "max_iterations"

    H, b, cost, planes, ba_w, ba_ok = _linearize(
        current, ba_factors, preint_factors, config, batch=batch
    )
    report.cost_final = cost
    report.ba_whitened = ba_w
    report.ba_valid = ba_ok
    Hm, _ = _apply_fixed(H, b, fixed)
    report.hessian = Hm
    report.fixed_dims = fixed
    return current, report


def two_step_optimize(
    window: WindowState,
    ba_factors: list[BAFactor],
    preint_factors: list[PreintFactor],
    config: SolverConfig,
    fixed_dims: np.ndarray | None = None,
):
    """Outlier-robust optimization: a short solve, a whitened-residual gate on
    the BA factors, then the full solve on the survivors.

    Returns (window, report, surviving_factors, removed_mask).
    """
    step1, rep1 = solve(
        window, ba_factors, preint_factors, config, fixed_dims, config.step1_iterations
    )
    removed = np.zeros(len(ba_factors), dtype=bool)
    if len(ba_factors):
        u = np.abs(rep1.ba_whitened)
        removed = np.where(np.isnan(u), False, u > config.chi1d_threshold)
    survivors = [f for f, r in zip(ba_factors, removed) if not r]
    final, rep2 = solve(step1, survivors, preint_factors, config, fixed_dims)
    return final, rep2, survivors, removed


# ---------------------------------------------------------------------------
# marginalization
# ---------------------------------------------------------------------------


def _whitened_rows_for_marg(window, ba_factors, preint_factors, config, var_index):
    """Whitened residuals and Jacobian rows over an explicit variable set.

    var_index maps ('node', id) and ('extr',) to column offsets; only listed
    variables receive columns.  Returns (rows list, residual list, cost).
    """
    rows_all = []
    res_all = []
    cost = 0.0
    width = max(off + w for off, w in var_index.values())

    def node_cols(slot):
        nid = window.ids[slot]
        return var_index.get(("node", nid))

    for factor in ba_factors:
        try:
            residual, blocks, extr_block, _, obs_rows = ba_jacobians(
                factor, window, with_obs_rows=True
            )
        except DegenerateGeometry:
            continue
        sigma = np.sqrt(factor.variance)
        u = residual / sigma
        w, rho = _huber_weight(u, config.huber_delta)
        cost += rho
        sw = np.sqrt(w) / sigma
        row = np.zeros(width)
        for slot, block in blocks.items():
            cols = node_cols(slot)
            if cols is None:
                continue
            off, wdt = cols
            if wdt == 15:  # pose dims only exist on full-width variables
                row[off : off + 6] = block[:6] * sw
        off_e, _ = var_index[("extr",)]
        row[off_e : off_e + 6] = extr_block * sw
        rows_all.append(row[None, :])
        res_all.append(np.array([np.sqrt(w) * u]))
        # zero-residual rows carrying the squared-norm curvature term, so the
        # absorbed information matches the solver's normal equations
        k = factor.association.member_count
        scale = w * u / sigma * (2.0 / k)
        if scale > 0.0:
            grow = np.zeros((len(obs_rows), width))
            for oi, (slot, g_node, g_extr) in enumerate(obs_rows):
                cols = node_cols(slot)
                if cols is not None and cols[1] == 15:
                    grow[oi, cols[0] : cols[0] + 6] = g_node
                grow[oi, off_e : off_e + 6] = g_extr
            rows_all.append(np.sqrt(scale) * grow)
            res_all.append(np.zeros(len(obs_rows)))

    for factor in preint_factors:
        r, j_i, j_j = preintegration_jacobians(
            window.nodes[factor.i], window.nodes[factor.j], factor.delta, config.world
        )
        L = _preint_whitener(factor.delta)
        rw = solve_triangular(L, r, lower=True)
        cost += 0.5 * float(rw @ rw)
        rows = np.zeros((15, width))
        for slot, jac in ((factor.i, j_i), (factor.j, j_j)):
            cols = node_cols(slot)
            if cols is None:
                continue
            off, wdt = cols
            jw = solve_triangular(L, jac, lower=True)
            rows[:, off : off + wdt] = jw[:, :wdt] if wdt == 15 else jw[:, 15 - wdt :]
        rows_all.append(rows)
        res_all.append(rw)

    if window.prior is not None:
        r, blocks, jac_e = evaluate_prior(window.prior, window)
        cost += 0.5 * float(r @ r) + window.prior.constant
        rows = np.zeros((window.prior.dim, width))
        for slot, jac in blocks.items():
            cols = node_cols(slot)
            if cols is None:
                continue
            off, wdt = cols
            rows[:, off : off + wdt] = jac[:, :wdt] if wdt == 15 else jac[:, 15 - wdt :]
        off, _ = var_index[("extr",)]
        rows[:, off : off + 6] = jac_e
        rows_all.append(rows)
        res_all.append(r)

    return rows_all, res_all, cost


def marginalize_oldest(
    window: WindowState,
    ba_factors: list[BAFactor],
    preint_factors: list[PreintFactor],
    config: SolverConfig,
):
    """Schur-complement elimination of the oldest node.

    All factors touching node 0 (including any existing prior) are linearized
    at the current estimate and replaced by one linear prior on the remaining
    variables they touch.  While the first node's pose is gauge-frozen (no
    prior yet), only its 9 free dims are eliminated and the frozen pose acts
    as a constant, which hands absolute pose information to the new prior.

    Returns (window, ba_remaining, preint_remaining); surviving factor slots
    are shifted down by one.
    """
    old_id = window.ids[0]
    ba_touch = [f for f in ba_factors if 0 in f.association.node_slots]
    preint_touch = [f for f in preint_factors if f.i == 0 or f.j == 0]
    # an existing prior is always re-absorbed: it touches the whole window
    prior_touch = window.prior is not None

    ba_keep = [f for f in ba_factors if f not in ba_touch]
    preint_keep = [f for f in preint_factors if f not in preint_touch]

    if not ba_touch and not preint_touch and not prior_touch:
        new_window = _drop_node0(window, keep_prior=True)
        return new_window, _shift_ba(ba_keep), _shift_preint(preint_keep)

    frozen_pose = window.prior is None
    elim_width = 9 if frozen_pose else 15

    touched_ids = set()
    for f in ba_touch:
        touched_ids.update(window.ids[int(s)] for s in f.association.node_slots)
    for f in preint_touch:
        touched_ids.add(window.ids[f.i])
        touched_ids.add(window.ids[f.j])
    if prior_touch:
        touched_ids.update(window.prior.node_ids)
    touched_ids.discard(old_id)
    remaining_ids = [nid for nid in window.ids[1:] if nid in touched_ids]

    var_index = {("node", old_id): (0, elim_width)}
    off = elim_width
    for nid in remaining_ids:
        var_index[("node", nid)] = (off, 15)
        off += 15
    var_index[("extr",)] = (off, 6)
    off += 6

    rows, residuals, cost_elim = _whitened_rows_for_marg(
        window, ba_touch, preint_touch, config, var_index
    )
    H = np.zeros((off, off))
    b = np.zeros(off)
    for rws, res in zip(rows, residuals):
        H += rws.T @ rws
        b += rws.T @ res

    m = elim_width
    H_mm = H[:m, :m] + config.marg_regularizer * np.eye(m)
    H_mr = H[:m, m:]
    H_rr = H[m:, m:]
    b_m = b[:m]
    b_r = b[m:]
    try:
        c, low = cho_factor(H_mm, lower=True)
    except np.linalg.LinAlgError as e:
        raise SingularInformation(f"cannot eliminate oldest node: {e}") from None
    H_mm_inv_mr = cho_solve((c, low), H_mr)
    H_mm_inv_bm = cho_solve((c, low), b_m)
    H_star = H_rr - H_mr.T @ H_mm_inv_mr
    H_star = 0.5 * (H_star + H_star.T)
    b_star = b_r - H_mr.T @ H_mm_inv_bm

    evals, evecs = np.linalg.eigh(H_star)
    keep = evals > max(1e-12, evals.max() * 1e-12 if evals.size else 0.0)
    s = np.sqrt(evals[keep])
    u = evecs[:, keep]
    jac = (u * s).T
    r0 = (u / s).T @ b_star
    constant = cost_elim - 0.5 * float(b_m @ H_mm_inv_bm) - 0.5 * float(r0 @ r0)

    jac_nodes = {}
    for nid in remaining_ids:
        offn, _ = var_index[("node", nid)]
        jac_nodes[nid] = jac[:, offn - m : offn - m + 15]
    offe, _ = var_index[("extr",)]
    jac_extr = jac[:, offe - m : offe - m + 6]

    lin_nodes = {}
    for nid in remaining_ids:
        slot = window.ids.index(nid)
        lin_nodes[nid] = window.nodes[slot].copy()
    prior = MargPrior(
        node_ids=remaining_ids,
        jac_nodes=jac_nodes,
        jac_extr=jac_extr,
        r0=r0,
        lin_nodes=lin_nodes,
        lin_extr=window.extrinsics.copy(),
        constant=constant,
    )
    new_window = _drop_node0(window, keep_prior=False)
    new_window.prior = prior
    return new_window, _shift_ba(ba_keep), _shift_preint(preint_keep)


def _drop_node0(window: WindowState, keep_prior: bool) -> WindowState:
    out = WindowState(
        nodes=[s.copy() for s in window.nodes[1:]],
        extrinsics=window.extrinsics.copy(),
        t_d=window.t_d,
        prior=window.prior if keep_prior else None,
        ids=list(window.ids[1:]),
    )
    return out


def _shift_ba(factors: list[BAFactor]) -> list[BAFactor]:
    for f in factors:
        f.association.node_slots = f.association.node_slots - 1
    return factors


def _shift_preint(factors: list[PreintFactor]) -> list[PreintFactor]:
    for f in factors:
        f.i -= 1
        f.j -= 1
    return factors


def marginal_covariance(hessian: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Marginal covariance block of selected error dims from a clamped H."""
    try:
        c, low = cho_factor(hessian, lower=True)
        rhs = np.zeros((hessian.shape[0], len(cols)))
        rhs[cols, np.arange(len(cols))] = 1.0
        sol = cho_solve((c, low), rhs)
        return sol[cols]
    except np.linalg.LinAlgError:
        return np.linalg.pinv(hessian)[np.ix_(cols, cols)]
