"""Weighted bundle adjustment over SE(3) poses and inverse depths.

Damped Gauss-Newton on confidence-weighted reprojection residuals
r_e = target - reprojection, with the scalar-per-patch depth blocks
eliminated by a Schur complement. A step that raises the cost is
rejected, damping is multiplied by 10 and the step retried once, so the
recorded cost history is non-increasing. Fixed poses and fixed depths
receive no update (gauge and scale anchoring). Behind-camera
observations contribute zero residual and zero Jacobian for that
iteration. Accumulation order is fixed by edge index, so results are
deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveWeight, NoValidEdges, SingularSystem
from .geometry import (
    Intrinsics,
    Pose,
    quat_mul,
    quat_to_matrix_batch,
    reproject_batch,
    reprojection_jacobian_batch,
    se3_exp,
)

INV_DEPTH_MIN = 1e-4
INV_DEPTH_MAX = 1e2
_DEPTH_FLOOR = 1e-8
_COND_LIMIT = 1e12
_MIN_DEPTH = 1e-6


@dataclass
class BAProblem:
    """Inputs of one weighted-BA solve.

    edges rows are (source frame i, target frame j, patch k); targets
    are the estimated positions of each patch center in frame j and
    weights the per-edge 2-vector confidences. Patches come either as a
    list of geometry.Patch or as the equivalent arrays (patch_centers,
    patch_inv_depths, patch_hosts, patch_radius). fixed_poses must flag
    at least one pose; fixed_depths optionally pins patch depths (scale
    anchoring). valid masks edges out without removing them.
    """

    poses: list
    patches: list | None
    edges: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    intrinsics: Intrinsics
    fixed_poses: np.ndarray
    fixed_depths: np.ndarray | None = None
    valid: np.ndarray | None = None
    patch_centers: np.ndarray | None = None
    patch_inv_depths: np.ndarray | None = None
    patch_hosts: np.ndarray | None = None
    patch_radius: int = 1

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, 2)
        self.fixed_poses = np.asarray(self.fixed_poses, dtype=bool)
        if self.patches is not None:
            if not self.patches:
                raise NoValidEdges("problem has no patches")
            self.patch_centers = np.stack([p.center for p in self.patches])
            self.patch_inv_depths = np.array(
                [p.inv_depth for p in self.patches], dtype=np.float64
            )
            self.patch_hosts = np.array(
                [p.frame_id for p in self.patches], dtype=np.int64
            )
            self.patch_radius = self.patches[0].radius
        else:
            self.patch_centers = np.asarray(self.patch_centers, dtype=np.float64)
            self.patch_inv_depths = np.asarray(
                self.patch_inv_depths, dtype=np.float64
            ).copy()
            self.patch_hosts = np.asarray(self.patch_hosts, dtype=np.int64)
        if self.fixed_depths is None:
            self.fixed_depths = np.zeros(self.n_patches, dtype=bool)
        else:
            self.fixed_depths = np.asarray(self.fixed_depths, dtype=bool)
        if self.valid is None:
            self.valid = np.ones(self.edges.shape[0], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def n_patches(self):
        return self.patch_centers.shape[0]

    def validate(self):
        m, p, e = len(self.poses), self.n_patches, self.edges.shape[0]
        if not self.fixed_poses.any():
            raise ValueError("at least one pose must be fixed")
        if self.fixed_poses.shape[0] != m:
            raise ValueError("fixed_poses length mismatch")
        if e == 0:
            raise NoValidEdges("problem has no edges")
        if np.any(self.weights <= 0):
            raise NonPositiveWeight("confidence weights must be > 0")
        if np.any(self.patch_inv_depths <= 0):
            raise ValueError("inverse depths must be positive")
        ii, jj, kk = self.edges.T
        if np.any(ii == jj):
            raise ValueError("edges must connect distinct frames")
        if ii.min() < 0 or jj.min() < 0 or max(ii.max(), jj.max()) >= m:
            raise ValueError("edge frame index out of range")
        if kk.min() < 0 or kk.max() >= p:
            raise ValueError("edge patch index out of range")
        if np.any(self.patch_hosts[kk] != ii):
            raise ValueError("edge source frame must be the patch host frame")


@dataclass
class BASolution:
    poses: list
    inv_depths: np.ndarray
    cost: float
    cost_history: list = field(default_factory=list)
    converged: bool = False


def schur_solve(H_pose, H_depth_diag, H_coupling, b):
    """Solve the two-block normal equations by eliminating the depths.

    H_pose is (n, n), H_depth_diag a (p,) vector of scalar depth blocks,
    H_coupling (n, p), b the stacked right-hand side (n + p,). Returns
    (pose deltas, depth deltas), equal to the dense joint solve.
    """
    Hp = np.asarray(H_pose, dtype=np.float64)
    C = np.asarray(H_depth_diag, dtype=np.float64)
    E = np.asarray(H_coupling, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = Hp.shape[0]
    if C.size and np.any(C < _DEPTH_FLOOR):
        raise ValueError(f"depth diagonal below damping floor {_DEPTH_FLOOR}")
    bp, bd = b[:n], b[n:]
    if n == 0:
        return np.zeros(0), bd / C
    Einv = E / C[None, :] if C.size else E
    S = Hp - (Einv @ E.T if C.size else 0.0)
    rhs = bp - (Einv @ bd if C.size else 0.0)
    eig = np.abs(np.linalg.eigvalsh(0.5 * (S + S.T)))
    cond = np.inf if eig.min() == 0.0 else eig.max() / eig.min()
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularSystem(f"reduced pose system condition {cond:.3e}")
    dp = np.linalg.solve(S, rhs)
    dd = (bd - E.T @ dp) / C if C.size else np.zeros(0)
    return dp, dd


class _PoseArrays:
    """Pose state as (M, 4) quaternions plus (M, 3) translations."""

    def __init__(self, poses):
        self.q = np.stack([p.q for p in poses])
        self.t = np.stack([p.t for p in poses])

    def copy(self):
        out = object.__new__(_PoseArrays)
        out.q = self.q.copy()
        out.t = self.t.copy()
        return out

    def right_multiply(self, idx, xi):
        """T_idx <- T_idx * exp(xi), keeping the quaternion normalized."""
        delta = se3_exp(xi)
        R = quat_to_matrix_batch(self.q[idx:idx + 1])[0]
        q = quat_mul(self.q[idx], delta.q)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        self.q[idx] = q
        self.t[idx] = self.t[idx] + R @ delta.t

    def to_poses(self):
        return [Pose(self.q[i], self.t[i]) for i in range(self.q.shape[0])]


class _Structure:
    """Static observation tables for one weighted_ba run."""

    def __init__(self, problem: BAProblem, full_patch: bool):
        self.problem = problem
        K = problem.intrinsics
        ii, jj, kk = problem.edges.T
        n_edges = problem.edges.shape[0]
        if full_patch:
            r = problem.patch_radius
            offs = np.arange(-r, r + 1, dtype=np.float64)
            gy, gx = np.meshgrid(offs, offs, indexing="ij")
            off_xy = np.stack((gx.ravel(), gy.ravel()), axis=1)
            px = off_xy.shape[0]
            pix = (
                problem.patch_centers[kk][:, None, :] + off_xy[None, :, :]
            ).reshape(-1, 2)
            self.xn = K.normalized_dirs(pix)
            self.ii = np.repeat(ii, px)
            self.jj = np.repeat(jj, px)
            self.kk = np.repeat(kk, px)
            self.obs_edge = np.repeat(np.arange(n_edges), px)
            self.px_per_edge = px
        else:
            self.ii, self.jj, self.kk = ii, jj, kk
            self.obs_edge = np.arange(n_edges)
            self.xn = K.normalized_dirs(problem.patch_centers[kk])
            self.px_per_edge = 1
        self.n_obs = self.ii.shape[0]

        m = len(problem.poses)
        key = self.ii * m + self.jj
        self.pairs, self.obs_pair = np.unique(key, return_inverse=True)
        self.pair_i, self.pair_j = np.divmod(self.pairs.astype(np.int64), m)

    def relative_transforms(self, state: _PoseArrays):
        """Per-observation relative rotations and translations."""
        R_all = quat_to_matrix_batch(state.q)
        Ri = R_all[self.pair_i]
        Rj = R_all[self.pair_j]
        R_rel = np.einsum("pba,pbc->pac", Rj, Ri)
        dt = state.t[self.pair_i] - state.t[self.pair_j]
        t_rel = np.einsum("pba,pb->pa", Rj, dt)
        return R_rel[self.obs_pair], t_rel[self.obs_pair]


def weighted_ba(problem: BAProblem, iterations=10, damping=1e-4, full_patch=False):
    """Run damped Gauss-Newton with Schur-eliminated depths."""
    problem.validate()
    m = len(problem.poses)
    state = _PoseArrays(problem.poses)
    inv_depths = problem.patch_inv_depths.copy()

    free_pose = np.flatnonzero(~problem.fixed_poses)
    pose_col = np.full(m, -1, dtype=np.int64)
    pose_col[free_pose] = np.arange(free_pose.size)
    free_depth = np.flatnonzero(~problem.fixed_depths)
    depth_col = np.full(problem.n_patches, -1, dtype=np.int64)
    depth_col[free_depth] = np.arange(free_depth.size)
    nf, nd = free_pose.size, free_depth.size
    size_p = 6 * nf

    st = _Structure(problem, full_patch)
    w_edge = np.where(problem.valid[:, None], problem.weights, 0.0)
    if not np.any(w_edge > 0):
        raise NoValidEdges("all edges are masked invalid")
    # normalizing the weights leaves the minimizer and the weight ratios
    # untouched but makes the additive damping act relative to the data
    # scale, which keeps the damped gauge directions well-conditioned
    w_edge = w_edge / w_edge.max()
    w_obs = w_edge[st.obs_edge]

    if full_patch:
        # patch pixels share the center flow delta: translate the whole
        # entry reprojection of the patch by (target - entry center)
        R0, t0 = st.relative_transforms(state)
        pix0, _ = reproject_batch(st.xn, inv_depths[st.kk], R0, t0, problem.intrinsics)
        center_row = st.px_per_edge // 2
        entry_center = pix0[center_row::st.px_per_edge]
        targets = pix0 + (problem.targets - entry_center)[st.obs_edge]
    else:
        targets = problem.targets

    # scatter index tables are static over iterations
    bi = pose_col[st.ii]
    bj = pose_col[st.jj]
    bk = depth_col[st.kk]
    sel_i, sel_j, sel_k = bi >= 0, bj >= 0, bk >= 0
    cols6 = np.arange(6)

    def block_idx(rows_blk, cols_blk, sel):
        return (
            (6 * rows_blk[sel][:, None, None] + cols6[None, :, None]) * size_p
            + 6 * cols_blk[sel][:, None, None] + cols6[None, None, :]
        ).ravel()

    idx_ii = block_idx(bi, bi, sel_i)
    idx_jj = block_idx(bj, bj, sel_j)
    idx_ij = block_idx(bi, bj, sel_i & sel_j)
    idx_ji = block_idx(bj, bi, sel_i & sel_j)
    vec_idx_i = (6 * bi[sel_i][:, None] + cols6[None, :]).ravel()
    vec_idx_j = (6 * bj[sel_j][:, None] + cols6[None, :]).ravel()
    coup_idx_i = (
        (6 * bi[sel_i & sel_k][:, None] + cols6[None, :]) * nd
        + bk[sel_i & sel_k][:, None]
    ).ravel()
    coup_idx_j = (
        (6 * bj[sel_j & sel_k][:, None] + cols6[None, :]) * nd
        + bk[sel_j & sel_k][:, None]
    ).ravel()

    def current_cost(pose_state, depths):
        R, t = st.relative_transforms(pose_state)
        pix, zd = reproject_batch(st.xn, depths[st.kk], R, t, problem.intrinsics)
        ok = zd > _MIN_DEPTH
        w = w_obs * ok[:, None]
        r = np.where(ok[:, None], targets - pix, 0.0)
        return float(np.sum(w * r * r))

    def linearize():
        R, t = st.relative_transforms(state)
        J_i, J_j, J_d, pix, zd = reprojection_jacobian_batch(
            st.xn, inv_depths[st.kk], R, t, problem.intrinsics
        )
        ok = zd > _MIN_DEPTH
        w = w_obs * ok[:, None]
        r = np.where(ok[:, None], targets - pix, 0.0)
        J_i = np.where(ok[:, None, None], J_i, 0.0)
        J_j = np.where(ok[:, None, None], J_j, 0.0)
        J_d = np.where(ok[:, None], J_d, 0.0)
        return J_i, J_j, J_d, r, w

    def assemble(J_i, J_j, J_d, r, w):
        WJi = w[:, :, None] * J_i
        WJj = w[:, :, None] * J_j
        wr = w * r
        WJd = w * J_d

        H = np.bincount(
            idx_ii,
            weights=np.einsum("nab,nac->nbc", J_i[sel_i], WJi[sel_i]).ravel(),
            minlength=size_p * size_p,
        )
        H += np.bincount(
            idx_jj,
            weights=np.einsum("nab,nac->nbc", J_j[sel_j], WJj[sel_j]).ravel(),
            minlength=size_p * size_p,
        )
        both = sel_i & sel_j
        Bij = np.einsum("nab,nac->nbc", J_i[both], WJj[both])
        H += np.bincount(idx_ij, weights=Bij.ravel(), minlength=size_p * size_p)
        H += np.bincount(
            idx_ji,
            weights=np.transpose(Bij, (0, 2, 1)).ravel(),
            minlength=size_p * size_p,
        )
        bp = np.bincount(
            vec_idx_i,
            weights=np.einsum("nab,na->nb", J_i[sel_i], wr[sel_i]).ravel(),
            minlength=size_p,
        )
        bp += np.bincount(
            vec_idx_j,
            weights=np.einsum("nab,na->nb", J_j[sel_j], wr[sel_j]).ravel(),
            minlength=size_p,
        )
        C = np.bincount(
            bk[sel_k],
            weights=np.einsum("na,na->n", J_d, WJd)[sel_k],
            minlength=nd,
        )
        bd = np.bincount(
            bk[sel_k],
            weights=np.einsum("na,na->n", J_d, wr)[sel_k],
            minlength=nd,
        )
        ik = sel_i & sel_k
        jk = sel_j & sel_k
        E = np.bincount(
            coup_idx_i,
            weights=np.einsum("nab,na->nb", J_i[ik], WJd[ik]).ravel(),
            minlength=size_p * nd,
        )
        E += np.bincount(
            coup_idx_j,
            weights=np.einsum("nab,na->nb", J_j[jk], WJd[jk]).ravel(),
            minlength=size_p * nd,
        )
        return (
            H.reshape(size_p, size_p), C, E.reshape(size_p, nd),
            np.concatenate((bp, bd)),
        )

    lam = float(damping)
    cost = current_cost(state, inv_depths)
    history = [cost]
    converged = False
    for _ in range(iterations):
        if converged:
            history.append(cost)
            continue
        J_i, J_j, J_d, r, w = linearize()
        H, C, E, b = assemble(J_i, J_j, J_d, r, w)
        accepted = False
        trial_lam = lam
        for _attempt in range(2):
            dp, dd = schur_solve(
                H + trial_lam * np.eye(size_p), C + trial_lam, E, b
            )
            trial_state = state.copy()
            for col, idx in enumerate(free_pose):
                trial_state.right_multiply(idx, dp[6 * col:6 * col + 6])
            trial_depths = inv_depths.copy()
            trial_depths[free_depth] += dd
            np.clip(trial_depths, INV_DEPTH_MIN, INV_DEPTH_MAX, out=trial_depths)
            new_cost = current_cost(trial_state, trial_depths)
            if new_cost <= cost * (1.0 + 1e-12) + 1e-15:
                accepted = True
                lam = trial_lam
                state, inv_depths = trial_state, trial_depths
                if np.linalg.norm(dp) + np.linalg.norm(dd) < 1e-9 or new_cost < 1e-18:
                    converged = True
                cost = new_cost
                break
            trial_lam *= 10.0
        if not accepted:
            lam = trial_lam
        history.append(cost)

    return BASolution(state.to_poses(), inv_depths, cost, history, converged)
