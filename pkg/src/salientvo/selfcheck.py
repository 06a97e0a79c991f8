"""Embedded invariant suite behind the ``selfcheck`` CLI subcommand.

Each check re-derives its expected values through an independent route
(series expansions, finite differences, brute-force loops, dense solves)
and compares against the production path.
"""

import numpy as np

from . import kernels
from .bundle_adjust import schur_solve
from .eval_io import Trajectory, read_trajectory, umeyama_align, write_trajectory
from .geometry import (
    Intrinsics,
    Patch,
    Pose,
    hat,
    relative_pose,
    reproject_patch,
    reprojection_jacobian,
    se3_exp,
    se3_log,
)
from .saliency import salient_score_map, select_salient_patches


def _matrix_exp_taylor(A, terms=30):
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms):
        term = term @ A / n
        out = out + term
    return out


def check_se3_roundtrip(rng):
    for _ in range(100):
        xi = rng.uniform(-1.0, 1.0, 6)
        T = se3_exp(xi)
        if np.linalg.norm(se3_log(T) - xi) > 1e-10:
            return False
        A = np.zeros((4, 4))
        A[:3, :3] = hat(xi[3:])
        A[:3, 3] = xi[:3]
        if np.abs(T.matrix() - _matrix_exp_taylor(A)).max() > 1e-9:
            return False
    return True


def _random_configuration(rng):
    K = Intrinsics(100.0, 110.0, 64.0, 48.0)
    T_i = se3_exp(rng.uniform(-0.2, 0.2, 6))
    T_j = se3_exp(rng.uniform(-0.2, 0.2, 6))
    patch = Patch(0, rng.uniform(30, 90, 2), 1, float(rng.uniform(0.2, 2.0)))
    return K, T_i, T_j, patch


def check_jacobians_fd(rng, n_cases=10, h=1e-6, tol=1e-4):
    for _ in range(n_cases):
        K, T_i, T_j, patch = _random_configuration(rng)
        try:
            J_i, J_j, J_d = reprojection_jacobian(patch, T_i, T_j, K)
        except Exception:
            continue
        scale = max(np.abs(J_i).max(), np.abs(J_j).max(), 1.0)
        for axis in range(6):
            xi = np.zeros(6)
            xi[axis] = h
            fp = reproject_patch(patch, T_i * se3_exp(xi), T_j, K)
            xi[axis] = -h
            fm = reproject_patch(patch, T_i * se3_exp(xi), T_j, K)
            if np.abs((fp - fm) / (2 * h) - J_i[:, :, axis]).max() / scale > tol:
                return False
    return True


def check_score_map_bruteforce(rng, n_maps=5):
    for _ in range(n_maps):
        feat = rng.uniform(0.05, 1.0, (7, 9, 3))
        got = salient_score_map(feat)
        want = np.zeros((7, 9))
        for m in range(7):
            for n in range(9):
                best = -np.inf
                for hch in range(3):
                    acc = 0.0
                    for mm in range(max(m - 1, 0), min(m + 2, 7)):
                        for nn in range(max(n - 1, 0), min(n + 2, 9)):
                            acc += np.exp(feat[mm, nn, hch])
                    a = np.exp(feat[m, n, hch]) / acc
                    b = feat[m, n, hch] / feat[m, n].max()
                    best = max(best, a * b)
                want[m, n] = best
        if np.abs(got - want).max() > 1e-12:
            return False
    return True


def check_nms_bruteforce(rng, n_maps=5):
    for _ in range(n_maps):
        scores = rng.uniform(0.0, 1.0, (24, 32))
        centers, _, _ = select_salient_patches(scores, 12, grid=4, nms_radius=3, r=1)
        # independent route: collect cell maxima, then dominance scan
        cand = []
        for y0 in range(0, 24, 4):
            for x0 in range(0, 32, 4):
                block = [
                    (scores[y, x], y, x)
                    for y in range(y0, min(y0 + 4, 24))
                    for x in range(x0, min(x0 + 4, 32))
                    if 1 <= y < 23 and 1 <= x < 31
                ]
                if block:
                    s, y, x = max(block, key=lambda b: (b[0], -b[1], -b[2]))
                    cand.append((y, x, s))
        keep = [
            (y, x, s)
            for (y, x, s) in cand
            if not any(
                s2 > s and max(abs(y2 - y), abs(x2 - x)) <= 3
                for (y2, x2, s2) in cand
            )
        ]
        keep.sort(key=lambda c: (-c[2], c[0], c[1]))
        want = np.array([(x, y) for y, x, _ in keep[:12]])
        if centers.shape != want.shape or np.any(centers != want):
            return False
    return True


def check_schur_dense(rng, n_cases=10):
    for _ in range(n_cases):
        n, p = 12, 7
        A = rng.standard_normal((n + p, n + p))
        H = A @ A.T + (n + p) * np.eye(n + p)
        H[n:, n:] = np.diag(np.diag(H[n:, n:]))  # scalar depth blocks
        b = rng.standard_normal(n + p)
        dp, dd = schur_solve(H[:n, :n], np.diag(H)[n:], H[:n, n:], b)
        joint = np.linalg.solve(H, b)
        if np.linalg.norm(np.concatenate((dp, dd)) - joint) > 1e-8 * (
            1 + np.linalg.norm(joint)
        ):
            return False
    return True


def check_umeyama_recovery(rng, n_cases=10):
    for _ in range(n_cases):
        pts = rng.standard_normal((20, 3))
        s = float(rng.uniform(0.5, 2.0))
        R = se3_exp(np.concatenate((np.zeros(3), rng.uniform(-1, 1, 3)))).rotation_matrix()
        t = rng.standard_normal(3)
        moved = s * pts @ R.T + t
        align = umeyama_align(pts, moved, with_scale=True)
        if abs(align.scale - s) > 1e-9:
            return False
        if np.abs(align.apply(pts) - moved).max() > 1e-9:
            return False
    return True


def check_tum_roundtrip(rng, tmp_path):
    poses = [se3_exp(rng.uniform(-1, 1, 6)) for _ in range(50)]
    traj = Trajectory(np.arange(50, dtype=np.float64), poses)
    path = tmp_path / "selfcheck_traj.txt"
    write_trajectory(path, traj)
    back = read_trajectory(path)
    for a, b in zip(traj.poses, back.poses):
        if np.abs(a.q - b.q).max() > 1e-9 or np.abs(a.t - b.t).max() > 1e-9:
            return False
    return True


def check_correlation_bruteforce(rng, n_cases=3):
    for _ in range(n_cases):
        tgt = rng.uniform(0, 1, (12, 14, 4)).astype(np.float32)
        src = rng.uniform(0, 1, (5, 4))
        centers = rng.uniform(2.0, 9.0, (5, 2))
        got, mask = kernels.corr_volume(src, tgt, centers, 3)
        for n in range(5):
            for v in range(3):
                for u in range(3):
                    x = centers[n, 0] + (u - 1)
                    y = centers[n, 1] + (v - 1)
                    if not (0 <= x <= 13 and 0 <= y <= 11):
                        if mask[n, v, u]:
                            return False
                        continue
                    x0, y0 = int(np.floor(x)), int(np.floor(y))
                    x0, y0 = min(x0, 12), min(y0, 10)
                    fx, fy = x - x0, y - y0
                    val = 0.0
                    for c in range(4):
                        tv = (1 - fy) * (
                            (1 - fx) * tgt[y0, x0, c] + fx * tgt[y0, x0 + 1, c]
                        ) + fy * (
                            (1 - fx) * tgt[y0 + 1, x0, c] + fx * tgt[y0 + 1, x0 + 1, c]
                        )
                        val += tv * src[n, c]
                    if abs(val - got[n, v, u]) > 1e-6:
                        return False
    return True


def check_gauge_invariance(rng, n_cases=20):
    K = Intrinsics(90.0, 90.0, 40.0, 40.0)
    for _ in range(n_cases):
        T_i = se3_exp(rng.uniform(-0.1, 0.1, 6))
        T_j = se3_exp(rng.uniform(-0.1, 0.1, 6))
        G = se3_exp(rng.uniform(-1.0, 1.0, 6))
        patch = Patch(0, np.array([40.0, 40.0]), 1, 0.8)
        a = reproject_patch(patch, T_i, T_j, K)
        b = reproject_patch(patch, G * T_i, G * T_j, K)
        if np.abs(a - b).max() > 1e-9:
            return False
    return True


def run_selfcheck(tmp_dir):
    """Run every embedded check; returns list of (name, passed)."""
    from pathlib import Path

    tmp = Path(tmp_dir)
    rng = np.random.default_rng(20240917)
    checks = [
        ("se3_exp_log_roundtrip", lambda: check_se3_roundtrip(rng)),
        ("reprojection_jacobian_fd", lambda: check_jacobians_fd(rng)),
        ("salient_score_bruteforce", lambda: check_score_map_bruteforce(rng)),
        ("nms_bruteforce", lambda: check_nms_bruteforce(rng)),
        ("schur_equals_dense", lambda: check_schur_dense(rng)),
        ("umeyama_recovery", lambda: check_umeyama_recovery(rng)),
        ("tum_roundtrip", lambda: check_tum_roundtrip(rng, tmp)),
        ("correlation_bruteforce", lambda: check_correlation_bruteforce(rng)),
        ("reprojection_gauge_invariance", lambda: check_gauge_invariance(rng)),
    ]
    results = []
    for name, fn in checks:
        try:
            ok = bool(fn())
        except Exception:
            ok = False
        results.append((name, ok))
    return results
