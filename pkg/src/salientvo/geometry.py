"""SE(3) poses, pinhole camera model, inverse-depth patch reprojection.

Poses are world-from-camera rigid transforms (p_world = R p_cam + t),
stored as a unit quaternion plus translation and renormalized after every
composition. Twists are 6-vectors (vx, vy, vz, wx, wy, wz), translation
first. The relative transform that moves camera-i coordinates into
camera-j coordinates is ``T_j^{-1} * T_i``; a common left-multiplied
transform applied to both poses therefore cancels out of reprojection.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, BehindCamera

_SMALL_ANGLE = 1e-8
_MIN_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion, numerically stable branch pick."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
             (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def hat(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


# ---------------------------------------------------------------------------
# pose and intrinsics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform (unit quaternion + translation)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).copy()
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion has non-finite or zero norm")
        q /= n
        if q[0] < 0:  # canonical hemisphere keeps log well-behaved
            q = -q
        t = np.asarray(self.t, dtype=np.float64).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity():
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rt(R, t):
        return Pose(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_matrix(M):
        M = np.asarray(M, dtype=np.float64)
        return Pose.from_rt(M[:3, :3], M[:3, 3])

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.t
        return M

    def compose(self, other: "Pose") -> "Pose":
        q = quat_mul(self.q, other.q)
        t = self.apply(other.t)
        return Pose(q, t)

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qc = quat_conj(self.q)
        return Pose(qc, -_quat_rotate(qc, self.t))

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        R = self.rotation_matrix()
        return pts @ R.T + self.t


def _quat_rotate(q, v):
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix3(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def normalized_dirs(self, pixels):
        """Pixel coords (N, 2) -> rays (N, 3) with unit z."""
        p = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        out = np.empty((p.shape[0], 3))
        out[:, 0] = (p[:, 0] - self.cx) / self.fx
        out[:, 1] = (p[:, 1] - self.cy) / self.fy
        out[:, 2] = 1.0
        return out

    def project(self, pts):
        """Camera-frame points (N, 3) -> pixel coords (N, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        z = pts[:, 2]
        out = np.empty((pts.shape[0], 2))
        out[:, 0] = self.fx * pts[:, 0] / z + self.cx
        out[:, 1] = self.fy * pts[:, 1] / z + self.cy
        return out


@dataclass(frozen=True)
class Patch:
    """Square pixel block with one shared inverse depth.

    center is (x, y) in image pixels; pixel offsets run over
    [-radius, radius]^2 row-major (y outer, x inner).
    """

    frame_id: int
    center: np.ndarray
    radius: int
    inv_depth: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).copy()
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        if self.inv_depth <= 0:
            raise ValueError("inverse depth must be positive")

    def pixel_coords(self):
        r = self.radius
        offs = np.arange(-r, r + 1, dtype=np.float64)
        gy, gx = np.meshgrid(offs, offs, indexing="ij")
        return np.stack(
            (self.center[0] + gx.ravel(), self.center[1] + gy.ravel()), axis=1
        )


# ---------------------------------------------------------------------------
# exponential / logarithm maps
# ---------------------------------------------------------------------------

def so3_left_jacobian(w):
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / t2 * W
        + (theta - np.sin(theta)) / (t2 * theta) * (W @ W)
    )


def so3_left_jacobian_inv(w):
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * W + (1.0 - cot) / (theta * theta) * (W @ W)


def se3_exp(xi) -> Pose:
    """Exponential map: twist (v, w) -> Pose (Rodrigues + left Jacobian)."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    if theta < _SMALL_ANGLE:
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
    else:
        axis = w / theta
        half = 0.5 * theta
        q = np.concatenate(([np.cos(half)], np.sin(half) * axis))
    return Pose(q, so3_left_jacobian(w) @ v)


def se3_log(T: Pose):
    """Logarithm map: Pose -> twist. Raises AngleNearPi near the cut locus."""
    qw = min(max(T.q[0], -1.0), 1.0)
    sin_half = np.linalg.norm(T.q[1:])
    theta = 2.0 * np.arctan2(sin_half, qw)
    if theta >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if sin_half < _SMALL_ANGLE:
        w = 2.0 * T.q[1:]
    else:
        w = T.q[1:] / sin_half * theta
    v = so3_left_jacobian_inv(w) @ T.t
    return np.concatenate((v, w))


def relative_pose(T_i: Pose, T_j: Pose) -> Pose:
    """Camera-j-from-camera-i transform for world-from-camera poses."""
    return T_j.inverse() * T_i


def delta_pose(X_i: Pose, X_j: Pose) -> Pose:
    """Relative pose X_j * X_i^{-1} used by the trajectory pose loss."""
    return X_j * X_i.inverse()


# ---------------------------------------------------------------------------
# inverse-depth reprojection and Jacobians
# ---------------------------------------------------------------------------

def reproject_points(xn, d, G: Pose, K: Intrinsics):
    """Map rays xn (N, 3) with inverse depths d through relative pose G.

    Returns (pixels (N, 2), depths (N,)); depths are metric z in the
    target camera, negative or tiny values mean the point went behind it.
    """
    xn = np.atleast_2d(np.asarray(xn, dtype=np.float64))
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), xn.shape[0])
    R = G.rotation_matrix()
    q = xn @ R.T + d[:, None] * G.t
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = K.project(q)
    return pix, q[:, 2] / d


def reproject_patch(patch: Patch, T_i: Pose, T_j: Pose, K: Intrinsics):
    """Reproject every pixel of a patch from frame i into frame j.

    With T_i == T_j this is the identity on coordinates. Raises
    BehindCamera if any transformed pixel has depth <= 1e-6.
    """
    pix = patch.pixel_coords()
    xn = K.normalized_dirs(pix)
    coords, depths = reproject_points(xn, patch.inv_depth, relative_pose(T_i, T_j), K)
    if np.any(depths <= _MIN_DEPTH):
        raise BehindCamera(
            f"patch at {patch.center} maps to depth {depths.min():.3e}"
        )
    return coords


def _hat_batch(v):
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def quat_to_matrix_batch(q):
    """(N, 4) quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def reproject_batch(xn, d, R, t, K: Intrinsics):
    """Reprojection-only companion of reprojection_jacobian_batch.

    Same per-row conventions, returns just (pixels (N, 2), depths (N,)).
    """
    xn = np.atleast_2d(np.asarray(xn, dtype=np.float64))
    n = xn.shape[0]
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), n)
    R = np.broadcast_to(np.asarray(R, dtype=np.float64), (n, 3, 3))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n, 3))
    q = np.einsum("nab,nb->na", R, xn) + d[:, None] * t
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.empty((n, 2))
        pix[:, 0] = K.fx * q[:, 0] / z + K.cx
        pix[:, 1] = K.fy * q[:, 1] / z + K.cy
        depths = z / d
    return pix, depths


def reprojection_jacobian_batch(xn, d, R, t, K: Intrinsics):
    """Batched analytic reprojection derivatives.

    One row per observation: xn (N, 3) rays, d (N,) inverse depths,
    R (N, 3, 3) and t (N, 3) the relative camera-j-from-camera-i
    transforms. Perturbations are right-multiplied local twists on the
    two world-from-camera poses (T <- T exp(xi)) plus the inverse depth.
    Returns (J_pose_i (N,2,6), J_pose_j (N,2,6), J_depth (N,2),
    pixels (N,2), depths (N,)).
    """
    xn = np.atleast_2d(np.asarray(xn, dtype=np.float64))
    n = xn.shape[0]
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), n)
    R = np.broadcast_to(np.asarray(R, dtype=np.float64), (n, 3, 3))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n, 3))
    q = np.einsum("nab,nb->na", R, xn) + d[:, None] * t
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.empty((n, 2))
        pix[:, 0] = K.fx * q[:, 0] / z + K.cx
        pix[:, 1] = K.fy * q[:, 1] / z + K.cy

        # d(pixel)/dq
        P = np.zeros((n, 2, 3))
        P[:, 0, 0] = K.fx / z
        P[:, 0, 2] = -K.fx * q[:, 0] / (z * z)
        P[:, 1, 1] = K.fy / z
        P[:, 1, 2] = -K.fy * q[:, 1] / (z * z)

    # dq/dxi_i = [d R | -R hat(xn)],  dq/dxi_j = [-d I | hat(q)]
    Jq_i = np.empty((n, 3, 6))
    Jq_j = np.empty((n, 3, 6))
    Jq_i[:, :, :3] = d[:, None, None] * R
    Jq_i[:, :, 3:] = -np.einsum("nab,nbc->nac", R, _hat_batch(xn))
    Jq_j[:, :, :3] = -d[:, None, None] * np.eye(3)[None, :, :]
    Jq_j[:, :, 3:] = _hat_batch(q)

    J_i = np.einsum("nab,nbc->nac", P, Jq_i)
    J_j = np.einsum("nab,nbc->nac", P, Jq_j)
    J_d = np.einsum("nab,nb->na", P, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        depths = z / d
    return J_i, J_j, J_d, pix, depths


def reprojection_jacobian_points(xn, d, G: Pose, K: Intrinsics):
    """Single relative-pose wrapper around reprojection_jacobian_batch."""
    xn = np.atleast_2d(np.asarray(xn, dtype=np.float64))
    return reprojection_jacobian_batch(
        xn, d, G.rotation_matrix()[None, :, :], G.t[None, :], K
    )


def reprojection_jacobian(patch: Patch, T_i: Pose, T_j: Pose, K: Intrinsics):
    """Per-pixel Jacobians (J_pose_i, J_pose_j, J_depth) for one patch."""
    pix = patch.pixel_coords()
    xn = K.normalized_dirs(pix)
    J_i, J_j, J_d, _, depths = reprojection_jacobian_points(
        xn, patch.inv_depth, relative_pose(T_i, T_j), K
    )
    if np.any(depths <= _MIN_DEPTH):
        raise BehindCamera(
            f"patch at {patch.center} maps to depth {depths.min():.3e}"
        )
    return J_i, J_j, J_d
