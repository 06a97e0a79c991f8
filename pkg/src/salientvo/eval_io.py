"""Trajectory alignment, error metrics, and file I/O.

Formats:
    TUM trajectories: ``timestamp tx ty tz qx qy qz qw`` per line,
        ``#`` comments allowed, timestamps strictly increasing.
    PGM (P5) / PPM (P6): binary, maxval 255.
    FMAP: magic ``FMAP``, then H, W, C as unsigned 32-bit little-endian,
        then H*W*C little-endian float32, row-major, channel-fastest.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometry,
    InsufficientMatches,
    MagicMismatch,
    NonMonotoneTimestamps,
    ParseError,
)
from .geometry import Pose, matrix_to_quat, quat_to_matrix

ASSOCIATION_GATE_S = 0.02


# ---------------------------------------------------------------------------
# alignment and error
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sim3Alignment:
    scale: float
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def apply(self, pts):
        R = quat_to_matrix(self.rotation)
        return self.scale * (np.atleast_2d(pts) @ R.T) + self.translation


def umeyama_align(est, gt, with_scale=True) -> Sim3Alignment:
    """Least-squares similarity (or rigid) transform taking est onto gt.

    Minimizes sum ||gt - (s R est + t)||^2 with det(R) = +1 enforced via
    the standard sign correction. Raises DegenerateGeometry when the
    point sets cannot pin a rotation (covariance rank < 2).
    """
    x = np.atleast_2d(np.asarray(est, dtype=np.float64))
    y = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if x.shape != y.shape or x.shape[0] < 3:
        raise ValueError("point lists must match and contain at least 3 points")
    n = x.shape[0]
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    cov = yc.T @ xc / n
    U, D, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-12) < 2:
        raise DegenerateGeometry("point sets are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = (xc * xc).sum() / n
        scale = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        scale = 1.0
    t = my - scale * R @ mx
    return Sim3Alignment(scale, matrix_to_quat(R), t)


@dataclass
class Trajectory:
    """Timestamps (strictly increasing) paired with poses."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.timestamps.ndim != 1 or len(self.poses) != self.timestamps.shape[0]:
            raise ValueError("timestamps and poses must have equal length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotoneTimestamps("timestamps must be strictly increasing")

    def positions(self):
        return np.stack([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def __len__(self):
        return len(self.poses)


def associate(est: Trajectory, gt: Trajectory, gate=ASSOCIATION_GATE_S):
    """Nearest-timestamp association within a gate; each gt used once."""
    matches = []
    used = set()
    for i, ts in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt.timestamps - ts)))
        if abs(gt.timestamps[j] - ts) <= gate and j not in used:
            matches.append((i, j))
            used.add(j)
    return matches


def ate_rmse(est: Trajectory, gt: Trajectory, align="sim3", gate=ASSOCIATION_GATE_S):
    """RMSE of translational residuals after optional alignment.

    align is 'sim3' (rotation, translation, scale), 'se3' (no scale), or
    'none'. Needs at least 3 associated poses.
    """
    matches = associate(est, gt, gate)
    if len(matches) < 3:
        raise InsufficientMatches(f"only {len(matches)} associated poses")
    ei = [i for i, _ in matches]
    gi = [j for _, j in matches]
    pe = est.positions()[ei]
    pg = gt.positions()[gi]
    if align in ("sim3", "se3"):
        transform = umeyama_align(pe, pg, with_scale=(align == "sim3"))
        pe = transform.apply(pe)
    elif align != "none":
        raise ValueError("align must be one of sim3, se3, none")
    res = pe - pg
    return float(np.sqrt((res * res).sum(axis=1).mean()))


# ---------------------------------------------------------------------------
# TUM trajectory files
# ---------------------------------------------------------------------------

def read_trajectory(path) -> Trajectory:
    ts, poses = [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field")
            t, tx, ty, tz, qx, qy, qz, qw = vals
            ts.append(t)
            poses.append(Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return Trajectory(np.asarray(ts), poses)


def write_trajectory(path, traj):
    """Write TUM lines with 9 decimal digits per field.

    Accepts a Trajectory or an iterable of (timestamp, Pose).
    """
    if isinstance(traj, Trajectory):
        items = zip(traj.timestamps, traj.poses)
    else:
        items = traj
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in items:
            qw, qx, qy, qz = pose.q
            tx, ty, tz = pose.t
            fh.write(
                f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
                f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n"
            )


# ---------------------------------------------------------------------------
# PGM / PPM images
# ---------------------------------------------------------------------------

def _read_pnm_header(fh, path):
    magic = fh.read(2)
    if magic not in (b"P5", b"P6"):
        raise MagicMismatch(f"{path}: expected P5/P6, got {magic!r}")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ParseError(f"{path}: truncated header")
        body = line.split(b"#", 1)[0]
        fields.extend(body.split())
    w, h, maxval = (int(f) for f in fields[:3])
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    return magic, w, h


def read_pgm(path):
    with open(path, "rb") as fh:
        magic, w, h = _read_pnm_header(fh, path)
        channels = 1 if magic == b"P5" else 3
        payload = fh.read(w * h * channels)
        if len(payload) != w * h * channels:
            raise ParseError(
                f"{path}: expected {w * h * channels} pixel bytes, got {len(payload)}"
            )
    arr = np.frombuffer(payload, dtype=np.uint8).copy()
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


read_ppm = read_pgm


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        if img.ndim == 2:
            fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        elif img.ndim == 3 and img.shape[2] == 3:
            fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        else:
            raise ValueError("image must be (H, W) or (H, W, 3)")
        fh.write(img.tobytes())


write_ppm = write_pgm


# ---------------------------------------------------------------------------
# FMAP feature maps
# ---------------------------------------------------------------------------

FMAP_MAGIC = b"FMAP"


def write_fmap(path, values):
    v = np.ascontiguousarray(values, dtype=np.float32)
    if v.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    h, w, c = v.shape
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(v.astype("<f4").tobytes())


def read_fmap(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FMAP_MAGIC:
            raise MagicMismatch(f"{path}: expected FMAP, got {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise ParseError(f"{path}: truncated header")
        h, w, c = struct.unpack("<III", header)
        expected = h * w * c * 4
        payload = fh.read(expected + 1)
        if len(payload) != expected:
            raise ParseError(
                f"{path}: expected {expected} payload bytes, got "
                f"{min(len(payload), expected + 1)}"
            )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
