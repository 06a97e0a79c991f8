"""Procedurally rendered test scenes with exact ground truth.

A smooth random Fourier texture painted on the z = 0 world plane is
rendered from known world-from-camera poses. Because the texture is an
analytic function of world coordinates, images, per-pixel depths, and
cross-frame correspondences are all exact, which makes the scene usable
as an oracle for flow, bundle adjustment, and end-to-end runs.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .eval_io import write_fmap, write_pgm, write_trajectory
from .geometry import Intrinsics, Pose, matrix_to_quat


@dataclass
class FourierTexture:
    amplitudes: np.ndarray
    freqs: np.ndarray      # (n, 2) spatial frequency vectors, rad/m
    phases: np.ndarray

    @staticmethod
    def random(rng, n_waves=10, min_freq=8.0, max_freq=40.0):
        angles = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        mags = rng.uniform(min_freq, max_freq, n_waves)
        freqs = np.stack((mags * np.cos(angles), mags * np.sin(angles)), axis=1)
        amps = rng.uniform(0.3, 1.0, n_waves) / np.sqrt(n_waves)
        phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        return FourierTexture(amps, freqs, phases)

    def __call__(self, x, y):
        arg = (
            np.multiply.outer(x, self.freqs[:, 0])
            + np.multiply.outer(y, self.freqs[:, 1])
            + self.phases
        )
        v = (np.sin(arg) * self.amplitudes).sum(axis=-1)
        return 0.5 + 0.35 * v


def _look_down_rotation():
    # camera x -> world x, y -> world -y, z -> world -z (looking at z=0)
    return np.diag([1.0, -1.0, -1.0])


def arc_trajectory(n_frames, span=1.0, height=2.0, wobble=0.05):
    """Gently curved world-from-camera trajectory above the plane."""
    poses = []
    base_R = _look_down_rotation()
    for f in range(n_frames):
        s = f / max(n_frames - 1, 1)
        c = np.array(
            [
                span * s,
                wobble * np.sin(2.5 * np.pi * s),
                height + 0.4 * wobble * np.cos(2.0 * np.pi * s),
            ]
        )
        ang = 0.02 * np.array(
            [np.sin(1.7 * np.pi * s), np.cos(1.3 * np.pi * s), np.sin(0.9 * np.pi * s)]
        )
        cx, sx = np.cos(ang[0]), np.sin(ang[0])
        cy, sy = np.cos(ang[1]), np.sin(ang[1])
        cz, sz = np.cos(ang[2]), np.sin(ang[2])
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        R = base_R @ Rz @ Ry @ Rx
        poses.append(Pose(matrix_to_quat(R), c))
    return poses


@dataclass
class PlaneScene:
    """Textured z = 0 plane viewed from known poses."""

    poses: list
    intrinsics: Intrinsics
    texture: FourierTexture
    shape: tuple

    @staticmethod
    def generate(n_frames=30, shape=(120, 160), seed=0, span=1.0, height=2.0):
        rng = np.random.default_rng(seed)
        h, w = shape
        K = Intrinsics(fx=float(min(h, w)), fy=float(min(h, w)),
                       cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)
        return PlaneScene(
            arc_trajectory(n_frames, span=span, height=height),
            K,
            FourierTexture.random(rng),
            shape,
        )

    @property
    def n_frames(self):
        return len(self.poses)

    def _rays_world(self, frame, pixels):
        xn = self.intrinsics.normalized_dirs(pixels)
        R = self.poses[frame].rotation_matrix()
        return self.poses[frame].t, xn @ R.T

    def depth_at(self, frame, pixels):
        """Exact camera-z depth of the plane hit for each pixel."""
        origin, dirs = self._rays_world(frame, np.atleast_2d(pixels))
        return -origin[2] / dirs[:, 2]

    def world_points(self, frame, pixels):
        origin, dirs = self._rays_world(frame, np.atleast_2d(pixels))
        s = (-origin[2] / dirs[:, 2])[:, None]
        return origin + s * dirs

    def render(self, frame):
        h, w = self.shape
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pix = np.stack((xs.ravel(), ys.ravel()), axis=1).astype(np.float64)
        pts = self.world_points(frame, pix)
        vals = self.texture(pts[:, 0], pts[:, 1]).reshape(h, w)
        return np.clip(np.round(vals * 255.0), 0, 255).astype(np.uint8)

    def depth_map(self, frame):
        h, w = self.shape
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pix = np.stack((xs.ravel(), ys.ravel()), axis=1).astype(np.float64)
        return self.depth_at(frame, pix).reshape(h, w).astype(np.float32)

    # ground-truth geometry interface used by the oracle flow provider
    def targets_in_frame(self, src_frame, dst_frame, src_xy):
        pts = self.world_points(src_frame, src_xy)
        T = self.poses[dst_frame]
        cam = (pts - T.t) @ T.rotation_matrix()
        pix = self.intrinsics.project(cam)
        h, w = self.shape
        visible = (
            (cam[:, 2] > 1e-6)
            & (pix[:, 0] >= 0.0) & (pix[:, 0] <= w - 1.0)
            & (pix[:, 1] >= 0.0) & (pix[:, 1] <= h - 1.0)
        )
        return pix, visible

    def target_in_frame(self, src_frame, dst_frame, src_xy):
        pix, vis = self.targets_in_frame(src_frame, dst_frame, np.atleast_2d(src_xy))
        return pix[0], bool(vis[0])

    def save(self, out_dir):
        """Write frames, depth maps, GT trajectory, and a run manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        frames, depths = [], []
        for f in range(self.n_frames):
            fname = f"frame_{f:04d}.pgm"
            dname = f"depth_{f:04d}.fmap"
            write_pgm(out / fname, self.render(f))
            write_fmap(out / dname, self.depth_map(f)[:, :, None])
            frames.append(fname)
            depths.append(dname)
        write_trajectory(
            out / "gt.txt", [(float(f), self.poses[f]) for f in range(self.n_frames)]
        )
        manifest = {
            "frames": frames,
            "depth_maps": depths,
            "gt_trajectory": "gt.txt",
            "intrinsics": {
                "fx": self.intrinsics.fx,
                "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx,
                "cy": self.intrinsics.cy,
            },
        }
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return out / "manifest.json"


class DepthMapGeometry:
    """Oracle geometry backed by stored depth maps plus a GT trajectory.

    This is what `run-vo` uses when the oracle provider is selected: the
    scene manifest supplies per-frame depth FMAPs, poses, and intrinsics.
    """

    def __init__(self, depth_maps, poses, intrinsics: Intrinsics, shape):
        self.depth_maps = depth_maps
        self.poses = poses
        self.intrinsics = intrinsics
        self.shape = shape

    def _bilinear_depth(self, frame, xy):
        d = self.depth_maps[frame]
        h, w = d.shape
        x = np.clip(xy[:, 0], 0, w - 1)
        y = np.clip(xy[:, 1], 0, h - 1)
        x0 = np.minimum(np.floor(x).astype(int), w - 2)
        y0 = np.minimum(np.floor(y).astype(int), h - 2)
        fx, fy = x - x0, y - y0
        return (1 - fy) * ((1 - fx) * d[y0, x0] + fx * d[y0, x0 + 1]) + fy * (
            (1 - fx) * d[y0 + 1, x0] + fx * d[y0 + 1, x0 + 1]
        )

    def targets_in_frame(self, src_frame, dst_frame, src_xy):
        xy = np.atleast_2d(np.asarray(src_xy, dtype=np.float64))
        z = self._bilinear_depth(src_frame, xy)
        xn = self.intrinsics.normalized_dirs(xy)
        T_i, T_j = self.poses[src_frame], self.poses[dst_frame]
        pts = T_i.apply(xn * z[:, None])
        cam = (pts - T_j.t) @ T_j.rotation_matrix()
        pix = self.intrinsics.project(cam)
        h, w = self.shape
        visible = (
            (cam[:, 2] > 1e-6)
            & (pix[:, 0] >= 0.0) & (pix[:, 0] <= w - 1.0)
            & (pix[:, 1] >= 0.0) & (pix[:, 1] <= h - 1.0)
        )
        return pix, visible

    def target_in_frame(self, src_frame, dst_frame, src_xy):
        pix, vis = self.targets_in_frame(src_frame, dst_frame, np.atleast_2d(src_xy))
        return pix[0], bool(vis[0])
