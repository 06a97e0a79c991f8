"""Iterative sparse-patch odometry loop.

Per new frame: extract features, pick the salient patch set, connect it
to the active frames within the neighborhood half-width, then repeat
{reproject -> correlate -> flow provider -> weighted BA} a fixed number
of times. Frames older than the removal window are frozen and their
poses appended to the trajectory log.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bundle_adjust import BAProblem, weighted_ba
from .correlation import (
    CONFIDENCE_FLOOR,
    CorrelationMap,
    EdgeContext,
    FeatureConfig,
    OracleProvider,
    TrackerProvider,
    extract_features,
    lookup,
)
from .errors import DimensionMismatch, SingularSystem
from .eval_io import Trajectory
from .geometry import Intrinsics, Pose, reproject_batch
from .saliency import build_patch_set, salient_score_map, select_salient_patches

_MIN_DEPTH = 1e-6


@dataclass
class PipelineConfig:
    patches_per_frame: int = 96
    random_patches: int = 0
    patch_radius: int = 1
    nms_radius: int = 4
    selection_grid: int = 8
    removal_window: int = 18
    iterations: int = 8
    neighborhood: int = 13
    gn_iterations: int = 2
    corr_grid: int = 7
    damping: float = 1e-4
    feature_stride: int = 1
    provider: str = "tracker"
    oracle_noise: float = 0.0
    seed: int = 0
    full_patch_residuals: bool = False

    def validate(self):
        positive = (
            self.patches_per_frame, self.patch_radius + 1, self.nms_radius,
            self.selection_grid, self.removal_window, self.iterations + 1,
            self.neighborhood, self.gn_iterations, self.corr_grid,
            self.feature_stride,
        )
        if any(v <= 0 for v in positive):
            raise ValueError("pipeline config values must be positive")
        if self.neighborhood >= self.removal_window:
            raise ValueError("neighborhood half-width must be < removal window")
        if self.corr_grid % 2 == 0:
            raise ValueError("correlation grid side must be odd")
        if self.random_patches < 0:
            raise ValueError("random_patches must be >= 0")


@dataclass
class _FrameEntry:
    frame_id: int
    pose: Pose
    fmap: object
    patch_ids: list


class _PatchStore:
    """Append-only columnar store of every patch ever created."""

    def __init__(self):
        self.frame_id = []
        self.center = []
        self.inv_depth = []
        self.label = []
        self.xn_center = []
        self.xn_pixels = []
        self.src_feats = []

    def __len__(self):
        return len(self.frame_id)

    def append(self, frame_id, center, inv_depth, label, xn_center, xn_pixels, feats):
        self.frame_id.append(frame_id)
        self.center.append(np.asarray(center, dtype=np.float64))
        self.inv_depth.append(float(inv_depth))
        self.label.append(label)
        self.xn_center.append(xn_center)
        self.xn_pixels.append(xn_pixels)
        self.src_feats.append(feats)
        return len(self.frame_id) - 1


@dataclass
class OdometryState:
    config: PipelineConfig
    intrinsics: Intrinsics
    provider: object = None
    frames: dict = field(default_factory=dict)   # frame_id -> _FrameEntry
    trajectory_log: list = field(default_factory=list)
    flagged_frames: list = field(default_factory=list)
    frame_shape: tuple = None
    next_frame_id: int = 0

    def __post_init__(self):
        self.config.validate()
        if self.provider is None:
            self.provider = TrackerProvider(stride=self.config.feature_stride)
        self.patches = _PatchStore()
        self.edges = np.zeros((0, 3), dtype=np.int64)
        self.targets = np.zeros((0, 2))
        self.weights = np.zeros((0, 2))
        self.valid = np.zeros(0, dtype=bool)
        self._groups = None  # cached (order, starts, pair_list)

    # -- frame ingestion ---------------------------------------------------

    def add_frame(self, image):
        cfg = self.config
        image = np.asarray(image)
        if self.frame_shape is None:
            self.frame_shape = image.shape[:2]
        elif image.shape[:2] != self.frame_shape:
            raise DimensionMismatch(
                f"expected {self.frame_shape}, got {image.shape[:2]}"
            )
        fid = self.next_frame_id
        self.next_frame_id += 1

        fmap = extract_features(image, FeatureConfig(stride=cfg.feature_stride))
        scores = salient_score_map(fmap.values)
        margin = max(cfg.patch_radius, 1)
        centers, _, _ = select_salient_patches(
            scores, cfg.patches_per_frame, grid=cfg.selection_grid,
            nms_radius=cfg.nms_radius, r=margin,
        )
        pool = centers * cfg.feature_stride
        pset = build_patch_set(
            pool, min(cfg.patches_per_frame, pool.shape[0]), cfg.random_patches,
            [cfg.seed, fid], self.frame_shape, radius=cfg.patch_radius,
            frame_id=fid, inv_depth=self._initial_inv_depth(),
        )

        pose = self._extrapolated_pose()
        patch_ids = []
        for patch, label in zip(pset.patches, pset.labels):
            feats, ok = lookup(fmap, patch.pixel_coords())
            if not np.all(ok):
                continue
            pid = self.patches.append(
                fid, patch.center, patch.inv_depth, label,
                self.intrinsics.normalized_dirs(patch.center[None, :])[0],
                self.intrinsics.normalized_dirs(patch.pixel_coords()),
                np.ascontiguousarray(feats),
            )
            patch_ids.append(pid)

        self.frames[fid] = _FrameEntry(fid, pose, fmap, patch_ids)
        self._connect(fid)
        self.audit()
        return self

    def _initial_inv_depth(self):
        if not self.frames:
            return 1.0
        last = self.frames[max(self.frames)]
        depths = [self.patches.inv_depth[k] for k in last.patch_ids]
        return float(np.median(depths)) if depths else 1.0

    def _extrapolated_pose(self):
        ids = sorted(self.frames)
        if not ids:
            return Pose.identity()
        if len(ids) == 1:
            return self.frames[ids[-1]].pose
        last, prev = self.frames[ids[-1]].pose, self.frames[ids[-2]].pose
        return (last * prev.inverse()) * last

    def _connect(self, fid):
        cfg = self.config
        new_edges = []
        for other in sorted(self.frames):
            if other == fid or abs(other - fid) > cfg.neighborhood:
                continue
            for k in self.frames[fid].patch_ids:
                new_edges.append((fid, other, k))
            for k in self.frames[other].patch_ids:
                new_edges.append((other, fid, k))
        if not new_edges:
            return
        add = np.asarray(new_edges, dtype=np.int64)
        n = add.shape[0]
        self.edges = np.concatenate((self.edges, add))
        self.targets = np.concatenate(
            (self.targets, np.stack([self.patches.center[k] for _, _, k in new_edges]))
        )
        self.weights = np.concatenate((self.weights, np.full((n, 2), CONFIDENCE_FLOOR)))
        self.valid = np.concatenate((self.valid, np.ones(n, dtype=bool)))
        self._groups = None

    def _edge_groups(self):
        """Edges grouped by (source, target) frame pair, cached per graph."""
        if self._groups is None:
            key = self.edges[:, 0] * max(self.next_frame_id, 1) + self.edges[:, 1]
            order = np.argsort(key, kind="stable")
            sorted_key = key[order]
            starts = np.flatnonzero(
                np.concatenate(([True], sorted_key[1:] != sorted_key[:-1]))
            )
            bounds = np.concatenate((starts, [order.size]))
            groups = []
            for a, b in zip(bounds[:-1], bounds[1:]):
                rows = order[a:b]
                i, j = self.edges[rows[0], 0], self.edges[rows[0], 1]
                groups.append((int(i), int(j), rows))
            self._groups = groups
        return self._groups

    # -- the iterative refinement loop --------------------------------------

    def iterate(self, n_iterations=None):
        if len(self.frames) < 2:
            raise ValueError("need at least 2 active frames")
        n = self.config.iterations if n_iterations is None else n_iterations
        for _ in range(n):
            self._refresh_targets()
            self._run_ba()
        self.audit()
        return self

    def _refresh_targets(self):
        """Reproject every edge, query the flow provider, set targets."""
        h, w = self.frame_shape
        inv_depth = np.asarray(self.patches.inv_depth)
        for i, j, rows in self._edge_groups():
            pids = self.edges[rows, 2]
            G = self.frames[j].pose.inverse() * self.frames[i].pose
            R, t = G.rotation_matrix(), G.t
            xn = np.stack([self.patches.xn_center[k] for k in pids])
            d = inv_depth[pids]
            centers, depths = reproject_batch(xn, d, R, t, self.intrinsics)
            ok = (
                (depths > _MIN_DEPTH)
                & (centers[:, 0] >= 0.0) & (centers[:, 0] <= w - 1.0)
                & (centers[:, 1] >= 0.0) & (centers[:, 1] <= h - 1.0)
            )
            self.valid[rows] = ok

            if getattr(self.provider, "needs_correlation", True):
                deltas, confs = self._tracked_flow(i, j, pids, R, t, d, ok)
            else:
                src_centers = np.stack([self.patches.center[k] for k in pids])
                deltas, confs = self.provider.flow_batch(
                    i, j, pids, src_centers, centers
                )
            self.targets[rows] = centers + deltas
            self.weights[rows] = np.maximum(confs, 1e-12)

    def _tracked_flow(self, i, j, pids, R, t, d, ok):
        """Correlation volumes plus per-edge provider queries."""
        cfg = self.config
        fmap_j = self.frames[j].fmap
        n_edges = len(pids)
        px_per = self.patches.xn_pixels[pids[0]].shape[0]
        xn_px = np.concatenate([self.patches.xn_pixels[k] for k in pids])
        d_px = np.repeat(d, px_per)
        reproj_px, _ = reproject_batch(xn_px, d_px, R, t, self.intrinsics)
        src = np.concatenate([self.patches.src_feats[k] for k in pids])
        vols, vmask = kernels.corr_volume(
            np.ascontiguousarray(src), fmap_j.values,
            np.ascontiguousarray(reproj_px / float(fmap_j.stride)), cfg.corr_grid,
        )
        vols = vols.reshape(n_edges, px_per, cfg.corr_grid, cfg.corr_grid)
        vmask = vmask.reshape(n_edges, px_per, cfg.corr_grid, cfg.corr_grid)

        deltas = np.zeros((n_edges, 2))
        confs = np.full((n_edges, 2), CONFIDENCE_FLOOR)
        for e in range(n_edges):
            if not ok[e]:
                continue
            corr = CorrelationMap(vols[e], vmask[e])
            upd = self.provider.flow(
                corr,
                EdgeContext(
                    i, j, int(pids[e]), self.patches.center[pids[e]],
                    reproj_px[e * px_per + px_per // 2], self.frame_shape,
                ),
            )
            deltas[e] = upd.delta
            confs[e] = upd.confidence
        return deltas, confs

    def _run_ba(self):
        cfg = self.config
        if self.edges.shape[0] == 0:
            return
        active_ids = sorted(self.frames)
        frame_local = np.full(self.next_frame_id, -1, dtype=np.int64)
        for n, fid in enumerate(active_ids):
            frame_local[fid] = n
        patch_global = np.unique(self.edges[:, 2])
        patch_local = np.full(len(self.patches), -1, dtype=np.int64)
        patch_local[patch_global] = np.arange(patch_global.size)

        local_edges = np.stack(
            (
                frame_local[self.edges[:, 0]],
                frame_local[self.edges[:, 1]],
                patch_local[self.edges[:, 2]],
            ),
            axis=1,
        )
        poses = [self.frames[fid].pose for fid in active_ids]
        fixed = np.zeros(len(poses), dtype=bool)
        fixed[0] = True
        # anchoring the two oldest (already converged) poses pins the
        # monocular scale of the window, so pruning cannot freeze frames
        # at drifting scales
        if len(poses) > 2:
            fixed[1] = True
        problem = BAProblem(
            poses, None, local_edges, self.targets, self.weights,
            self.intrinsics, fixed, valid=self.valid,
            patch_centers=np.stack([self.patches.center[k] for k in patch_global]),
            patch_inv_depths=np.asarray(self.patches.inv_depth)[patch_global],
            patch_hosts=frame_local[
                np.asarray(self.patches.frame_id)[patch_global]
            ],
            patch_radius=cfg.patch_radius,
        )
        try:
            sol = weighted_ba(
                problem, iterations=cfg.gn_iterations, damping=cfg.damping,
                full_patch=cfg.full_patch_residuals,
            )
        except SingularSystem:
            self.flagged_frames.append(active_ids[-1])
            return
        for fid, new_pose in zip(active_ids, sol.poses):
            self.frames[fid].pose = new_pose
        for k, dv in zip(patch_global, sol.inv_depths):
            self.patches.inv_depth[k] = float(dv)

    # -- window maintenance --------------------------------------------------

    def prune(self):
        pruned = False
        while len(self.frames) > self.config.removal_window:
            oldest = min(self.frames)
            entry = self.frames.pop(oldest)
            self.trajectory_log.append((float(oldest), entry.pose))
            keep = (self.edges[:, 0] != oldest) & (self.edges[:, 1] != oldest)
            self.edges = self.edges[keep]
            self.targets = self.targets[keep]
            self.weights = self.weights[keep]
            self.valid = self.valid[keep]
            pruned = True
        if pruned:
            self._groups = None
        self.audit()
        return self

    # -- invariants ----------------------------------------------------------

    def audit(self):
        """Structural invariants; raises AssertionError on violation."""
        active = set(self.frames)
        if self.edges.shape[0]:
            ii, jj, kk = self.edges.T
            assert set(ii) <= active and set(jj) <= active, "dangling frame reference"
            assert kk.min() >= 0 and kk.max() < len(self.patches), (
                "dangling patch reference"
            )
            hosts = np.asarray(self.patches.frame_id)[kk]
            assert np.array_equal(hosts, ii), "edge host mismatch"
        expected = 0
        for i in active:
            for j in active:
                if i != j and abs(i - j) <= self.config.neighborhood:
                    expected += len(self.frames[i].patch_ids)
        assert self.edges.shape[0] == expected, (
            f"edge count {self.edges.shape[0]} != expected {expected}"
        )
        log_ids = [t for t, _ in self.trajectory_log]
        assert log_ids == sorted(log_ids), "trajectory log out of order"

    def full_trajectory(self) -> Trajectory:
        items = list(self.trajectory_log) + [
            (float(fid), self.frames[fid].pose) for fid in sorted(self.frames)
        ]
        return Trajectory(
            np.array([t for t, _ in items]), [p for _, p in items]
        )


def make_provider(config: PipelineConfig, oracle_geometry=None):
    if config.provider == "tracker":
        return TrackerProvider(stride=config.feature_stride)
    if config.provider == "oracle":
        if oracle_geometry is None:
            raise ValueError("oracle provider needs ground-truth geometry")
        return OracleProvider(
            oracle_geometry, noise_sigma=config.oracle_noise, rng_seed=config.seed
        )
    raise ValueError(f"unknown provider {config.provider!r}")


def run_sequence(images, config: PipelineConfig, intrinsics: Intrinsics,
                 provider=None) -> Trajectory:
    """Fold add_frame -> iterate -> prune over an image sequence."""
    images = list(images)
    if len(images) < 2:
        raise ValueError("need at least 2 frames")
    state = OdometryState(config, intrinsics, provider)
    for img in images:
        state.add_frame(img)
        if len(state.frames) >= 2:
            state.iterate(config.iterations)
        state.prune()
    return state.full_trajectory()
