"""Training losses evaluated as pure metrics (no gradients).

Covers the contrastive feature-matching probability and its masked
cross-entropy, the flow negative log-likelihood with per-edge precision
weights, the weighted pre-training total, and the trajectory pose loss
over SE(3) log residuals.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AllOccluded, NonPositiveWeight, ZeroFeature
from .geometry import delta_pose, se3_log

DEFAULT_GAMMA = 10.0
DEFAULT_WEIGHT_SALIENT = 1.0
DEFAULT_WEIGHT_RANDOM = 0.2
DEFAULT_WEIGHT_FLOW = 0.4


def feature_match_distribution(feat_map, f0, gamma=DEFAULT_GAMMA):
    """Softmax over all locations of gamma-scaled dot products with f0.

    feat_map is (H, W, C) with rows L2-normalized per location; returns
    the full (H, W) probability map (sums to 1).
    """
    f0 = np.asarray(f0, dtype=np.float64)
    if np.linalg.norm(f0) < 1e-12:
        raise ZeroFeature("reference feature has near-zero norm")
    logits = gamma * np.einsum("hwc,c->hw", np.asarray(feat_map, dtype=np.float64), f0)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def feature_match_prob(feat_map, f0, gt_loc, gamma=DEFAULT_GAMMA):
    """Probability mass at the ground-truth location (row, col)."""
    dist = feature_match_distribution(feat_map, f0, gamma)
    r, c = int(gt_loc[0]), int(gt_loc[1])
    return float(dist[r, c])


def feature_loss(f0, feat_maps, gt_locs, visibility, gamma=DEFAULT_GAMMA):
    """Visibility-masked cross-entropy over frames and points.

    f0: (L, C) reference features; feat_maps: sequence of (H, W, C)
    maps; gt_locs: (T, L, 2) integer (row, col); visibility: (T, L).
    """
    f0 = np.asarray(f0, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    if vis.sum() == 0:
        raise AllOccluded("every correspondence is masked")
    total = 0.0
    for t, fmap in enumerate(feat_maps):
        for l in range(f0.shape[0]):
            if not vis[t, l]:
                continue
            p = feature_match_prob(fmap, f0[l], gt_locs[t][l], gamma)
            total -= np.log(p)
    return total / vis.sum()


def flow_nll_loss(gt_delta, est_delta, sigma):
    """Sum over edges of r^T diag(sigma) r - log det diag(sigma).

    sigma holds per-edge 2-vector confidence (precision) weights.
    """
    gt = np.atleast_2d(np.asarray(gt_delta, dtype=np.float64))
    est = np.atleast_2d(np.asarray(est_delta, dtype=np.float64))
    sg = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if np.any(sg <= 0):
        raise NonPositiveWeight("confidence weights must be > 0")
    r = gt - est
    return float(np.sum(sg * r * r) - np.sum(np.log(sg)))


@dataclass(frozen=True)
class LossBreakdown:
    feature_salient: float
    feature_random: float
    flow: float
    weight_salient: float
    weight_random: float
    weight_flow: float

    @property
    def total(self):
        return (
            self.weight_salient * self.feature_salient
            + self.weight_random * self.feature_random
            + self.weight_flow * self.flow
        )


def combined_pretrain_loss(
    feature_salient,
    feature_random,
    flow,
    weight_salient=DEFAULT_WEIGHT_SALIENT,
    weight_random=DEFAULT_WEIGHT_RANDOM,
    weight_flow=DEFAULT_WEIGHT_FLOW,
) -> LossBreakdown:
    parts = (feature_salient, feature_random, flow)
    if not np.all(np.isfinite(parts)):
        raise ValueError("loss parts must be finite")
    return LossBreakdown(
        feature_salient, feature_random, flow,
        weight_salient, weight_random, weight_flow,
    )


def pose_loss(gt_poses, est_poses, pairs):
    """Sum over (i, j) pairs of ||log(G_ij^-1 T_ij)||_2, X_ij = X_j X_i^-1."""
    total = 0.0
    for i, j in pairs:
        G_ij = delta_pose(gt_poses[i], gt_poses[j])
        T_ij = delta_pose(est_poses[i], est_poses[j])
        err = G_ij.inverse() * T_ij
        total += float(np.linalg.norm(se3_log(err)))
    return total


def l2_normalize_features(feat_map, eps=1e-12):
    """Normalize an (H, W, C) map so each location has unit L2 norm."""
    f = np.asarray(feat_map, dtype=np.float64)
    n = np.linalg.norm(f, axis=2, keepdims=True)
    return f / np.maximum(n, eps)
