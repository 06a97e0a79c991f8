"""Salient scoring of feature maps and patch-center selection.

The per-pixel score combines a 3x3 spatial softmax ratio (alpha) with a
channel ratio (beta), maxed over channels. Centers are picked by taking
the best pixel of each grid cell, suppressing candidates dominated by a
strictly higher-scoring candidate within a Chebyshev radius, and keeping
the top k. All ties break lexicographically by (row, col) ascending so
results are bit-reproducible.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyPool, NonFiniteFeature
from .geometry import Patch


def salient_score_map(feat) -> np.ndarray:
    """Score every pixel of an (H, W, C) feature array.

    The 3x3 neighborhood includes the center and is clipped at borders.
    """
    feat = np.asarray(feat)
    if feat.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    h, w, c = feat.shape
    if h < 3 or w < 3 or c < 1:
        raise ValueError("feature map must be at least 3x3x1")
    if not np.all(np.isfinite(feat)):
        raise NonFiniteFeature("feature map contains NaN or Inf")
    return kernels.score_map(np.ascontiguousarray(feat, dtype=np.float64))


def select_salient_patches(scores, k, grid=8, nms_radius=4, r=1):
    """Pick up to k patch centers from a score map.

    Returns (centers (m, 2) int array as (x, y), center_scores (m,),
    shortfall flag). Centers closer than r to any border are dropped
    before anything else; the survivors are sorted by score descending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1 or grid < 1:
        raise ValueError("k and grid must be positive")
    h, w = scores.shape
    cand = _grid_candidates(scores, grid, r)
    if cand.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0), True
    keep = _dominance_nms(scores, cand, nms_radius)
    surv = cand[keep]
    s = scores[surv[:, 0], surv[:, 1]]
    order = np.lexsort((surv[:, 1], surv[:, 0], -s))
    surv = surv[order][:k]
    s = s[order][:k]
    centers = np.stack((surv[:, 1], surv[:, 0]), axis=1)  # (x, y)
    return centers, s, surv.shape[0] < k


def _grid_candidates(scores, grid, r):
    """Best interior pixel of each grid cell, ties to smallest (row, col)."""
    h, w = scores.shape
    out = []
    for y0 in range(0, h, grid):
        for x0 in range(0, w, grid):
            y1, x1 = min(y0 + grid, h), min(x0 + grid, w)
            ys0, ys1 = max(y0, r), min(y1, h - r)
            xs0, xs1 = max(x0, r), min(x1, w - r)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            block = scores[ys0:ys1, xs0:xs1]
            idx = np.argmax(block)  # first occurrence = smallest (row, col)
            dy, dx = divmod(idx, block.shape[1])
            out.append((ys0 + dy, xs0 + dx))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def _dominance_nms(scores, cand, radius):
    """Keep candidates with no strictly higher-scoring candidate in range."""
    s = scores[cand[:, 0], cand[:, 1]]
    n = cand.shape[0]
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        cheb = np.maximum(
            np.abs(cand[:, 0] - cand[i, 0]), np.abs(cand[:, 1] - cand[i, 1])
        )
        if np.any((cheb <= radius) & (s > s[i])):
            keep[i] = False
    return keep


@dataclass
class PatchSet:
    """Salient plus random patches with per-patch labels."""

    salient: list = field(default_factory=list)
    random: list = field(default_factory=list)
    shortfall: bool = False

    @property
    def patches(self):
        return self.salient + self.random

    @property
    def labels(self):
        return ["salient"] * len(self.salient) + ["random"] * len(self.random)


def build_patch_set(
    salient_pool,
    n_salient,
    n_random,
    rng_seed,
    image_shape,
    radius=1,
    frame_id=0,
    inv_depth=1.0,
) -> PatchSet:
    """Draw the mixed salient + random patch set.

    Salient centers come uniformly without replacement from the pool;
    random centers are uniform over interior pixels. Fully determined by
    rng_seed.
    """
    pool = np.asarray(salient_pool, dtype=np.int64).reshape(-1, 2)
    if n_salient > 0 and pool.shape[0] == 0:
        raise EmptyPool("salient pool is empty")
    h, w = image_shape
    rng = np.random.default_rng(rng_seed)
    shortfall = False

    take = min(n_salient, pool.shape[0])
    shortfall = take < n_salient
    if take > 0:
        idx = rng.choice(pool.shape[0], size=take, replace=False)
        idx.sort()
        sal_centers = pool[idx]
    else:
        sal_centers = pool[:0]

    lo, hi_x, hi_y = radius, w - radius, h - radius
    if n_random > 0 and (hi_x <= lo or hi_y <= lo):
        raise ValueError("image too small for the requested patch radius")
    rx = rng.integers(lo, hi_x, size=n_random)
    ry = rng.integers(lo, hi_y, size=n_random)

    mk = lambda x, y: Patch(frame_id, np.array([float(x), float(y)]), radius, inv_depth)
    return PatchSet(
        salient=[mk(x, y) for x, y in sal_centers],
        random=[mk(x, y) for x, y in zip(rx, ry)],
        shortfall=shortfall,
    )
