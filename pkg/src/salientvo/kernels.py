"""Hot numeric kernels with numba and pure-numpy implementations.

Each public name dispatches to the backend chosen in :mod:`.backend`.
The two implementations agree to floating-point roundoff (the benchmark
script checks the worst-case difference); within one backend results are
bit-reproducible.

Kernels:
    score_map(feat)            -> (H, W) salient scores
    bilinear_gather(v, coords) -> (N, C) samples + (N,) validity
    corr_volume(src, tgt, ...) -> (N, s, s) dot products + validity
    slic_assign(...)           -> (H, W) superpixel labels
"""

import numpy as np

from .backend import USE_NUMBA

_BETA_EPS = 1e-300  # guards the channel-max division for all-zero pixels


# ---------------------------------------------------------------------------
# loop implementations (compiled under numba)
# ---------------------------------------------------------------------------

def _score_map_loops(feat):
    h, w, c = feat.shape
    e = np.exp(feat)
    out = np.empty((h, w), np.float64)
    for m in range(h):
        y0 = m - 1 if m > 0 else 0
        y1 = m + 2 if m < h - 1 else h
        for n in range(w):
            x0 = n - 1 if n > 0 else 0
            x1 = n + 2 if n < w - 1 else w
            cmax = feat[m, n, 0]
            for g in range(1, c):
                if feat[m, n, g] > cmax:
                    cmax = feat[m, n, g]
            denom_beta = cmax if cmax != 0.0 else _BETA_EPS
            best = -np.inf
            for hh in range(c):
                acc = 0.0
                for mm in range(y0, y1):
                    for nn in range(x0, x1):
                        acc += e[mm, nn, hh]
                alpha = e[m, n, hh] / acc
                beta = feat[m, n, hh] / denom_beta
                v = alpha * beta
                if v > best:
                    best = v
            out[m, n] = best
    return out


def _bilinear_gather_loops(values, coords):
    h, w, c = values.shape
    n = coords.shape[0]
    out = np.zeros((n, c), np.float64)
    valid = np.zeros(n, np.bool_)
    for i in range(n):
        x = coords[i, 0]
        y = coords[i, 1]
        if not (0.0 <= x <= w - 1.0 and 0.0 <= y <= h - 1.0):
            continue
        valid[i] = True
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        if x0 > w - 2:
            x0 = w - 2 if w > 1 else 0
        if y0 > h - 2:
            y0 = h - 2 if h > 1 else 0
        x1 = x0 + 1 if w > 1 else x0
        y1 = y0 + 1 if h > 1 else y0
        fx = x - x0
        fy = y - y0
        for ch in range(c):
            v00 = values[y0, x0, ch]
            v01 = values[y0, x1, ch]
            v10 = values[y1, x0, ch]
            v11 = values[y1, x1, ch]
            out[i, ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * (
                (1.0 - fx) * v10 + fx * v11
            )
    return out, valid


def _corr_volume_loops(src, tgt, centers, s):
    n, c = src.shape
    h, w, _ = tgt.shape
    half = s // 2
    out = np.zeros((n, s, s), np.float64)
    valid = np.zeros((n, s, s), np.bool_)
    for i in range(n):
        cx = centers[i, 0]
        cy = centers[i, 1]
        for v in range(s):
            y = cy + (v - half)
            for u in range(s):
                x = cx + (u - half)
                if not (0.0 <= x <= w - 1.0 and 0.0 <= y <= h - 1.0):
                    continue
                valid[i, v, u] = True
                x0 = int(np.floor(x))
                y0 = int(np.floor(y))
                if x0 > w - 2:
                    x0 = w - 2 if w > 1 else 0
                if y0 > h - 2:
                    y0 = h - 2 if h > 1 else 0
                x1 = x0 + 1 if w > 1 else x0
                y1 = y0 + 1 if h > 1 else y0
                fx = x - x0
                fy = y - y0
                acc = 0.0
                for ch in range(c):
                    t = (1.0 - fy) * (
                        (1.0 - fx) * tgt[y0, x0, ch] + fx * tgt[y0, x1, ch]
                    ) + fy * ((1.0 - fx) * tgt[y1, x0, ch] + fx * tgt[y1, x1, ch])
                    acc += t * src[i, ch]
                out[i, v, u] = acc
    return out, valid


def _slic_assign_loops(intensity, cx, cy, cmean, spatial_weight, window):
    h, w = intensity.shape
    k = cx.shape[0]
    labels = np.zeros((h, w), np.int32)
    best = np.full((h, w), np.inf, np.float64)
    for j in range(k):
        y0 = int(cy[j]) - window
        y1 = int(cy[j]) + window + 1
        x0 = int(cx[j]) - window
        x1 = int(cx[j]) + window + 1
        if y0 < 0:
            y0 = 0
        if x0 < 0:
            x0 = 0
        if y1 > h:
            y1 = h
        if x1 > w:
            x1 = w
        for y in range(y0, y1):
            for x in range(x0, x1):
                dc = intensity[y, x] - cmean[j]
                dx = x - cx[j]
                dy = y - cy[j]
                d = dc * dc + spatial_weight * (dx * dx + dy * dy)
                if d < best[y, x]:
                    best[y, x] = d
                    labels[y, x] = j
    return labels


# ---------------------------------------------------------------------------
# vectorized numpy fallbacks
# ---------------------------------------------------------------------------

def _score_map_numpy(feat):
    h, w, _ = feat.shape
    e = np.exp(feat)
    acc = np.zeros_like(e)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys0, ys1 = max(0, -dy), h - max(0, dy)
            xs0, xs1 = max(0, -dx), w - max(0, dx)
            acc[ys0:ys1, xs0:xs1] += e[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
    alpha = e / acc
    cmax = feat.max(axis=2, keepdims=True)
    beta = feat / np.where(cmax == 0.0, _BETA_EPS, cmax)
    return (alpha * beta).max(axis=2)


def _bilinear_gather_numpy(values, coords):
    h, w, c = values.shape
    x = coords[:, 0]
    y = coords[:, 1]
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xs = np.clip(x, 0.0, w - 1.0)
    ys = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    vals = values.astype(np.float64, copy=False)
    out = (1.0 - fy) * ((1.0 - fx) * vals[y0, x0] + fx * vals[y0, x1]) + fy * (
        (1.0 - fx) * vals[y1, x0] + fx * vals[y1, x1]
    )
    out[~valid] = 0.0
    return out, valid


def _corr_volume_numpy(src, tgt, centers, s):
    n = src.shape[0]
    half = s // 2
    offs = np.arange(s, dtype=np.float64) - half
    # v indexes rows (y offsets), u indexes columns (x offsets)
    gx = np.broadcast_to(centers[:, None, None, 0] + offs[None, None, :], (n, s, s))
    gy = np.broadcast_to(centers[:, None, None, 1] + offs[None, :, None], (n, s, s))
    flat = np.stack((gx, gy), axis=-1).reshape(-1, 2)
    vals, valid = _bilinear_gather_numpy(tgt, flat)
    vals = vals.reshape(n, s, s, -1)
    out = np.einsum("nvuc,nc->nvu", vals, src.astype(np.float64, copy=False))
    mask = valid.reshape(n, s, s)
    out[~mask] = 0.0
    return out, mask


def _slic_assign_numpy(intensity, cx, cy, cmean, spatial_weight, window):
    h, w = intensity.shape
    labels = np.zeros((h, w), np.int32)
    best = np.full((h, w), np.inf)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    for j in range(cx.shape[0]):
        y0 = max(int(cy[j]) - window, 0)
        y1 = min(int(cy[j]) + window + 1, h)
        x0 = max(int(cx[j]) - window, 0)
        x1 = min(int(cx[j]) + window + 1, w)
        dc = intensity[y0:y1, x0:x1] - cmean[j]
        dsp = (xs[x0:x1][None, :] - cx[j]) ** 2 + (ys[y0:y1][:, None] - cy[j]) ** 2
        d = dc * dc + spatial_weight * dsp
        sub = best[y0:y1, x0:x1]
        upd = d < sub
        sub[upd] = d[upd]
        labels[y0:y1, x0:x1][upd] = j
    return labels


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit

    score_map = njit(cache=True)(_score_map_loops)
    bilinear_gather = njit(cache=True)(_bilinear_gather_loops)
    corr_volume = njit(cache=True)(_corr_volume_loops)
    slic_assign = njit(cache=True)(_slic_assign_loops)
else:
    score_map = _score_map_numpy
    bilinear_gather = _bilinear_gather_numpy
    corr_volume = _corr_volume_numpy
    slic_assign = _slic_assign_numpy


def warmup():
    """Force one compilation/dispatch of every kernel (cheap on numpy)."""
    feat = np.random.default_rng(0).random((4, 4, 2))
    score_map(feat)
    vals = feat.astype(np.float32)
    coords = np.array([[0.5, 0.5], [9.0, 9.0]])
    bilinear_gather(vals, coords)
    corr_volume(np.ones((2, 2)), vals, coords, 3)
    slic_assign(feat[:, :, 0], np.array([1.0]), np.array([1.0]), np.array([0.5]), 1.0, 4)
