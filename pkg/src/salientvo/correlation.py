"""Feature maps, bilinear lookup, correlation volumes, and flow providers.

The learned flow network is replaced by two non-learned providers behind
one contract: the tracker reads the correlation volume (argmax plus a
1-D quadratic sub-pixel fit per axis), the oracle reads ground-truth
geometry and is meant for synthetic evaluation. Providers are
deterministic for a fixed seed and always emit strictly positive
confidence.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ImageTooSmall

CONFIDENCE_FLOOR = 1e-3
OCCLUDED_CONFIDENCE = 1e-6


@dataclass
class FeatureMap:
    """Dense (H, W, C) float32 feature grid.

    stride is image-pixels per feature cell; lookups take image-pixel
    coordinates and convert.
    """

    values: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("feature values must be (H, W, C)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class FeatureConfig:
    stride: int = 1
    blur_sigma: float = 1.0
    blur_sigma_coarse: float = 3.0
    variance_window: int = 5


def extract_features(image, config: FeatureConfig | None = None) -> FeatureMap:
    """Hand-crafted 6-channel features standing in for a learned CNN.

    Channels: blurred intensity, |dI/dx|, |dI/dy|, gradient magnitude at
    a fine and a coarse smoothing scale, and local intensity variance.
    Every channel is min-max normalized to [0, 1] over the image.
    """
    cfg = config or FeatureConfig()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    if h < 16 or w < 16:
        raise ImageTooSmall(f"need at least 16x16, got {h}x{w}")

    fine = ndimage.gaussian_filter(img, cfg.blur_sigma, mode="nearest")
    coarse = ndimage.gaussian_filter(img, cfg.blur_sigma_coarse, mode="nearest")
    gx = ndimage.sobel(fine, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(fine, axis=0, mode="nearest") / 8.0
    gxc = ndimage.sobel(coarse, axis=1, mode="nearest") / 8.0
    gyc = ndimage.sobel(coarse, axis=0, mode="nearest") / 8.0
    win = cfg.variance_window
    mean = ndimage.uniform_filter(img, win, mode="nearest")
    var = ndimage.uniform_filter(img * img, win, mode="nearest") - mean * mean

    chans = [
        fine,
        np.abs(gx),
        np.abs(gy),
        np.hypot(gx, gy),
        np.hypot(gxc, gyc),
        np.maximum(var, 0.0),
    ]
    s = cfg.stride
    out = np.empty((len(range(0, h, s)), len(range(0, w, s)), len(chans)), np.float32)
    for i, ch in enumerate(chans):
        sub = ch[::s, ::s]
        lo, hi = sub.min(), sub.max()
        out[:, :, i] = 0.0 if hi - lo < 1e-12 else (sub - lo) / (hi - lo)
    return FeatureMap(out, stride=s)


def lookup(fmap: FeatureMap, coords):
    """Bilinear feature lookup at continuous image-pixel coords.

    Accepts one (2,) coordinate or an (N, 2) batch. Out-of-bounds
    coordinates yield a zero vector flagged invalid.
    """
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c) / float(fmap.stride)
    vals, valid = kernels.bilinear_gather(fmap.values, np.ascontiguousarray(c))
    if single:
        return vals[0], bool(valid[0])
    return vals, valid


@dataclass
class CorrelationMap:
    """Per patch-pixel s x s grid of feature dot products."""

    values: np.ndarray  # ((2r+1)^2, s, s)
    valid: np.ndarray   # same shape, False where the lookup left the frame

    @property
    def grid_side(self):
        return self.values.shape[-1]


def correlation_map(
    fmap_i: FeatureMap, patch, fmap_j: FeatureMap, reproj, s=7
) -> CorrelationMap:
    """Correlate a source patch against an s x s offset grid in frame j.

    Offsets are integer feature-grid steps centered at zero around each
    reprojected patch pixel; out-of-bounds cells are zero and masked.
    """
    if s % 2 == 0:
        raise ValueError("correlation grid side must be odd")
    src_px = patch.pixel_coords()
    src, src_ok = lookup(fmap_i, src_px)
    if not np.all(src_ok):
        raise ValueError("patch pixels must lie inside the source feature map")
    centers = np.asarray(reproj, dtype=np.float64) / float(fmap_j.stride)
    vals, valid = kernels.corr_volume(
        np.ascontiguousarray(src), fmap_j.values, np.ascontiguousarray(centers), s
    )
    return CorrelationMap(vals, valid)


@dataclass
class FlowUpdate:
    """Flow delta (pixels) plus per-axis positive confidence weights."""

    delta: np.ndarray
    confidence: np.ndarray


def _quadratic_peak_offset(fm1, f0, fp1):
    denom = fm1 - 2.0 * f0 + fp1
    if denom >= -1e-12:  # not a strict local max along this axis
        return 0.0
    off = 0.5 * (fm1 - fp1) / denom
    return float(np.clip(off, -0.5, 0.5))


def argmax_flow(corr: CorrelationMap, stride: int = 1) -> FlowUpdate:
    """Tracker flow: argmax of the pixel-summed map with sub-pixel fit.

    Confidence is the peak prominence (peak minus mean of its in-grid
    neighbors), floored at 1e-3 and identical on both axes. A constant
    summed map degenerates to zero delta at the floor confidence.
    """
    summed = np.where(corr.valid, corr.values, 0.0).sum(axis=0)
    s = summed.shape[0]
    half = s // 2
    if np.ptp(summed) < 1e-15:
        return FlowUpdate(np.zeros(2), np.full(2, CONFIDENCE_FLOOR))
    flat = int(np.argmax(summed))
    v, u = divmod(flat, s)

    du = dv = 0.0
    if 0 < u < s - 1:
        du = _quadratic_peak_offset(summed[v, u - 1], summed[v, u], summed[v, u + 1])
    if 0 < v < s - 1:
        dv = _quadratic_peak_offset(summed[v - 1, u], summed[v, u], summed[v + 1, u])

    neigh = summed[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2]
    prominence = summed[v, u] - (neigh.sum() - summed[v, u]) / (neigh.size - 1)
    conf = max(float(prominence), CONFIDENCE_FLOOR)
    delta = np.array([(u - half + du), (v - half + dv)]) * float(stride)
    return FlowUpdate(delta, np.full(2, conf))


# counter-based gaussian noise: a pure, platform-stable function of
# (seed, src, dst, patch) so repeated queries for one edge agree
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x):
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def edge_gauss_noise(seed, src_frame, dst_frame, patch_ids, sigma):
    """Deterministic N(0, sigma^2) pairs per (seed, src, dst, patch)."""
    pid = np.atleast_1d(np.asarray(patch_ids)).astype(np.uint64)
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        key = _splitmix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
        key = _splitmix64(key ^ np.uint64(int(src_frame)))
        key = _splitmix64(key ^ np.uint64(int(dst_frame)))
        key = _splitmix64(key ^ pid)
        z0 = _splitmix64(key)
        z1 = _splitmix64(key ^ _GOLDEN)
    u1 = ((z0 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = ((z1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    r = sigma * np.sqrt(-2.0 * np.log(u1))
    return np.stack((r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)), axis=1)


def oracle_flow(true_target, reproj_center, noise_sigma, noise=None, visible=True) -> FlowUpdate:
    """Oracle flow: drives the reprojection onto the ground-truth target.

    Confidence is 1/(sigma^2 + 1e-6) per axis; occluded or out-of-frame
    targets get the 1e-6 floor instead.
    """
    delta = np.asarray(true_target, dtype=np.float64) - np.asarray(
        reproj_center, dtype=np.float64
    )
    if noise_sigma > 0 and noise is not None:
        delta = delta + np.asarray(noise, dtype=np.float64)
    conf = OCCLUDED_CONFIDENCE if not visible else 1.0 / (noise_sigma**2 + 1e-6)
    return FlowUpdate(delta, np.full(2, conf))


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------

@dataclass
class EdgeContext:
    """Metadata handed to a flow provider along with the correlation map."""

    src_frame: int
    dst_frame: int
    patch_id: int
    src_center: np.ndarray
    reproj_center: np.ndarray
    frame_shape: tuple


class TrackerProvider:
    """Correlation-peak tracker; the non-learned stand-in for a flow net."""

    needs_correlation = True

    def __init__(self, stride=1):
        self.stride = stride

    def flow(self, corr: CorrelationMap, edge: EdgeContext) -> FlowUpdate:
        return argmax_flow(corr, stride=self.stride)


class OracleProvider:
    """Ground-truth flow provider for synthetic evaluation.

    ``geometry`` must expose target_in_frame(src, dst, xy) -> (xy, visible)
    and may expose a vectorized targets_in_frame(src, dst, xys).
    Noise is a pure function of (seed, src, dst, patch_id), so repeated
    queries for one edge are consistent.
    """

    needs_correlation = False

    def __init__(self, geometry, noise_sigma=0.0, rng_seed=0):
        self.geometry = geometry
        self.noise_sigma = float(noise_sigma)
        self.rng_seed = int(rng_seed)

    def flow(self, corr, edge: EdgeContext) -> FlowUpdate:
        target, visible = self.geometry.target_in_frame(
            edge.src_frame, edge.dst_frame, edge.src_center
        )
        noise = None
        if self.noise_sigma > 0:
            noise = edge_gauss_noise(
                self.rng_seed, edge.src_frame, edge.dst_frame,
                [edge.patch_id], self.noise_sigma,
            )[0]
        return oracle_flow(target, edge.reproj_center, self.noise_sigma, noise, visible)

    def flow_batch(self, src_frame, dst_frame, patch_ids, src_centers, reproj_centers):
        """Vectorized flow for all edges of one (src, dst) frame pair."""
        targets, visible = self.geometry.targets_in_frame(
            src_frame, dst_frame, np.asarray(src_centers, dtype=np.float64)
        )
        deltas = targets - np.asarray(reproj_centers, dtype=np.float64)
        if self.noise_sigma > 0:
            deltas = deltas + edge_gauss_noise(
                self.rng_seed, src_frame, dst_frame, patch_ids, self.noise_sigma
            )
        conf = np.where(
            visible[:, None], 1.0 / (self.noise_sigma**2 + 1e-6), OCCLUDED_CONFIDENCE
        )
        return deltas, np.broadcast_to(conf, deltas.shape).copy()
