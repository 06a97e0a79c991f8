"""Self-supervision sequence generation via random homographies.

A base image is augmented (illumination, saturation/hue, motion blur,
superpixel-shaped occlusion) and warped by homographies whose magnitude
grows linearly with the frame index. Ground-truth correspondences come
from the exact homographies, with a visibility mask covering both
out-of-frame points and the occluded region. Everything is a pure
function of (image, config, seed).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DegenerateHomography, ImageTooSmall


@dataclass
class HomographySchedule:
    """Magnitude schedule; sigmas are the magnitudes at t = N (growth t/N)."""

    sigma_scale: float = 0.15
    sigma_rotation: float = 0.2  # radians
    sigma_translation: float | None = None  # px; default 0.1 * min(H, W)
    sigma_perspective: float | None = None  # px; default 0.05 * min(H, W)

    def resolved(self, shape):
        m = float(min(shape[:2]))
        st = 0.1 * m if self.sigma_translation is None else self.sigma_translation
        sp = 0.05 * m if self.sigma_perspective is None else self.sigma_perspective
        return self.sigma_scale, self.sigma_rotation, st, sp


@dataclass
class AugmentationConfig:
    illumination_gain: float = 0.25      # gain in [1 - g, 1 + g]
    illumination_bias: float = 20.0      # bias in [-b, b] intensity levels
    saturation: float = 0.3              # RGB only
    hue: float = 0.1                     # radians around the gray axis
    blur_max_length: int = 5             # px; <= 1 disables
    occlusion: bool = True
    occlusion_min_frac: float = 0.005
    occlusion_max_frac: float = 0.2


@dataclass
class SlicConfig:
    n_segments: int = 64
    compactness: float = 10.0
    iterations: int = 5


@dataclass
class GeneratorConfig:
    schedule: HomographySchedule = field(default_factory=HomographySchedule)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    slic: SlicConfig = field(default_factory=SlicConfig)


@dataclass
class HomographySequence:
    base_image: np.ndarray
    frames: list            # warped uint8 frames, same dims as the base
    homographies: list      # 3x3, normalized so H[2,2] = 1
    occlusion_regions: list  # bool masks in base-image coordinates
    warped_masks: list      # bool occlusion masks in frame coordinates
    augment_descriptors: list


def corners_of(shape):
    h, w = shape[:2]
    return np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]]
    )


def homography_from_corners(src, dst):
    """Direct 4-point DLT solve, normalized so H[2,2] = 1."""
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(A, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def apply_homography(H, pts):
    p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    hom = np.concatenate((p, np.ones((p.shape[0], 1))), axis=1) @ H.T
    return hom[:, :2] / hom[:, 2:3]


def _is_convex(quad):
    crosses = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        crosses.append(a[0] * b[1] - a[1] * b[0])
    crosses = np.array(crosses)
    return np.all(crosses > 0) or np.all(crosses < 0)


def sample_homography(t, n_frames, shape, schedule: HomographySchedule, rng_seed):
    """Random homography for frame t with magnitude growing as t/N.

    Composes scale and rotation about the image center, translation, and
    per-corner perspective jitter. Non-convex corner draws are resampled
    up to 10 times before raising DegenerateHomography.
    """
    if t < 1:
        raise ValueError("frame index must be >= 1")
    g = t / float(n_frames)
    ss, sr, st, sp = schedule.resolved(shape)
    h, w = shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    src = corners_of(shape)
    rng = np.random.default_rng([int(rng_seed), int(t), 1])

    for _ in range(10):
        scale = 1.0 + rng.uniform(-ss, ss) * g
        theta = rng.uniform(-sr, sr) * g
        tx, ty = rng.uniform(-st, st, size=2) * g
        jitter = rng.uniform(-sp, sp, size=(4, 2)) * g

        c, s = np.cos(theta), np.sin(theta)
        A = scale * np.array([[c, -s], [s, c]])
        dst = (src - [cx, cy]) @ A.T + [cx, cy] + [tx, ty] + jitter
        if _is_convex(dst):
            return homography_from_corners(src, dst)
    raise DegenerateHomography(f"no convex corner draw for frame {t} after 10 tries")


def warp_image(image, H, shape=None):
    """Warp so output(p) = input(H^-1 p), bilinear with zero padding."""
    img = np.asarray(image, dtype=np.float64)
    out_shape = shape or img.shape[:2]
    hh, ww = out_shape
    ys, xs = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
    pts = np.stack((xs.ravel(), ys.ravel()), axis=1).astype(np.float64)
    src = apply_homography(np.linalg.inv(H), pts)
    if img.ndim == 2:
        vals, _ = kernels.bilinear_gather(
            np.ascontiguousarray(img[:, :, None], dtype=np.float32), src
        )
        return vals[:, 0].reshape(hh, ww)
    vals, _ = kernels.bilinear_gather(
        np.ascontiguousarray(img, dtype=np.float32), src
    )
    return vals.reshape(hh, ww, img.shape[2])


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------

def _motion_blur_kernel(length, angle):
    size = int(np.ceil(length)) | 1
    k = np.zeros((size, size))
    c = size // 2
    n = max(int(np.ceil(length * 4)), 2)
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, n)
    xs = c + ts * np.cos(angle)
    ys = c + ts * np.sin(angle)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        np.add.at(k, (np.clip(y0 + dy, 0, size - 1), np.clip(x0 + dx, 0, size - 1)), wgt)
    return k / k.sum()


def _hue_rotation_matrix(angle):
    """Rotation of RGB vectors about the gray axis (1,1,1)/sqrt(3)."""
    axis = np.ones(3) / np.sqrt(3.0)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def superpixel_occlusion(image, rng_seed, config: SlicConfig | None = None):
    """Occlusion region: a connected union of 1-3 adjacent superpixels.

    Superpixels come from a simplified SLIC (grid-seeded k-means over
    (x, y, intensity) with a spatial weight, fixed iteration count).
    Returns a bool mask.
    """
    cfg = config or SlicConfig()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    if h < 32 or w < 32:
        raise ImageTooSmall("superpixel occlusion needs at least 32x32")

    labels = slic_segments(img, cfg)
    comp_labels, n_comp = _connected_components(labels)
    seed_spec = list(rng_seed) if isinstance(rng_seed, (list, tuple)) else [int(rng_seed)]
    rng = np.random.default_rng(seed_spec + [7])
    adjacency = _component_adjacency(comp_labels, n_comp)

    start = int(rng.integers(0, n_comp))
    n_take = int(rng.integers(1, 4))
    region = {start}
    for _ in range(n_take - 1):
        frontier = sorted(set().union(*(adjacency[c] for c in region)) - region)
        if not frontier:
            break
        region.add(int(rng.choice(frontier)))
    mask = np.isin(comp_labels, sorted(region))
    return mask


def slic_segments(intensity, cfg: SlicConfig):
    """Simplified SLIC labels over a grayscale image."""
    h, w = intensity.shape
    step = max(int(np.sqrt(h * w / cfg.n_segments)), 4)
    cy, cx = np.meshgrid(
        np.arange(step // 2, h, step, dtype=np.float64),
        np.arange(step // 2, w, step, dtype=np.float64),
        indexing="ij",
    )
    cx = cx.ravel().copy()
    cy = cy.ravel().copy()
    img = np.ascontiguousarray(intensity, dtype=np.float64)
    cmean = img[cy.astype(int), cx.astype(int)].copy()
    # distance = dI^2 + (m/step)^2 * dspatial^2, the classic SLIC weighting
    spatial_weight = (cfg.compactness / step) ** 2

    labels = None
    for _ in range(cfg.iterations):
        labels = kernels.slic_assign(img, cx, cy, cmean, spatial_weight, 2 * step)
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=cx.shape[0]).astype(np.float64)
        counts[counts == 0] = 1.0
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = np.bincount(flat, weights=xs.ravel(), minlength=cx.shape[0]) / counts
        cy = np.bincount(flat, weights=ys.ravel(), minlength=cx.shape[0]) / counts
        cmean = np.bincount(flat, weights=img.ravel(), minlength=cx.shape[0]) / counts
    return labels


def _connected_components(labels):
    """Split superpixel labels into 4-connected components, 0-based ids."""
    out = np.full(labels.shape, -1, dtype=np.int64)
    next_id = 0
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab)
        for i in range(1, n + 1):
            out[comp == i] = next_id
            next_id += 1
    return out, next_id


def _component_adjacency(comp, n_comp):
    adj = {i: set() for i in range(n_comp)}
    a, b = comp[:, :-1], comp[:, 1:]
    for x, y in zip(a[a != b].ravel(), b[a != b].ravel()):
        adj[int(x)].add(int(y))
        adj[int(y)].add(int(x))
    a, b = comp[:-1, :], comp[1:, :]
    for x, y in zip(a[a != b].ravel(), b[a != b].ravel()):
        adj[int(x)].add(int(y))
        adj[int(y)].add(int(x))
    return adj


def apply_augmentations(image, t, config: AugmentationConfig | None = None, rng_seed=0):
    """Photometric augmentation plus occlusion painting.

    Applies, in order: illumination gain/bias, saturation and hue shift
    (RGB input only), linear motion blur, and uniform-noise fill of the
    occlusion region. With all strengths zero and occlusion disabled the
    output equals the input bit-exactly. Returns (image, occlusion mask).
    """
    cfg = config or AugmentationConfig()
    rng = np.random.default_rng([int(rng_seed), int(t), 2])
    img = np.asarray(image)
    is_rgb = img.ndim == 3
    out = img.astype(np.float64)
    desc = {}

    gain = 1.0 + rng.uniform(-cfg.illumination_gain, cfg.illumination_gain)
    bias = rng.uniform(-cfg.illumination_bias, cfg.illumination_bias)
    desc["gain"], desc["bias"] = gain, bias
    if gain != 1.0 or bias != 0.0:
        out = out * gain + bias

    if is_rgb and (cfg.saturation > 0 or cfg.hue > 0):
        sat = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
        hue = rng.uniform(-cfg.hue, cfg.hue)
        desc["saturation"], desc["hue"] = sat, hue
        gray = out.mean(axis=2, keepdims=True)
        out = gray + sat * (out - gray)
        out = out @ _hue_rotation_matrix(hue).T

    if cfg.blur_max_length > 1:
        length = rng.uniform(1.0, cfg.blur_max_length)
        angle = rng.uniform(0.0, np.pi)
        desc["blur_length"], desc["blur_angle"] = length, angle
        k = _motion_blur_kernel(length, angle)
        if is_rgb:
            for c in range(out.shape[2]):
                out[:, :, c] = ndimage.convolve(out[:, :, c], k, mode="nearest")
        else:
            out = ndimage.convolve(out, k, mode="nearest")

    mask = np.zeros(img.shape[:2], dtype=bool)
    if cfg.occlusion:
        mask = _bounded_occlusion(img, rng_seed, t, cfg)
        noise = rng.uniform(0.0, 255.0, size=(int(mask.sum()),))
        if is_rgb:
            out[mask] = rng.uniform(0.0, 255.0, size=(int(mask.sum()), 3))
        else:
            out[mask] = noise

    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out, mask, desc


def _bounded_occlusion(image, rng_seed, t, cfg: AugmentationConfig):
    """Resample the occlusion pick until its area fraction is in bounds."""
    total = image.shape[0] * image.shape[1]
    best, best_gap = None, np.inf
    for attempt in range(20):
        mask = superpixel_occlusion(image, [int(rng_seed), int(t), 3, attempt])
        frac = mask.sum() / total
        if cfg.occlusion_min_frac <= frac <= cfg.occlusion_max_frac:
            return mask
        gap = min(abs(frac - cfg.occlusion_min_frac), abs(frac - cfg.occlusion_max_frac))
        if gap < best_gap:
            best, best_gap = mask, gap
    return best


def generate_sequence(image0, n, config: GeneratorConfig | None = None, rng_seed=0):
    """Generate N augmented, homography-warped frames from one image."""
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    cfg = config or GeneratorConfig()
    base = np.asarray(image0)
    frames, homs, regions, warped_masks, descs = [], [], [], [], []
    for t in range(1, n + 1):
        aug, region, desc = apply_augmentations(base, t, cfg.augment, rng_seed)
        H = sample_homography(t, n, base.shape, cfg.schedule, rng_seed)
        warped = warp_image(aug, H)
        warped = np.clip(np.round(warped), 0, 255).astype(np.uint8)
        wmask = warp_image(region.astype(np.float64) * 255.0, H) > 127.0
        frames.append(warped)
        homs.append(H)
        regions.append(region)
        warped_masks.append(wmask)
        descs.append(desc)
    return HomographySequence(base, frames, homs, regions, warped_masks, descs)


def gt_correspondence(seq: HomographySequence, points0):
    """Exact correspondences p^t = H^t p^0 with visibility flags.

    A point is invisible in frame t when its warp leaves the image or
    its source location lies in that frame's occlusion region.
    """
    p0 = np.atleast_2d(np.asarray(points0, dtype=np.float64))
    h, w = seq.base_image.shape[:2]
    n = len(seq.frames)
    pts = np.empty((n, p0.shape[0], 2))
    vis = np.empty((n, p0.shape[0]), dtype=bool)
    src_r = np.clip(np.round(p0[:, 1]).astype(int), 0, h - 1)
    src_c = np.clip(np.round(p0[:, 0]).astype(int), 0, w - 1)
    for t in range(n):
        pt = apply_homography(seq.homographies[t], p0)
        pts[t] = pt
        inside = (
            (pt[:, 0] >= 0.0) & (pt[:, 0] <= w - 1.0)
            & (pt[:, 1] >= 0.0) & (pt[:, 1] <= h - 1.0)
        )
        occluded = seq.occlusion_regions[t][src_r, src_c]
        vis[t] = inside & ~occluded
    return pts, vis
