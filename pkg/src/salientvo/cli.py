"""Command-line front door.

Subcommands: run-vo, gen-homography, select-patches, eval-ate,
selfcheck. Exit codes: 0 success, 1 validation error (bad usage, bad
config, missing input), 2 runtime error. Config files are JSON with
full-schema validation (unknown keys rejected); the resolved config is
echoed to ``resolved_config.json`` beside the outputs so runs can be
reproduced byte-for-byte.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import backend
from .correlation import FeatureConfig, extract_features
from .errors import ConfigError, SvoError
from .eval_io import (
    Trajectory,
    ate_rmse,
    associate,
    read_fmap,
    read_pgm,
    read_trajectory,
    write_pgm,
    write_trajectory,
)
from .geometry import Intrinsics
from .homography import (
    AugmentationConfig,
    GeneratorConfig,
    HomographySchedule,
    SlicConfig,
    generate_sequence,
    gt_correspondence,
)
from .losses import pose_loss
from .pipeline import PipelineConfig, make_provider, run_sequence
from .saliency import build_patch_set, salient_score_map, select_salient_patches
from .synthetic import DepthMapGeometry


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schemas
# ---------------------------------------------------------------------------

_PIPELINE_SCHEMA = {
    "patches_per_frame": int,
    "random_patches": int,
    "patch_radius": int,
    "nms_radius": int,
    "selection_grid": int,
    "removal_window": int,
    "iterations": int,
    "neighborhood": int,
    "gn_iterations": int,
    "corr_grid": int,
    "damping": float,
    "feature_stride": int,
    "provider": str,
    "oracle_noise": float,
    "seed": int,
    "full_patch_residuals": bool,
}

_SCHEDULE_SCHEMA = {
    "sigma_scale": float,
    "sigma_rotation": float,
    "sigma_translation": (float, type(None)),
    "sigma_perspective": (float, type(None)),
}

_AUGMENT_SCHEMA = {
    "illumination_gain": float,
    "illumination_bias": float,
    "saturation": float,
    "hue": float,
    "blur_max_length": int,
    "occlusion": bool,
    "occlusion_min_frac": float,
    "occlusion_max_frac": float,
}

_SLIC_SCHEMA = {"n_segments": int, "compactness": float, "iterations": int}

_GEN_SCHEMA = {
    "n_frames": int,
    "n_points": int,
    "seed": int,
    "schedule": _SCHEDULE_SCHEMA,
    "augment": _AUGMENT_SCHEMA,
    "slic": _SLIC_SCHEMA,
}


def _check_schema(data, schema, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    for key, val in data.items():
        if key not in schema:
            raise ConfigError(f"{path}: unknown key {key!r}")
        want = schema[key]
        if isinstance(want, dict):
            _check_schema(val, want, f"{path}.{key}")
        else:
            kinds = want if isinstance(want, tuple) else (want,)
            if float in kinds and isinstance(val, int) and not isinstance(val, bool):
                continue
            if not isinstance(val, kinds) or isinstance(val, bool) != (bool in kinds):
                names = "/".join(k.__name__ for k in kinds)
                raise ConfigError(f"{path}.{key}: expected {names}")


def _load_config(path, schema):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    _check_schema(data, schema)
    return data


def _dump_resolved(config_obj, out_path):
    def to_plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: to_plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        return obj

    with open(out_path, "w") as fh:
        json.dump(to_plain(config_obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_run_vo(args):
    overrides = _load_config(args.config, _PIPELINE_SCHEMA) if args.config else {}
    config = PipelineConfig(**overrides)
    config.validate()

    images_dir = Path(args.images)
    manifest_path = images_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"missing directory manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    frames = [read_pgm(images_dir / f) for f in manifest["frames"]]
    intr = manifest.get("intrinsics")
    if intr is None:
        raise ConfigError("manifest must provide intrinsics")
    K = Intrinsics(intr["fx"], intr["fy"], intr["cx"], intr["cy"])

    provider = None
    if config.provider == "oracle":
        if "depth_maps" not in manifest or "gt_trajectory" not in manifest:
            raise ConfigError("oracle provider needs depth_maps and gt_trajectory")
        depth_maps = [read_fmap(images_dir / d)[:, :, 0] for d in manifest["depth_maps"]]
        gt = read_trajectory(images_dir / manifest["gt_trajectory"])
        geometry = DepthMapGeometry(depth_maps, gt.poses, K, frames[0].shape[:2])
        provider = make_provider(config, geometry)
    else:
        provider = make_provider(config)

    traj = run_sequence(frames, config, K, provider)
    out = Path(args.out)
    write_trajectory(out, traj)
    _dump_resolved(config, out.parent / "resolved_config.json")
    return 0


def _cmd_gen_homography(args):
    raw = _load_config(args.config, _GEN_SCHEMA) if args.config else {}
    n_frames = raw.get("n_frames", 6)
    n_points = raw.get("n_points", 64)
    seed = raw.get("seed", 0)
    config = GeneratorConfig(
        schedule=HomographySchedule(**raw.get("schedule", {})),
        augment=AugmentationConfig(**raw.get("augment", {})),
        slic=SlicConfig(**raw.get("slic", {})),
    )
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ConfigError(f"image not found: {image_path}")
    image = read_pgm(image_path)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seq = generate_sequence(image, n_frames, config, seed)

    h, w = image.shape[:2]
    rng = np.random.default_rng([seed, 99])
    points = np.stack(
        (rng.integers(1, w - 1, n_points), rng.integers(1, h - 1, n_points)), axis=1
    ).astype(np.float64)
    pts, vis = gt_correspondence(seq, points)

    frame_files, mask_files = [], []
    for t, frame in enumerate(seq.frames, start=1):
        name = f"frame_{t:03d}.pgm" if frame.ndim == 2 else f"frame_{t:03d}.ppm"
        write_pgm(out_dir / name, frame)
        frame_files.append(name)
        mname = f"mask_{t:03d}.pgm"
        write_pgm(out_dir / mname, (seq.warped_masks[t - 1] * 255).astype(np.uint8))
        mask_files.append(mname)

    with open(out_dir / "homographies.csv", "w") as fh:
        for H in seq.homographies:
            fh.write(",".join(f"{v:.12g}" for v in H.ravel()) + "\n")
    with open(out_dir / "correspondences.csv", "w") as fh:
        fh.write("t,point_id,x,y,visible\n")
        for t in range(n_frames):
            for l in range(n_points):
                fh.write(
                    f"{t + 1},{l},{pts[t, l, 0]:.9f},{pts[t, l, 1]:.9f},"
                    f"{int(vis[t, l])}\n"
                )
    manifest = {
        "base_image": image_path.name,
        "frames": frame_files,
        "masks": mask_files,
        "homographies": "homographies.csv",
        "correspondences": "correspondences.csv",
        "n_frames": n_frames,
        "n_points": n_points,
        "seed": seed,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _dump_resolved(config, out_dir / "resolved_config.json")
    return 0


def _cmd_select_patches(args):
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ConfigError(f"image not found: {image_path}")
    image = read_pgm(image_path)
    fmap = extract_features(image, FeatureConfig(stride=1))
    scores = salient_score_map(fmap.values)
    centers, cscores, _ = select_salient_patches(
        scores, args.k, grid=args.grid, nms_radius=args.nms_radius, r=args.radius
    )
    pset = build_patch_set(
        centers, min(args.k, centers.shape[0]), args.random,
        args.seed, image.shape[:2], radius=args.radius,
    )
    with open(args.out, "w") as fh:
        fh.write("x,y,score,label\n")
        for patch, label in zip(pset.patches, pset.labels):
            x, y = int(patch.center[0]), int(patch.center[1])
            fh.write(f"{x},{y},{scores[y, x]:.9f},{label}\n")
    return 0


def _cmd_eval_ate(args):
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    value = ate_rmse(est, gt, align=args.align)
    print(f"ATE_RMSE_m {value:.9f}")
    matches = associate(est, gt)
    if len(matches) >= 2:
        loss = pose_loss(
            [gt.poses[j] for _, j in matches], [est.poses[i] for i, _ in matches],
            [(n, n + 1) for n in range(len(matches) - 1)],
        )
        print(f"POSE_LOSS {loss:.9f}")
    return 0


def _cmd_selfcheck(args):
    from .selfcheck import run_selfcheck

    with tempfile.TemporaryDirectory() as tmp:
        results = run_selfcheck(tmp)
    failed = 0
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        failed += not ok
    print(f"selfcheck: {len(results) - failed}/{len(results)} passed")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="svo", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("run-vo", help="run odometry over an image directory")
    p.add_argument("--config", default=None)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-homography", help="generate a training sequence")
    p.add_argument("--config", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("select-patches", help="emit salient patch centers as CSV")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=96)
    p.add_argument("--random", type=int, default=0)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--nms-radius", type=int, default=4)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval-ate", help="trajectory error against ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--align", choices=("sim3", "se3", "none"), default="sim3")

    sub.add_parser("selfcheck", help="run the embedded invariant suite")
    return parser


_HANDLERS = {
    "run-vo": _cmd_run_vo,
    "gen-homography": _cmd_gen_homography,
    "select-patches": _cmd_select_patches,
    "eval-ate": _cmd_eval_ate,
    "selfcheck": _cmd_selfcheck,
}


def dispatch(argv):
    backend.apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SvoError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
