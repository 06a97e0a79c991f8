"""Sparse patch-based visual odometry backend.

Salient patch selection over hand-crafted feature maps, homographic
self-supervision data generation, correlation-based patch tracking with
pluggable flow providers, weighted bundle adjustment over SE(3) poses
and inverse depths, and trajectory evaluation tooling.
"""

from .backend import BACKEND, USE_NUMBA
from .bundle_adjust import BAProblem, BASolution, schur_solve, weighted_ba
from .correlation import (
    CorrelationMap,
    FeatureConfig,
    FeatureMap,
    FlowUpdate,
    OracleProvider,
    TrackerProvider,
    argmax_flow,
    correlation_map,
    extract_features,
    lookup,
)
from .eval_io import (
    Sim3Alignment,
    Trajectory,
    ate_rmse,
    read_fmap,
    read_pgm,
    read_trajectory,
    umeyama_align,
    write_fmap,
    write_pgm,
    write_trajectory,
)
from .geometry import (
    Intrinsics,
    Patch,
    Pose,
    relative_pose,
    reproject_patch,
    reprojection_jacobian,
    se3_exp,
    se3_log,
)
from .homography import (
    AugmentationConfig,
    GeneratorConfig,
    HomographySchedule,
    HomographySequence,
    SlicConfig,
    generate_sequence,
    gt_correspondence,
    sample_homography,
    superpixel_occlusion,
)
from .losses import (
    LossBreakdown,
    combined_pretrain_loss,
    feature_loss,
    feature_match_prob,
    flow_nll_loss,
    pose_loss,
)
from .pipeline import OdometryState, PipelineConfig, run_sequence
from .saliency import (
    PatchSet,
    build_patch_set,
    salient_score_map,
    select_salient_patches,
)

__version__ = "0.1.0"
