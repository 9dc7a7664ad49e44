"""Factored multi-view metric 3D scene toolkit.

A scene is represented as per-view unit ray maps, depths along the ray and
camera poses in the frame of view 0, plus one global metric scale factor.
The package provides the composition algebra, the input factorizations, the
full training-loss suite, covisibility-based view sampling, benchmark metrics,
an exact synthetic raycast oracle, a forward-only toy reference network and
bit-exact on-disk formats with a CLI (``mapt``).
"""

from .errors import MaptError
from .factorization import (
    DepthFactors,
    NormScale,
    PoseScaleFactors,
    decode_log_scale,
    encode_log_scale,
    f_log,
    f_log_jacobian,
    factor_depth,
    factor_pose_scale,
    metric_norm_scale,
    norm_scale,
)
from .geometry import (
    DepthAlongRay,
    FactoredScene,
    FactoredView,
    Intrinsics,
    MetricScale,
    PointMap,
    Pose,
    RayMap,
    compose_scene_points,
    intrinsics_from_rays,
    local_pointmap,
    metric_upgrade,
    pose_compose,
    pose_inverse,
    quat_to_rot,
    ray_angular_error,
    rays_from_intrinsics,
    relative_pose,
    rot_to_quat,
    world_pointmap,
)
from .losses import (
    DEFAULT_KERNEL,
    LossReport,
    RobustKernelParams,
    loss_depth,
    loss_gradient_matching,
    loss_local_pointmap,
    loss_mask,
    loss_normal,
    loss_pointmap_conf,
    loss_rays,
    loss_rot,
    loss_scale,
    loss_scale_grad_m,
    loss_translation,
    robust_kernel,
    robust_kernel_grad,
    total_loss,
)
from .metrics import (
    MetricReport,
    SimilarityTransform,
    abs_rel,
    ate_rmse,
    auc_at_threshold,
    evaluate_scene,
    inlier_ratio_tau,
    median_align,
    pose_angular_errors,
    scale_rel,
    umeyama,
)
from .network import (
    ModelConfig,
    ModelOutput,
    TokenSet,
    Weights,
    alternating_attention,
    decode_heads,
    encode_inputs,
    forward,
    init_weights,
)
from .synth import AnalyticScene, SceneSample, ViewSample, gen_scene, raycast, render_view, shade_view
from .viewgraph import (
    CovisGraph,
    InputConfig,
    build_adjacency,
    covisibility,
    random_walk_sample,
    sample_input_config,
    sparsify_depth,
)

__version__ = "0.1.0"
