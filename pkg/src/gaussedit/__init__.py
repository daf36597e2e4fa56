"""Scene editing for 3D Gaussian splats: region re-initialization, score-guided
optimization against a pluggable diffusion backend, and image-space texture
refinement, plus rendering and evaluation utilities."""

from .cameras import Camera, OrbitSpec, look_at, orbit_camera
from .edit import EditConfig, PromptPair, TimestepSchedule, run_edit, sds_step
from .errors import (
    ContractViolationError,
    FormatError,
    GaussEditError,
    GradientPropagationError,
    InvalidParameterError,
    NumericalDegeneracyError,
    NumericalError,
    PreconditionError,
    ProtocolError,
    ServiceError,
    ValidationError,
)
from .guidance import (
    AlternationSchedule,
    GuidanceProvider,
    GuidanceRequest,
    GuidanceResponse,
    MockGuidance,
    Prompt,
    RemoteGuidance,
    select_backend,
    substitute,
)
from .metrics import clip_directional, dino_similarity, evaluate_scene
from .ply import load_ply, save_ply
from .refine import RefineConfig, dssim, rec_loss, run_refinement
from .render import Image, render, render_backward
from .roi import (
    Aabb,
    InitPolicy,
    farthest_point_sample,
    initialize_editable,
    partition,
    reinitialize_region,
)
from .scene import (
    SH_C0,
    Gaussian,
    GaussianScene,
    color_from_sh0,
    covariance_from,
    eval_gaussian,
    rotation_matrix_from_quaternion,
)

__version__ = "0.1.0"

__all__ = [
    "SH_C0",
    "Aabb",
    "AlternationSchedule",
    "Camera",
    "EditConfig",
    "Gaussian",
    "GaussianScene",
    "GuidanceProvider",
    "GuidanceRequest",
    "GuidanceResponse",
    "Image",
    "InitPolicy",
    "MockGuidance",
    "OrbitSpec",
    "Prompt",
    "PromptPair",
    "RefineConfig",
    "RemoteGuidance",
    "TimestepSchedule",
    "clip_directional",
    "color_from_sh0",
    "covariance_from",
    "dino_similarity",
    "dssim",
    "eval_gaussian",
    "evaluate_scene",
    "farthest_point_sample",
    "initialize_editable",
    "load_ply",
    "look_at",
    "orbit_camera",
    "partition",
    "rec_loss",
    "reinitialize_region",
    "render",
    "render_backward",
    "rotation_matrix_from_quaternion",
    "run_edit",
    "run_refinement",
    "save_ply",
    "sds_step",
    "select_backend",
    "substitute",
    "GaussEditError",
    "ValidationError",
    "InvalidParameterError",
    "FormatError",
    "PreconditionError",
    "ContractViolationError",
    "NumericalError",
    "NumericalDegeneracyError",
    "GradientPropagationError",
    "ServiceError",
    "ProtocolError",
    "__version__",
]
