"""Diffusion-based search over matching matrices for point cloud registration.

The package is organized around one loop: a forward process that corrupts a
ground-truth matching matrix toward noise, a denoiser that maps any iterate
back to a matching-matrix estimate (attention over rotary-encoded coordinates,
with a differentiable doubly-stochastic projection inside), and a reverse
sampler that walks a subsequence of timesteps to produce correspondences and
a rigid fit. Supporting modules cover the projection itself, weighted rigid
alignment, synthetic scene-pair generation, and the evaluation metrics.
"""

__version__ = "0.1.0"

from .config import (
    DataConfig,
    RunConfig,
    ScheduleConfig,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
)
from .data import ScenePair, gen_deformable_pair, gen_rigid_pair, load_dataset, save_dataset
from .denoiser import DenoiserConfig, g_theta
from .dsm import is_doubly_stochastic, round_to_permutation, sinkhorn_project, top_k_matches
from .encoder import EncoderConfig, encode_cloud, voxel_subsample
from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometryError,
    DimensionError,
    MatchDiffError,
    NumericError,
)
from .geometry import PointCloud, RigidTransform, rigid_warp, soft_procrustes, transform_error
from .metrics import EvalReport, aggregate_report, evaluate_pair
from .pipeline import SampleConfig, TrainConfig, init_params, reverse_sample, train
from .schedule import (
    DiffusionSchedule,
    TauSubsequence,
    ddim_step,
    forward_diffuse,
    linear_beta_schedule,
    make_tau,
)

__all__ = [
    "__version__",
    "ConfigError",
    "DataConfig",
    "DataError",
    "DegenerateGeometryError",
    "DenoiserConfig",
    "DiffusionSchedule",
    "DimensionError",
    "EncoderConfig",
    "EvalReport",
    "MatchDiffError",
    "NumericError",
    "PointCloud",
    "RigidTransform",
    "RunConfig",
    "SampleConfig",
    "ScenePair",
    "ScheduleConfig",
    "TauSubsequence",
    "TrainConfig",
    "aggregate_report",
    "ddim_step",
    "encode_cloud",
    "evaluate_pair",
    "forward_diffuse",
    "g_theta",
    "gen_deformable_pair",
    "gen_rigid_pair",
    "init_params",
    "is_doubly_stochastic",
    "linear_beta_schedule",
    "load_dataset",
    "load_run_config",
    "make_tau",
    "reverse_sample",
    "rigid_warp",
    "round_to_permutation",
    "run_config_from_dict",
    "run_config_to_dict",
    "save_dataset",
    "sinkhorn_project",
    "soft_procrustes",
    "top_k_matches",
    "train",
    "transform_error",
    "voxel_subsample",
]
