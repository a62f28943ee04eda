"""Semantic segmentation of 2D radar point clouds with X-Convolutions."""

from .cloud import (
    EgoPose,
    Grouping,
    InputLayout,
    Label,
    PointCloud,
    RadarDetection,
    accumulate_frames,
    ball_group,
    farthest_point_sampling,
    knn_group,
    localize,
    normalize_size,
)
from .autodiff import MlpSpec, NumericalError, ParamStore, Tensor, adam_step, finite_diff_check
from .checkpoint import load_checkpoint, save_checkpoint
from .network import (
    NetworkSpec,
    XConvLayerSpec,
    build_plan,
    count_flops,
    count_params,
    decide,
    forward,
    init_network_params,
    permutation_sensitivity,
)
from .scenes import (
    BoundingBox,
    ObjectSpec,
    SceneSpec,
    SceneTemplate,
    WallSpec,
    build_scene,
    dataset_stats,
    generate_dataset,
    generate_scene,
    label_detections,
    read_dataset,
    sample_rcs,
    simulate_doppler,
    write_dataset,
)
from .metrics import ConfusionMatrix, Metrics, confusion, macro_average, precision_recall_f1
from .training import FocalLossParams, TrainConfig, evaluate, focal_loss, train
from .config import RunConfig, default_network_spec, default_run_config, vanilla_network_spec

__version__ = "0.1.0"

__all__ = [
    "EgoPose", "Grouping", "InputLayout", "Label", "PointCloud", "RadarDetection",
    "accumulate_frames", "ball_group", "farthest_point_sampling", "knn_group",
    "localize", "normalize_size",
    "MlpSpec", "NumericalError", "ParamStore", "Tensor", "adam_step", "finite_diff_check",
    "load_checkpoint", "save_checkpoint",
    "NetworkSpec", "XConvLayerSpec", "build_plan", "count_flops", "count_params",
    "decide", "forward", "init_network_params", "permutation_sensitivity",
    "BoundingBox", "ObjectSpec", "SceneSpec", "SceneTemplate", "WallSpec",
    "build_scene", "dataset_stats", "generate_dataset", "generate_scene",
    "label_detections", "read_dataset", "sample_rcs", "simulate_doppler", "write_dataset",
    "ConfusionMatrix", "Metrics", "confusion", "macro_average", "precision_recall_f1",
    "FocalLossParams", "TrainConfig", "evaluate", "focal_loss", "train",
    "RunConfig", "default_network_spec", "default_run_config", "vanilla_network_spec",
]
