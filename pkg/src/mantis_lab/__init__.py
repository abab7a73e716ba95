"""Desk-scale laboratory for adapter-tuned selective state-space models
on 3D point clouds: serialization, tokenization, controlled scans,
consistency training, and the transfer-kernel audit suite."""

from .adapter import AdapterConfig, count_parameters, soft_threshold
from .analysis import (DeviationReport, TransferMatrix, build_transfer_matrix,
                       deviation_bound_check, kernel_perturbation)
from .autodiff import Tensor, no_grad
from .config import ExperimentConfig, load_config
from .data import DatasetSpec, generate_dataset
from .geometry import (KeyPoints, PatchSet, PointCloud, farthest_point_sample,
                       knn_patches, load_pointcloud, normalize,
                       save_pointcloud)
from .model import Model, ModelConfig
from .runner import run_experiment
from .serialization import (CurveKind, SerializedPatchSet, hilbert_code_3d,
                            hilbert_decode_3d, serialize_keypoints,
                            zorder_code_3d)
from .ssm import OperatorBundle, selective_scan, zoh_discretize

__all__ = [
    "AdapterConfig", "count_parameters", "soft_threshold",
    "DeviationReport", "TransferMatrix", "build_transfer_matrix",
    "deviation_bound_check", "kernel_perturbation",
    "Tensor", "no_grad",
    "ExperimentConfig", "load_config",
    "DatasetSpec", "generate_dataset",
    "KeyPoints", "PatchSet", "PointCloud", "farthest_point_sample",
    "knn_patches", "load_pointcloud", "normalize", "save_pointcloud",
    "Model", "ModelConfig", "run_experiment",
    "CurveKind", "SerializedPatchSet", "hilbert_code_3d", "hilbert_decode_3d",
    "serialize_keypoints", "zorder_code_3d",
    "OperatorBundle", "selective_scan", "zoh_discretize",
]
