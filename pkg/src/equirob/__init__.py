"""Test-time adversarial defense by restoring feature-map equivariance,
with the matching attack suite, anomaly detector, and evaluation harness."""

from .autodiff import Tensor, backward, forward_op
from .data import DatasetSpec, accuracy, miou, synth_dataset
from .defense import DefenseConfig, defend, predict_with_defense, sweep_epsilon_v
from .detector import Calibration, auroc, calibrate, detect_then_defend, \
    detection_score, error_estimate
from .attacks import AttackConfig, attack, bpda_attack, targeted_attack
from .models import ModelDescriptor, TrainConfig, build_model, split_forward, \
    task_loss, train
from .objectives import ConstraintSample, adaptive_objective, equivariance_loss, \
    invariance_loss, measure_equivariance
from .transforms import TransformSpec, apply, apply_inverse_to_features, \
    default_transform_set

__all__ = [
    "Tensor", "backward", "forward_op",
    "DatasetSpec", "synth_dataset", "miou", "accuracy",
    "DefenseConfig", "defend", "predict_with_defense", "sweep_epsilon_v",
    "Calibration", "auroc", "calibrate", "detect_then_defend",
    "detection_score", "error_estimate",
    "AttackConfig", "attack", "bpda_attack", "targeted_attack",
    "ModelDescriptor", "TrainConfig", "build_model", "split_forward",
    "task_loss", "train",
    "ConstraintSample", "adaptive_objective", "equivariance_loss",
    "invariance_loss", "measure_equivariance",
    "TransformSpec", "apply", "apply_inverse_to_features",
    "default_transform_set",
]

__version__ = "0.1.0"
