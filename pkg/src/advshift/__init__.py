"""Adversarial training for domain adaptation of a small anchor-based detector.

Modules: ``detector`` (model, losses, gradients), ``perturb`` (FGSM, PGD,
max-task selection), ``featalign`` (discriminator, gradient reversal),
``datagen`` (synthetic two-domain scenes), ``trainer``, ``metrics`` (AP,
Frechet distance, shift report), ``experiments`` and ``cli``.
"""
from .datagen import DomainSpec, SceneSpec, build_dataset, generate_dataset, load_dataset
from .detector import BoxLabel, Detection, DetectorConfig, DetectorParams, init_params, predict
from .featalign import AlignmentConfig
from .metrics import Calibration, evaluate, frechet_distance, shift_analysis
from .perturb import PerturbationSpec
from .trainer import TrainConfig, run_replicates, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "BoxLabel",
    "Calibration",
    "Detection",
    "DetectorConfig",
    "DetectorParams",
    "DomainSpec",
    "PerturbationSpec",
    "SceneSpec",
    "TrainConfig",
    "build_dataset",
    "evaluate",
    "frechet_distance",
    "generate_dataset",
    "init_params",
    "load_dataset",
    "predict",
    "run_replicates",
    "shift_analysis",
    "train",
]
