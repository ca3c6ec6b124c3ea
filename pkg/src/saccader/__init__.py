"""Saccadic fine-grained classifier: peripheral encoding, priority maps, NMS fixation sampling, fusion."""
from .backbone import BackboneConfig, ReferenceBackbone, StageFeatures, reference_backbone
from .fusion import ImpactHead, LossConfig, conf_nll, fixation_weights, fuse, global_impact, nll, total_loss
from .kernels import BACKEND
from .model import ModelConfig, SaccadicModel, build_model
from .mpsa import DegenerateMapWarning, Mpsa, MpsaConfig, PsaStage
from .saccade import (
    FixationSet,
    PriorityMap,
    SamplerParams,
    extract_patch,
    extract_patches,
    refine_priority,
    sample_fixations,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BackboneConfig",
    "DegenerateMapWarning",
    "FixationSet",
    "ImpactHead",
    "LossConfig",
    "ModelConfig",
    "Mpsa",
    "MpsaConfig",
    "PriorityMap",
    "PsaStage",
    "ReferenceBackbone",
    "SaccadicModel",
    "SamplerParams",
    "StageFeatures",
    "build_model",
    "conf_nll",
    "extract_patch",
    "extract_patches",
    "fixation_weights",
    "fuse",
    "global_impact",
    "nll",
    "reference_backbone",
    "refine_priority",
    "sample_fixations",
    "total_loss",
]
