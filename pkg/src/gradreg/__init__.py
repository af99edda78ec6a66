"""Deformable 3D registration with a gradient-correlation similarity term,
FAdam optimization and standard evaluation metrics."""

from gradreg.fadam import FAdamConfig, FAdamState, fadam_step, lr_schedule
from gradreg.metrics import MetricsReport, dice, evaluate, gc_score, hd95, ndv, tre
from gradreg.registration import RegistrationConfig, RegistrationResult, check_convergence, register
from gradreg.similarity import (
    LossBreakdown,
    LossConfig,
    gc,
    loss_diffusion,
    loss_gc,
    loss_lncc,
    ncc_global,
    total_loss,
    total_loss_grad,
)
from gradreg.volume import (
    DisplacementField,
    LabelMap,
    LandmarkSet,
    Volume3,
    downsample2x,
    spatial_gradient,
    trilinear_sample,
    upsample_field2x,
    warp_image,
    warp_labels,
)

__version__ = "0.1.0"

__all__ = [
    "FAdamConfig",
    "FAdamState",
    "fadam_step",
    "lr_schedule",
    "MetricsReport",
    "dice",
    "evaluate",
    "gc_score",
    "hd95",
    "ndv",
    "tre",
    "RegistrationConfig",
    "RegistrationResult",
    "check_convergence",
    "register",
    "LossBreakdown",
    "LossConfig",
    "gc",
    "loss_diffusion",
    "loss_gc",
    "loss_lncc",
    "ncc_global",
    "total_loss",
    "total_loss_grad",
    "DisplacementField",
    "LabelMap",
    "LandmarkSet",
    "Volume3",
    "downsample2x",
    "spatial_gradient",
    "trilinear_sample",
    "upsample_field2x",
    "warp_image",
    "warp_labels",
]
