"""Blind super-resolution with a distilled implicit degradation estimator."""

from .degradation import (
    AnisotropicSpec,
    DegradationSpec,
    IsotropicSpec,
    degrade,
    gaussian8_kernels,
    make_anisotropic_kernel,
    make_isotropic_kernel,
    sample_degradation,
)
from .diffops import ParamSet, Tensor, adam_step
from .estimators import KDSRStudent, KDSRTeacher
from .evalharness import eval_aniso_grid, eval_gaussian8, idr_separability
from .imaging import psnr_y, read_image, rgb_to_y, ssim_y, write_image
from .kd_ide import IDEConfig, ide_forward, init_student_from_teacher, make_teacher_input
from .sr_net import SRConfig, idr_ddc, sr_forward
from .training import (
    Checkpoint,
    Restorer,
    TrainConfig,
    checkpoint_io,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "AnisotropicSpec",
    "Checkpoint",
    "DegradationSpec",
    "IDEConfig",
    "IsotropicSpec",
    "KDSRStudent",
    "KDSRTeacher",
    "ParamSet",
    "Restorer",
    "SRConfig",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "checkpoint_io",
    "degrade",
    "eval_aniso_grid",
    "eval_gaussian8",
    "gaussian8_kernels",
    "ide_forward",
    "idr_ddc",
    "idr_separability",
    "init_student_from_teacher",
    "make_anisotropic_kernel",
    "make_isotropic_kernel",
    "make_teacher_input",
    "psnr_y",
    "read_image",
    "rgb_to_y",
    "sample_degradation",
    "sr_forward",
    "ssim_y",
    "train_student",
    "train_teacher",
    "write_image",
]
