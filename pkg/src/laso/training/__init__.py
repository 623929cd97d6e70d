from .augment import SpecAugmentConfig, spec_augment
from .losses import combined_loss, cross_entropy_from_logits, distill_mse, nll_loss, smoothing_floor
from .loop import FitResult, TrainConfig, TrainingError, fit, write_trace
from .optim import Adam, lr_schedule
from .teacher import TeacherCache, TeacherConfig, TeacherOutputs, ToyTeacher, masked_accuracy, pretrain_toy_teacher

__all__ = [
    "Adam",
    "FitResult",
    "SpecAugmentConfig",
    "TeacherCache",
    "TeacherConfig",
    "TeacherOutputs",
    "ToyTeacher",
    "TrainConfig",
    "TrainingError",
    "combined_loss",
    "cross_entropy_from_logits",
    "distill_mse",
    "fit",
    "lr_schedule",
    "masked_accuracy",
    "nll_loss",
    "pretrain_toy_teacher",
    "smoothing_floor",
    "spec_augment",
    "write_trace",
]
