from .checkpoint import StudentModel, TeacherModel, load_checkpoint, save_checkpoint
from .config import OneStepVCConfig, get_config
from .data import generate_synthetic_corpus, load_corpus, split_unseen, wav_to_logmel
from .diffusion import NoiseSchedule, forward_diffuse, reverse_step
from .distillation import Distiller, train_student, train_teacher
from .evaluation import evaluate_conversions, run_ablation
from .inference import (
    ConversionRequest,
    VoiceConverter,
    compare_models_rtf,
    convert_one_step,
    measure_rtf,
)

__version__ = "1.0.0"
__all__ = [
    "OneStepVCConfig",
    "get_config",
    "NoiseSchedule",
    "forward_diffuse",
    "reverse_step",
    "generate_synthetic_corpus",
    "load_corpus",
    "split_unseen",
    "wav_to_logmel",
    "TeacherModel",
    "StudentModel",
    "save_checkpoint",
    "load_checkpoint",
    "Distiller",
    "train_teacher",
    "train_student",
    "VoiceConverter",
    "ConversionRequest",
    "convert_one_step",
    "measure_rtf",
    "compare_models_rtf",
    "evaluate_conversions",
    "run_ablation",
]
