"""Back-in-Time Diffusion: single-step diffusion residuals for medical tamper detection."""

from btd.calibration import Threshold, classify, fit_threshold
from btd.detector import (
    AnomalyScore,
    BTD,
    BackwardOnly,
    DetectorConfig,
    ForwardBackward,
    ROI,
    backward_only_score,
    btd_score,
    forward_backward_score,
    roi_mean_square,
    score_batch,
)
from btd.diffusion import (
    NoiseSchedule,
    forward_noise,
    generate,
    make_schedule,
    reverse_step,
    training_step,
)
from btd.metrics import EvalReport, bootstrap_eval, eer, roc_auc
from btd.model import ModelConfig, NoisePredictor, build_model, predict_noise

__version__ = "0.1.0"

__all__ = [
    "AnomalyScore",
    "BTD",
    "BackwardOnly",
    "DetectorConfig",
    "EvalReport",
    "ForwardBackward",
    "ModelConfig",
    "NoisePredictor",
    "NoiseSchedule",
    "ROI",
    "Threshold",
    "backward_only_score",
    "bootstrap_eval",
    "btd_score",
    "build_model",
    "classify",
    "eer",
    "fit_threshold",
    "forward_backward_score",
    "forward_noise",
    "generate",
    "make_schedule",
    "predict_noise",
    "reverse_step",
    "roc_auc",
    "roi_mean_square",
    "score_batch",
    "training_step",
]
