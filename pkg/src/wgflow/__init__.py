"""Score-based sampling read as Wasserstein gradient flow, on analytic targets."""
__version__ = "0.1.0"

from .measures import (GaussianMixture, SampleBatch, gmm_diffuse, gmm_log_density, gmm_sample, gmm_score,
                       gmm_validate, preset)
from .schedule import DEFAULT_SCHEDULE, NoiseSchedule
from .samplers import (AnalyticScore, DivergenceError, LearnedScore, SamplerConfig, run_sampler)
from .nn import MlpModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_projection, train_score_dsm, wgrad_estimate
from .metrics import MetricReport, sliced_w2, w2_exact

__all__ = [
    "GaussianMixture", "SampleBatch", "gmm_diffuse", "gmm_log_density", "gmm_sample", "gmm_score",
    "gmm_validate", "preset", "DEFAULT_SCHEDULE", "NoiseSchedule", "AnalyticScore", "DivergenceError",
    "LearnedScore", "SamplerConfig", "run_sampler", "MlpModel", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train_projection", "train_score_dsm", "wgrad_estimate", "MetricReport", "sliced_w2",
    "w2_exact",
]
