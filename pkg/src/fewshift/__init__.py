"""Desk-scale contrastive fine-tuning toolkit: dual-encoder training with a
symmetric temperature-scaled contrastive loss, zero-shot cosine
classification, linear probes vs end-to-end fine-tuning, stochastic weight
averaging, and data-parallel training over a ring collective, evaluated on
synthetic distribution-shifted data."""

from .data import DatasetConfig, Sample, SplitBundle, generate_dataset, subsample_fraction
from .losses import ContrastiveLossValue, EmbeddingBatch, cross_entropy_loss, infonce_loss
from .metrics import macro_f1, random_baseline, robustness_gap, top1_accuracy, zero_shot_classify
from .models import DualEncoder, EncoderSpec, VisionClassifier
from .numerics import GradCheckReport, ParamVector, cosine_similarity, finite_difference_check, softmax
from .optim import CosineAnnealSchedule, OptimizerConfig, SwaState, WarmupScalingPolicy, cosine_anneal_lr, warmup_lr
from .dist import TimingRecord, WorkerGroup, ring_all_reduce, scale_efficiency, shard_batch
from .experiment import ExperimentConfig, run_sweep, run_zero_shot, select_best_lr

__all__ = [
    "ContrastiveLossValue",
    "CosineAnnealSchedule",
    "DatasetConfig",
    "DualEncoder",
    "EmbeddingBatch",
    "EncoderSpec",
    "ExperimentConfig",
    "GradCheckReport",
    "OptimizerConfig",
    "ParamVector",
    "Sample",
    "SplitBundle",
    "SwaState",
    "TimingRecord",
    "VisionClassifier",
    "WarmupScalingPolicy",
    "WorkerGroup",
    "cosine_anneal_lr",
    "cosine_similarity",
    "cross_entropy_loss",
    "finite_difference_check",
    "generate_dataset",
    "infonce_loss",
    "macro_f1",
    "random_baseline",
    "ring_all_reduce",
    "robustness_gap",
    "run_sweep",
    "run_zero_shot",
    "scale_efficiency",
    "select_best_lr",
    "shard_batch",
    "softmax",
    "subsample_fraction",
    "top1_accuracy",
    "warmup_lr",
    "zero_shot_classify",
]
