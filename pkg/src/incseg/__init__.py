"""Desk-scale class-incremental semantic segmentation.

Trains a small encoder-decoder over a sequence of class-revealing steps,
combining pseudo-labels, prototype-based inter/intra-class contrast,
feature and logit distillation, and a flexible per-step learning-rate
schedule to keep old classes while learning new ones.
"""

from .data import (MemoryBank, SegDataset, SegSample, augment,
                   generate_synthetic_dataset, load_voc_style, sample_memory,
                   save_dataset)
from .errors import ConfigurationError, DataError, IncsegError, TrainingError
from .estimator import IncrementalSegmenter
from .evaluation import ConfusionMatrix, MetricsRecord, evaluate_model, grouped_miou
from .losses import (LossBreakdown, bce_seg, contrastive_pool_loss, feature_kd,
                     inter_class_loss, intra_class_loss, logit_kd,
                     masked_average_pool, mix_labels, predict_previous,
                     remodel_logits, total_objective)
from .model import SegmentationNet, load_checkpoint, save_checkpoint, snapshot
from .proposals import MaskProposalSet, ProposalCache, downsample_masks, generate_proposals
from .scenario import (IGNORE_ID, UNKNOWN_ID, IncrementalScenario, LabelSpace,
                       filter_images_for_step, parse_scenario, relabel_for_step,
                       relabel_keep, seen_classes, single_step_scenario)
from .trainer import (StepReport, TrainConfig, build_param_groups, lr_for_step,
                      run_scenario, train_step)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ConfusionMatrix", "DataError", "IGNORE_ID",
    "IncrementalScenario", "IncrementalSegmenter", "IncsegError", "LabelSpace",
    "LossBreakdown", "MaskProposalSet", "MemoryBank", "MetricsRecord",
    "ProposalCache", "SegDataset", "SegSample", "SegmentationNet", "StepReport",
    "TrainConfig", "TrainingError", "UNKNOWN_ID", "augment", "bce_seg",
    "build_param_groups", "contrastive_pool_loss", "downsample_masks",
    "evaluate_model", "feature_kd", "filter_images_for_step",
    "generate_proposals", "generate_synthetic_dataset", "grouped_miou",
    "inter_class_loss", "intra_class_loss", "load_checkpoint", "load_voc_style",
    "logit_kd", "lr_for_step", "masked_average_pool", "mix_labels",
    "parse_scenario", "predict_previous", "relabel_for_step", "relabel_keep",
    "remodel_logits", "run_scenario", "sample_memory", "save_checkpoint",
    "save_dataset", "seen_classes", "single_step_scenario", "snapshot",
    "total_objective", "train_step",
]
