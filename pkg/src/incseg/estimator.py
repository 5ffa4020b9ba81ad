"""Scikit-learn style facade over the incremental training pipeline.

Wraps scenario parsing, per-step training and evaluation behind
fit/predict/score with get_params/set_params, so the segmenter drops
into generic model-selection tooling. Images are (n, H, W, 3) float
arrays in [0, 1]; masks are (n, H, W) integer grids with 0 as the
background/unknown label and 255 ignored.
"""

from __future__ import annotations

import tempfile

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .errors import ConfigurationError
from .evaluation import ConfusionMatrix, grouped_miou
from .scenario import IGNORE_ID, parse_scenario, relabel_keep, shuffled_order
from .trainer import TrainConfig, run_scenario
from .validation import arrays_to_dataset, check_image_batch, check_mask_batch


class IncrementalSegmenter(BaseEstimator):
    """Class-incremental semantic segmenter.

    ``fit`` replays the full incremental protocol on the given data:
    classes are revealed step by step following the scenario spec, the
    model trains on each step's subset with pseudo-labels, prototype
    contrast and distillation, and the fitted model predicts all classes.

    Parameters mirror :class:`incseg.trainer.TrainConfig`; see there for
    the semantics of each hyperparameter.
    """

    def __init__(self, scenario="2-2", n_classes=None, mode="overlapped",
                 lr0=1e-4, lambda_lr=1e-3, lambda_c=0.01, lambda_r=0.1,
                 tau=0.7, num_proposals=100, batch_size=8, epochs=30,
                 memory_capacity=0, freeze_mode="flexible", pseudo_labels=True,
                 feature_channels=64, augment=True, order_seed=None, seed=0,
                 work_dir=None):
        self.scenario = scenario
        self.n_classes = n_classes
        self.mode = mode
        self.lr0 = lr0
        self.lambda_lr = lambda_lr
        self.lambda_c = lambda_c
        self.lambda_r = lambda_r
        self.tau = tau
        self.num_proposals = num_proposals
        self.batch_size = batch_size
        self.epochs = epochs
        self.memory_capacity = memory_capacity
        self.freeze_mode = freeze_mode
        self.pseudo_labels = pseudo_labels
        self.feature_channels = feature_channels
        self.augment = augment
        self.order_seed = order_seed
        self.seed = seed
        self.work_dir = work_dir

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, lambda_lr=self.lambda_lr, lambda_c=self.lambda_c,
            lambda_r=self.lambda_r, tau=self.tau, num_proposals=self.num_proposals,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            memory_capacity=self.memory_capacity, freeze_mode=self.freeze_mode,
            pseudo_labels=self.pseudo_labels, feature_channels=self.feature_channels,
            augment=self.augment)

    def fit(self, X, y):
        """Run the incremental protocol over (images, full masks)."""
        X = check_image_batch(X)
        y = check_mask_batch(y, X)
        foreground = y[(y > 0) & (y != IGNORE_ID)]
        n_classes = self.n_classes or (int(foreground.max()) if foreground.size else 0)
        if n_classes < 2:
            raise ConfigurationError("need at least 2 foreground classes to fit")
        order = shuffled_order(n_classes, self.order_seed) \
            if self.order_seed is not None else None
        scenario = parse_scenario(self.scenario, n_classes, class_order=order,
                                  mode=self.mode)
        dataset = arrays_to_dataset(X, y, n_classes)
        workdir = self.work_dir or tempfile.mkdtemp(prefix="incseg_fit_")
        result = run_scenario(scenario, dataset, self._train_config(), workdir)
        self.model_ = result.model
        self.scenario_ = scenario
        self.reports_ = result.reports
        self.records_ = result.records
        self.classes_ = np.array([0] + list(scenario.seen_classes(scenario.num_steps)))
        self.workdir_ = workdir
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigurationError("this segmenter has not been fitted yet")

    def predict(self, X) -> np.ndarray:
        """Per-pixel label grids, (n, H, W) over {0} + learned class ids."""
        self._require_fitted()
        X = check_image_batch(X)
        preds = []
        for start in range(0, len(X), self.batch_size):
            batch = torch.from_numpy(X[start:start + self.batch_size]
                                     ).permute(0, 3, 1, 2).float()
            preds.append(self.model_.predict(batch).numpy())
        return np.concatenate(preds, axis=0)

    def score(self, X, y) -> float:
        """All-class mIoU (background included) against full masks."""
        self._require_fitted()
        X = check_image_batch(X)
        y = check_mask_batch(y, X)
        t = self.scenario_.num_steps
        seen = self.scenario_.seen_classes(t)
        cm = ConfusionMatrix(seen)
        preds = self.predict(X)
        for gt, pred in zip(y, preds):
            cm.accumulate(relabel_keep(gt.astype(np.uint8), seen), pred)
        return grouped_miou(cm, self.scenario_, t).miou_all
