"""Per-class IoU, grouped mIoU reporting, and step-curve emission."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .scenario import IncrementalScenario, relabel_keep


class ConfusionMatrix:
    """Row = ground truth, column = prediction, over unknown + known classes.

    Ignored pixels are never counted. Matrices are mergeable by addition,
    so evaluation shards can run in parallel and sum deterministically.
    """

    def __init__(self, class_ids: tuple[int, ...], unknown_id: int = 0,
                 ignore_id: int = 255):
        self.class_ids = tuple(class_ids)
        self.unknown_id = unknown_id
        self.ignore_id = ignore_id
        self.index = {unknown_id: 0}
        for i, c in enumerate(self.class_ids):
            self.index[c] = i + 1
        n = len(self.index)
        self.counts = np.zeros((n, n), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def accumulate(self, ground_truth: np.ndarray, prediction: np.ndarray) -> "ConfusionMatrix":
        if ground_truth.shape != prediction.shape:
            raise DataError("ground truth and prediction extents differ")
        gt = np.asarray(ground_truth).ravel()
        pr = np.asarray(prediction).ravel()
        keep = gt != self.ignore_id
        gt, pr = gt[keep], pr[keep]
        lut = np.full(max(self.ignore_id, max(self.index) if self.index else 0) + 1,
                      -1, dtype=np.int64)
        for cid, idx in self.index.items():
            lut[cid] = idx
        gi, pi = lut[gt], lut[pr]
        if (gi < 0).any():
            bad = sorted(set(int(v) for v in gt[gi < 0]))
            raise DataError(f"ground truth labels {bad} outside the evaluated label space")
        if (pi < 0).any():
            bad = sorted(set(int(v) for v in pr[pi < 0]))
            raise DataError(f"predicted labels {bad} outside the evaluated label space")
        n = self.num_classes
        binc = np.bincount(gi * n + pi, minlength=n * n)
        self.counts += binc.reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.index != self.index:
            raise DataError("cannot merge confusion matrices over different label spaces")
        self.counts += other.counts
        return self

    def iou(self, class_id: int) -> float:
        """Intersection over union; NaN when the class is absent everywhere."""
        i = self.index[class_id]
        inter = self.counts[i, i]
        union = self.counts[i, :].sum() + self.counts[:, i].sum() - inter
        if union == 0:
            return float("nan")
        return float(inter) / float(union)

    def per_class_iou(self) -> dict[int, float]:
        ids = [self.unknown_id] + list(self.class_ids)
        return {c: self.iou(c) for c in ids}


def _mean_defined(values: list[float]) -> float:
    defined = [v for v in values if not math.isnan(v)]
    return sum(defined) / len(defined) if defined else float("nan")


@dataclass
class MetricsRecord:
    """Grouped mIoU columns of one step: base classes, novel classes, all."""

    step: int
    per_class_iou: dict[int, float]
    miou_base: float
    miou_novel: float
    miou_all: float
    include_unknown: bool = True

    def to_dict(self) -> dict:
        # undefined group means serialize as null so the JSON stays strict
        def scrub(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "step": self.step,
            "per_class_iou": {str(k): scrub(v) for k, v in self.per_class_iou.items()},
            "miou_base": scrub(self.miou_base),
            "miou_novel": scrub(self.miou_novel),
            "miou_all": scrub(self.miou_all),
            "include_unknown": self.include_unknown,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        def restore(v):
            return float("nan") if v is None else v

        return cls(step=d["step"],
                   per_class_iou={int(k): restore(v)
                                  for k, v in d["per_class_iou"].items()},
                   miou_base=restore(d["miou_base"]),
                   miou_novel=restore(d["miou_novel"]),
                   miou_all=restore(d["miou_all"]),
                   include_unknown=d.get("include_unknown", True))

    def save(self, path: str) -> None:
        payload = {"convention": "unknown label scored as the background class; "
                                 "undefined IoUs excluded from group means",
                   **self.to_dict()}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)


def grouped_miou(cm: ConfusionMatrix, scenario: IncrementalScenario, t: int,
                 include_unknown: bool = True) -> MetricsRecord:
    """Base / novel / all group means. The unknown label plays the VOC
    background role: folded into the base and all means when enabled.
    Classes absent from both prediction and truth are excluded."""
    per_class = cm.per_class_iou()
    base_ids = list(scenario.classes_at(1))
    novel_ids = [c for c in scenario.seen_classes(t) if c not in base_ids]
    base_vals = [per_class[c] for c in base_ids]
    all_vals = [per_class[c] for c in scenario.seen_classes(t)]
    if include_unknown:
        base_vals = [per_class[cm.unknown_id]] + base_vals
        all_vals = [per_class[cm.unknown_id]] + all_vals
    return MetricsRecord(
        step=t,
        per_class_iou=per_class,
        miou_base=_mean_defined(base_vals),
        miou_novel=_mean_defined([per_class[c] for c in novel_ids]),
        miou_all=_mean_defined(all_vals),
        include_unknown=include_unknown,
    )


def evaluate_model(model, dataset, scenario: IncrementalScenario, t: int,
                   batch_size: int = 8, include_unknown: bool = True) -> MetricsRecord:
    """Run the model over a dataset and report grouped mIoU for step t.

    Ground truth is restricted to the classes seen so far; later classes
    count as unknown, which is all the model could ever call them.
    """
    seen = scenario.seen_classes(t)
    cm = ConfusionMatrix(seen, unknown_id=scenario.unknown_id,
                         ignore_id=scenario.ignore_id)
    model.eval()
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        images = torch.from_numpy(
            np.stack([s.image for s in chunk])).permute(0, 3, 1, 2).float()
        preds = model.predict(images).numpy()
        for s, pred in zip(chunk, preds):
            gt = relabel_keep(s.mask, seen, unknown_id=scenario.unknown_id,
                              ignore_id=scenario.ignore_id)
            cm.accumulate(gt, pred)
    return grouped_miou(cm, scenario, t, include_unknown=include_unknown)


def emit_curves(records: list[MetricsRecord], csv_path: str,
                plot_path: str | None = None) -> None:
    """Write the (step, all-seen mIoU) curve as CSV and optionally a line plot."""
    if not records:
        raise DataError("no metric records to emit")
    os.makedirs(os.path.dirname(csv_path) or ".", exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "miou_all", "miou_base", "miou_novel"])
        for r in records:
            writer.writerow([r.step, repr(r.miou_all), repr(r.miou_base),
                             repr(r.miou_novel)])
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        steps = [r.step for r in records]
        ax.plot(steps, [r.miou_all for r in records], marker="o", label="all")
        ax.plot(steps, [r.miou_base for r in records], marker="s", label="base")
        ax.set_xlabel("learning step")
        ax.set_ylabel("mIoU")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        fig.savefig(plot_path, dpi=110)
        plt.close(fig)


def read_curves(csv_path: str) -> list[dict[str, float]]:
    with open(csv_path, newline="") as f:
        return [{k: float(v) for k, v in row.items()}
                for row in csv.DictReader(f)]
