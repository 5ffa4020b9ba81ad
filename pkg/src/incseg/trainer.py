"""Incremental training loop: per-step LR schedule, parameter groups,
pseudo-labelled objective, memory replay, snapshots and checkpoints."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import AugmentGeometry, MemoryBank, SegDataset, SegSample, sample_memory
from .errors import ConfigurationError, TrainingError
from .evaluation import MetricsRecord, emit_curves, evaluate_model
from .losses import (LossBreakdown, bce_seg, feature_kd, inter_class_loss,
                     intra_class_loss, logit_kd, mix_labels, predict_previous,
                     remodel_logits, total_objective)
from .model import SegmentationNet, load_checkpoint, save_checkpoint, snapshot
from .proposals import ProposalCache
from .scenario import IncrementalScenario, filter_images_for_step, relabel_keep

FREEZE_MODES = ("flexible", "freeze", "finetune")


@dataclass
class TrainConfig:
    """Hyperparameters of one incremental run."""

    lr0: float = 1e-4
    lambda_lr: float = 1e-3
    lambda_c: float = 0.01
    lambda_r: float = 0.1
    tau: float = 0.7
    num_proposals: int = 100
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    memory_capacity: int = 0            # 0 disables rehearsal; -1 = 2x class count
    freeze_mode: str = "flexible"       # flexible | freeze | finetune
    pseudo_labels: bool = True
    feature_channels: int = 64
    weight_decay: float = 1e-4
    normalize_prototypes: bool = True
    augment: bool = True
    deterministic: bool = True
    init_new_from_unknown: bool = False

    def __post_init__(self):
        if self.freeze_mode not in FREEZE_MODES:
            raise ConfigurationError(f"freeze_mode must be one of {FREEZE_MODES}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("tau must lie in (0, 1)")
        for name in ("lr0", "lambda_lr", "lambda_c", "lambda_r", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.num_proposals < 2:
            raise ConfigurationError("batch_size/epochs/num_proposals out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class StepReport:
    """Produced exactly once per completed learning step."""

    step: int
    losses: dict[str, float]
    checkpoint_path: str
    wall_time: float
    num_images: int
    num_iterations: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StepReport":
        return cls(**d)


@dataclass
class RunResult:
    reports: list[StepReport]
    records: list[MetricsRecord]
    model: SegmentationNet
    workdir: str


def lr_for_step(t: int, lr0: float = 1e-4, lambda_lr: float = 1e-3) -> float:
    """Initial learning rate of step t: lr0 at the base step, then
    exponentially decayed (e^-t * lambda_lr * lr0) for every later step."""
    if t < 1:
        raise ConfigurationError(f"step must be >= 1, got {t}")
    if t == 1:
        return lr0
    return math.exp(-t) * lambda_lr * lr0


def build_param_groups(model: SegmentationNet, t: int, config: TrainConfig) -> list[dict]:
    """Optimizer groups: historical parameters (feature extractor + old
    class channels, unknown included) at the decayed step rate, the new
    class channels at the full base rate."""
    groups = model.parameter_groups()
    if t == 1 or config.freeze_mode == "finetune":
        params = groups["backbone"] + groups["old_heads"] + groups["new_head"]
        return [{"params": params, "lr": config.lr0, "name": "all"}]
    if config.freeze_mode == "freeze":
        old_lr = 0.0
    else:
        old_lr = lr_for_step(t, config.lr0, config.lambda_lr)
    return [
        {"params": groups["backbone"] + groups["old_heads"], "lr": old_lr,
         "name": "historical"},
        {"params": groups["new_head"], "lr": config.lr0, "name": "current"},
    ]


def _step_seed(seed: int, t: int, *extra: int) -> int:
    return int(np.random.SeedSequence((seed, t) + extra).generate_state(1)[0])


def _label_lut(model: SegmentationNet, ignore_id: int) -> torch.Tensor:
    """class id -> logit channel; the ignore value maps to itself."""
    if model.num_channels >= ignore_id:
        raise ConfigurationError("label space too large for the ignore sentinel")
    lut = torch.full((ignore_id + 1,), ignore_id, dtype=torch.long)
    lut[0] = 0
    for cid in model.class_ids:
        lut[cid] = model.channel_of(cid)
    return lut


def _batch_tensors(samples: list[SegSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])
                              ).permute(0, 3, 1, 2).float()
    masks = torch.from_numpy(np.stack([s.mask.astype(np.int64) for s in samples]))
    return images, masks


def _prepare_step_samples(train_set: SegDataset, scenario: IncrementalScenario,
                          t: int, memory: MemoryBank | None) -> list[SegSample]:
    """Current-step images relabelled to C^t plus rehearsal samples keeping
    every seen class annotation."""
    filtered = filter_images_for_step(train_set, scenario, t)
    current = [SegSample(image=s.image,
                         mask=relabel_keep(s.mask, scenario.classes_at(t),
                                           unknown_id=scenario.unknown_id,
                                           ignore_id=scenario.ignore_id),
                         id=s.id)
               for s in filtered]
    if memory is None:
        return current
    have = {s.id for s in current}
    replay = [s for s in memory.samples(train_set, keep_ids=scenario.seen_classes(t))
              if s.id not in have]
    return current + replay


def train_step(model: SegmentationNet, scenario: IncrementalScenario,
               train_set: SegDataset, config: TrainConfig, t: int,
               workdir: str, proposal_cache: ProposalCache | None = None,
               teacher: SegmentationNet | None = None,
               memory: MemoryBank | None = None,
               loss_log=None) -> StepReport:
    """Train one incremental step in place and write its checkpoint.

    The previous-step snapshot is taken before the classifier expands;
    pass ``teacher`` explicitly to reuse a snapshot taken outside.
    """
    started = time.time()
    if t > 1:
        if model.step != t - 1:
            raise TrainingError(
                f"cannot train step {t} on a model at step {model.step}; "
                f"restore the step-{t - 1} checkpoint first")
        if teacher is None:
            teacher = snapshot(model)
        model.expand_classifier(scenario.classes_at(t),
                                seed=_step_seed(config.seed, t, 1),
                                init_from_unknown=config.init_new_from_unknown)
    samples = _prepare_step_samples(train_set, scenario, t, memory)
    if not samples:
        raise TrainingError(f"step {t} received no training samples")
    needs_proposals = t > 1 and config.lambda_c > 0
    if needs_proposals and proposal_cache is None:
        proposal_cache = ProposalCache(os.path.join(workdir, "proposals"),
                                       n_max=config.num_proposals)
    optimizer = torch.optim.AdamW(build_param_groups(model, t, config),
                                  weight_decay=config.weight_decay)
    lut = _label_lut(model, scenario.ignore_id)
    current_channels = model.channels_of_step(model.step) if t > 1 else []

    model.train()
    iterations = 0
    epoch_sums: dict[str, float] = {}
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            _step_seed(config.seed, t, 2, epoch)).permutation(len(samples))
        epoch_sums = {}
        epoch_iters = 0
        for start in range(0, len(order), config.batch_size):
            chosen = [samples[i] for i in order[start:start + config.batch_size]]
            batch, prop_stacks = _materialize_batch(
                chosen, config, t, epoch, start, proposal_cache if needs_proposals else None)
            breakdown = _compute_losses(model, teacher, batch, prop_stacks,
                                        lut, current_channels, scenario, config, t)
            optimizer.zero_grad()
            total = breakdown.total
            if torch.is_tensor(total) and total.requires_grad:
                total.backward()
                optimizer.step()
            iterations += 1
            epoch_iters += 1
            floats = breakdown.to_floats()
            for k, v in floats.items():
                epoch_sums[k] = epoch_sums.get(k, 0.0) + v
            if loss_log is not None:
                loss_log.write(json.dumps({"step": t, "epoch": epoch,
                                           "iteration": iterations, **floats}) + "\n")
        if loss_log is not None:
            loss_log.flush()
    mean_losses = {k: v / max(epoch_iters, 1) for k, v in epoch_sums.items()}

    ckpt_path = os.path.join(workdir, "checkpoints", f"step_{t}.pt")
    report = StepReport(step=t, losses=mean_losses, checkpoint_path=ckpt_path,
                        wall_time=time.time() - started, num_images=len(samples),
                        num_iterations=iterations)
    save_checkpoint(model, ckpt_path, scenario=scenario,
                    extra={"report": report.to_dict(), "config": config.to_dict()})
    return report


def _materialize_batch(chosen: list[SegSample], config: TrainConfig, t: int,
                       epoch: int, start: int,
                       proposal_cache: ProposalCache | None):
    """Apply per-sample augmentation geometry to images, masks, and any
    cached proposal stacks so everything stays pixel-aligned."""
    out_samples = []
    prop_stacks = []
    for j, s in enumerate(chosen):
        props = proposal_cache.get_or_compute(s).masks if proposal_cache else None
        if config.augment:
            geom = AugmentGeometry.sample(
                s.mask.shape, _step_seed(config.seed, t, 3, epoch, start + j))
            s = SegSample(image=geom.apply_to_image(s.image),
                          mask=geom.apply_to_mask(s.mask), id=s.id)
            if props is not None:
                props = geom.apply_to_mask_stack(props)
        out_samples.append(s)
        prop_stacks.append(props)
    images, masks = _batch_tensors(out_samples)
    return (images, masks), prop_stacks


def _compute_losses(model, teacher, batch, prop_stacks, lut, current_channels,
                    scenario, config: TrainConfig, t: int) -> LossBreakdown:
    images, masks = batch
    out = model(images)
    if t == 1 or teacher is None:
        target = masks
        bce, _ = bce_seg(out.logits, lut[target], ignore_id=scenario.ignore_id)
        return total_objective(bce, lambda_c=config.lambda_c, lambda_r=config.lambda_r)

    with torch.no_grad():
        tout = teacher(images)
    if config.pseudo_labels:
        prev_pred, prev_conf = predict_previous(teacher, images)
        target = mix_labels(masks, prev_pred, prev_conf, tau=config.tau,
                            unknown_id=scenario.unknown_id,
                            ignore_id=scenario.ignore_id)
    else:
        target = masks
    bce, _ = bce_seg(out.logits, lut[target], ignore_id=scenario.ignore_id)

    inter = out.logits.new_zeros(())
    intra = out.logits.new_zeros(())
    if config.lambda_c > 0:
        inters, intras = [], []
        for b in range(images.shape[0]):
            li, _ = inter_class_loss(target[b], out.features[b], tout.features[b],
                                     unknown_id=scenario.unknown_id,
                                     ignore_id=scenario.ignore_id,
                                     normalize=config.normalize_prototypes)
            inters.append(li)
            if prop_stacks[b] is not None:
                masks_t = torch.from_numpy(np.ascontiguousarray(prop_stacks[b]))
                lj, _ = intra_class_loss(masks_t, out.features[b], tout.features[b],
                                         normalize=config.normalize_prototypes)
                intras.append(lj)
        inter = torch.stack(inters).mean() if inters else inter
        intra = torch.stack(intras).mean() if intras else intra

    kd_f = out.logits.new_zeros(())
    kd_z = out.logits.new_zeros(())
    if config.lambda_r > 0:
        kd_f = feature_kd(out.features, tout.features)
        remodeled = remodel_logits(out.logits_small, current_channels)
        kd_z = logit_kd(remodeled, tout.logits_small)
    return total_objective(bce, inter, intra, kd_f, kd_z,
                           lambda_c=config.lambda_c, lambda_r=config.lambda_r)


def _memory_pool(train_set: SegDataset, scenario: IncrementalScenario,
                 t: int) -> SegDataset:
    """Images the learner encountered in steps before t, deduplicated."""
    seen_ids: dict[str, SegSample] = {}
    for past in range(1, t):
        for s in filter_images_for_step(train_set, scenario, past):
            seen_ids.setdefault(s.id, s)
    return train_set.subset(list(seen_ids.values()))


def run_scenario(scenario: IncrementalScenario, train_set: SegDataset,
                 config: TrainConfig, workdir: str,
                 val_set: SegDataset | None = None,
                 resume: bool = False) -> RunResult:
    """Train every step in order, evaluating on all seen classes after each.

    With ``resume`` enabled, steps whose checkpoints already exist are
    loaded instead of retrained; per-step seeding makes the continuation
    identical to an uninterrupted run.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)
    if val_set is None:
        val_set = train_set
    os.makedirs(os.path.join(workdir, "checkpoints"), exist_ok=True)
    metrics_dir = os.path.join(workdir, "metrics")
    os.makedirs(metrics_dir, exist_ok=True)
    scenario.save(os.path.join(workdir, "scenario.json"))
    with open(os.path.join(workdir, "train_config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2)

    proposal_cache = None
    if config.lambda_c > 0 and scenario.num_steps > 1:
        proposal_cache = ProposalCache(os.path.join(workdir, "proposals"),
                                       n_max=config.num_proposals)
        proposal_cache.precompute(train_set)

    model = SegmentationNet(scenario.classes_at(1),
                            feature_channels=config.feature_channels,
                            seed=config.seed)
    reports: list[StepReport] = []
    records: list[MetricsRecord] = []
    log_path = os.path.join(metrics_dir, "loss_log.jsonl")
    for t in range(1, scenario.num_steps + 1):
        ckpt_path = os.path.join(workdir, "checkpoints", f"step_{t}.pt")
        record_path = os.path.join(metrics_dir, f"step_{t}.json")
        if resume and os.path.exists(ckpt_path):
            model, meta = load_checkpoint(ckpt_path)
            reports.append(StepReport.from_dict(meta["extra"]["report"]))
            if os.path.exists(record_path):
                with open(record_path) as f:
                    records.append(MetricsRecord.from_dict(json.load(f)))
            else:
                record = evaluate_model(model, val_set, scenario, t,
                                        batch_size=config.batch_size)
                record.save(record_path)
                records.append(record)
            continue
        memory = None
        capacity = config.memory_capacity
        if capacity < 0:
            capacity = 2 * scenario.total_classes
        if capacity > 0 and t > 1:
            pool = _memory_pool(train_set, scenario, t)
            memory = sample_memory(pool, scenario.seen_classes(t - 1), capacity,
                                   seed=_step_seed(config.seed, t, 4))
            mem_dir = os.path.join(workdir, "memory")
            os.makedirs(mem_dir, exist_ok=True)
            with open(os.path.join(mem_dir, f"step_{t}.json"), "w") as f:
                json.dump(memory.to_manifest(), f, indent=2)
        with open(log_path, "a") as loss_log:
            report = train_step(model, scenario, train_set, config, t, workdir,
                                proposal_cache=proposal_cache, memory=memory,
                                loss_log=loss_log)
        reports.append(report)
        record = evaluate_model(model, val_set, scenario, t,
                                batch_size=config.batch_size)
        record.save(record_path)
        records.append(record)
    emit_curves(records, os.path.join(metrics_dir, "curves.csv"),
                os.path.join(metrics_dir, "curves.png"))
    return RunResult(reports=reports, records=records, model=model, workdir=workdir)
