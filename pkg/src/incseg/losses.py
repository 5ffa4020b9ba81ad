"""Training signals: pseudo-labels, prototype contrast, distillation, BCE.

Every loss here is a pure map from tensors to a scalar tensor, so they
compose freely and can be checked against brute-force oracles and finite
differences. Gradients flow into whatever requires them; only the
teacher inference helper runs under no_grad, and callers pass
teacher-derived tensors pre-detached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingError

DEFAULT_TAU = 0.7
DEFAULT_LAMBDA_C = 0.01
DEFAULT_LAMBDA_R = 0.1


@dataclass
class LossBreakdown:
    """All objective components of one optimisation step.

    Fields may be 0-dim tensors (during training) or floats (after
    logging); the algebraic identities hold either way:
    contrast = inter + intra, regularization = kd_feature + kd_logit,
    total = bce + lambda_c * contrast + lambda_r * regularization.
    """

    bce: torch.Tensor | float
    inter_class: torch.Tensor | float
    intra_class: torch.Tensor | float
    contrast: torch.Tensor | float
    kd_feature: torch.Tensor | float
    kd_logit: torch.Tensor | float
    regularization: torch.Tensor | float
    total: torch.Tensor | float
    lambda_c: float
    lambda_r: float

    def to_floats(self) -> dict[str, float]:
        out = {}
        for name in ("bce", "inter_class", "intra_class", "contrast",
                     "kd_feature", "kd_logit", "regularization", "total"):
            v = getattr(self, name)
            out[name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        out["lambda_c"] = self.lambda_c
        out["lambda_r"] = self.lambda_r
        return out


def area_downsample(grid: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Box-average a (..., H, W) tensor to (..., h, w); linear, partition-preserving."""
    H, W = grid.shape[-2:]
    h, w = target
    if h > H or w > W:
        raise ValueError(f"target {target} larger than source {(H, W)}")
    lead = grid.shape[:-2]
    flat = grid.reshape(-1, 1, H, W).to(grid.dtype if grid.is_floating_point()
                                        else torch.float32)
    out = F.adaptive_avg_pool2d(flat, (h, w))
    return out.reshape(*lead, h, w)


def predict_previous(teacher, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Previous-step prediction and confidence for pseudo-labelling.

    Prediction is the argmax over raw logits mapped back to label values
    (ties break to the lowest channel); confidence is the per-pixel max
    of sigmoid-transformed logits.
    """
    if teacher is None:
        raise ConfigurationError("no previous model exists at the first step")
    with torch.no_grad():
        logits = teacher(images).logits
        channels = logits.argmax(dim=1)
        conf = torch.sigmoid(logits).amax(dim=1)
    lut = torch.tensor([0] + list(teacher.class_ids), dtype=torch.long,
                       device=channels.device)
    return lut[channels], conf


def mix_labels(labels: torch.Tensor, prev_pred: torch.Tensor, prev_conf: torch.Tensor,
               tau: float = DEFAULT_TAU, unknown_id: int = 0,
               ignore_id: int = 255) -> torch.Tensor:
    """Paste confident previous-step predictions into unknown regions.

    Ground-truth foreground always wins; unknown pixels adopt the old
    prediction only where confidence reaches tau; ignore passes through.
    """
    if labels.shape != prev_pred.shape or labels.shape != prev_conf.shape:
        raise ValueError("label, prediction and confidence grids must share extent")
    out = labels.clone()
    fill = (labels == unknown_id) & (prev_conf >= tau)
    out[fill] = prev_pred[fill]
    return out


def masked_average_pool(features: torch.Tensor, masks: torch.Tensor
                        ) -> tuple[torch.Tensor, list[int]]:
    """Prototype per mask: mask-weighted mean of the feature map.

    features: (C, h, w); masks: (K, h, w) with values in [0, 1].
    Returns (K', C) prototypes for masks with positive mass plus the
    list of surviving mask indices.
    """
    if features.shape[-2:] != masks.shape[-2:]:
        raise ValueError("features and masks must share the spatial grid")
    masks = masks.to(features.dtype)
    mass = masks.sum(dim=(-2, -1))
    kept = [i for i in range(masks.shape[0]) if float(mass[i]) > 0.0]
    if not kept:
        return features.new_zeros((0, features.shape[0])), []
    flat_f = features.reshape(features.shape[0], -1)           # (C, hw)
    flat_m = masks[kept].reshape(len(kept), -1)                # (K', hw)
    protos = (flat_m @ flat_f.T) / mass[kept].unsqueeze(1)
    return protos, kept


def contrastive_pool_loss(anchors: torch.Tensor, positives: torch.Tensor,
                          normalize: bool = True) -> torch.Tensor:
    """InfoNCE-style contrast over the joint prototype pool.

    Row i of ``anchors`` pairs with row i of ``positives``. The pool
    stacks anchors first, then positives; the denominator excludes only
    the anchor's own self-similarity, so the positive term stays in it.
    L2-normalisation is on by default to keep exp() bounded; disable it
    to take raw inner products.
    """
    if anchors.shape != positives.shape:
        raise ValueError("anchor and positive prototype sets must align")
    k = anchors.shape[0]
    if k == 0:
        return anchors.new_zeros(())
    a = F.normalize(anchors, dim=1) if normalize else anchors
    b = F.normalize(positives, dim=1) if normalize else positives
    pool = torch.cat([a, b], dim=0)                            # (2K, C)
    sims = a @ pool.T                                          # (K, 2K)
    numerator = (a * b).sum(dim=1)
    eye = torch.eye(k, dtype=torch.bool, device=sims.device)
    masked = sims.masked_fill(torch.cat([eye, torch.zeros_like(eye)], dim=1),
                              float("-inf"))
    denominator = torch.logsumexp(masked, dim=1)
    return (denominator - numerator).mean()


def class_masks_from_labels(labels: torch.Tensor, target: tuple[int, int],
                            unknown_id: int = 0, ignore_id: int = 255,
                            min_mass: float = 1.0) -> tuple[torch.Tensor, list[int]]:
    """Soft per-class masks at feature resolution from a label grid.

    Classes whose area-averaged mass falls below one feature cell are
    dropped, as are the unknown and ignore labels.
    """
    present = [int(c) for c in torch.unique(labels)
               if int(c) not in (unknown_id, ignore_id)]
    if not present:
        return labels.new_zeros((0, *target), dtype=torch.float32), []
    stack = torch.stack([(labels == c).to(torch.float64) for c in present])
    small = area_downsample(stack, target)
    mass = small.sum(dim=(-2, -1))
    keep = [i for i in range(len(present)) if float(mass[i]) >= min_mass]
    return small[keep], [present[i] for i in keep]


def inter_class_loss(pseudo_labels: torch.Tensor, feats_t: torch.Tensor,
                     feats_prev: torch.Tensor, unknown_id: int = 0,
                     ignore_id: int = 255, normalize: bool = True
                     ) -> tuple[torch.Tensor, int]:
    """Contrast class prototypes of the current vs previous feature map.

    Returns (loss, K). K=0 yields a zero loss that callers may skip.
    """
    if feats_t.shape != feats_prev.shape:
        raise ValueError("feature maps must share shape")
    masks, classes = class_masks_from_labels(
        pseudo_labels, feats_t.shape[-2:], unknown_id=unknown_id, ignore_id=ignore_id)
    if not classes:
        return feats_t.new_zeros(()), 0
    masks = masks.to(feats_t.dtype)
    anchors, kept = masked_average_pool(feats_t, masks)
    positives, kept_prev = masked_average_pool(feats_prev, masks)
    assert kept == kept_prev  # same masks on both maps
    return contrastive_pool_loss(anchors, positives, normalize=normalize), len(kept)


def intra_class_loss(proposal_masks: torch.Tensor, feats_t: torch.Tensor,
                     feats_prev: torch.Tensor, normalize: bool = True
                     ) -> tuple[torch.Tensor, int]:
    """Contrast region-proposal prototypes of current vs previous features.

    Empty (padding) proposals are dropped from both pools symmetrically.
    Fewer than two non-empty proposals makes the contrast degenerate, so
    the loss is zero with count reported.
    """
    if feats_t.shape != feats_prev.shape:
        raise ValueError("feature maps must share shape")
    small = area_downsample(proposal_masks.to(torch.float64),
                            feats_t.shape[-2:]).to(feats_t.dtype)
    anchors, kept = masked_average_pool(feats_t, small)
    positives, _ = masked_average_pool(feats_prev, small)
    if len(kept) < 2:
        return feats_t.new_zeros(()), len(kept)
    return contrastive_pool_loss(anchors, positives, normalize=normalize), len(kept)


def feature_kd(feats_t: torch.Tensor, feats_prev: torch.Tensor) -> torch.Tensor:
    """Mean squared error between current and previous feature maps."""
    if feats_t.shape != feats_prev.shape:
        raise ValueError("feature maps must share shape")
    return ((feats_t - feats_prev) ** 2).mean()


def remodel_logits(logits: torch.Tensor, current_channels: Sequence[int],
                   unknown_channel: int = 0) -> torch.Tensor:
    """Fold the current-step class logits into the unknown channel.

    Output keeps only the previous label space: unknown (now the sum of
    current-class logits) followed by the historical class channels in
    their original order, ready to compare against the old model.
    """
    current = list(current_channels)
    if not current:
        raise ValueError("current class channel set must be non-empty")
    ch_dim = logits.ndim - 3
    k = logits.shape[ch_dim]
    folded = logits.index_select(ch_dim, torch.tensor(current, device=logits.device)
                                 ).sum(dim=ch_dim, keepdim=True)
    old = [c for c in range(k) if c not in current and c != unknown_channel]
    kept = logits.index_select(ch_dim, torch.tensor(old, device=logits.device)) \
        if old else logits.narrow(ch_dim, 0, 0)
    return torch.cat([folded, kept], dim=ch_dim)


def logit_kd(remodeled: torch.Tensor, prev_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy distillation from the previous model's logits.

    The previous model's softmax is the target distribution and the
    remodeled current logits go through log-softmax. Fidelity note: the
    raw form sum(current * log(previous)) over unnormalised logits is
    ill-defined for negative logits, so both sides are taken as
    probabilities, teacher outside the log, student inside (a clamped
    log would otherwise be needed). Normalised by channel count and
    pixel count.
    """
    if remodeled.shape != prev_logits.shape:
        raise ValueError("remodeled and previous logits must share shape")
    ch_dim = remodeled.ndim - 3
    target = F.softmax(prev_logits, dim=ch_dim)
    log_student = F.log_softmax(remodeled, dim=ch_dim)
    return -(target * log_student).mean()


def bce_seg(logits: torch.Tensor, target_channels: torch.Tensor,
            ignore_id: int = 255) -> tuple[torch.Tensor, bool]:
    """Per-channel binary cross-entropy against a one-hot channel target.

    ``target_channels`` holds channel indices (0 = unknown class) or the
    ignore sentinel; ignored pixels contribute nothing. Returns
    (loss, skipped); skipped is True when every pixel is ignored.
    """
    ch_dim = logits.ndim - 3
    k = logits.shape[ch_dim]
    valid = target_channels != ignore_id
    if not bool(valid.any()):
        return logits.new_zeros(()), True
    safe = target_channels.masked_fill(~valid, 0).long()
    onehot = F.one_hot(safe, k).to(logits.dtype)        # (..., H, W, K)
    onehot = onehot.movedim(-1, ch_dim)
    per_elem = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    weight = valid.unsqueeze(ch_dim).to(logits.dtype)
    return (per_elem * weight).sum() / (weight.sum() * k), False


def total_objective(bce: torch.Tensor | float,
                    inter_class: torch.Tensor | float = 0.0,
                    intra_class: torch.Tensor | float = 0.0,
                    kd_feature: torch.Tensor | float = 0.0,
                    kd_logit: torch.Tensor | float = 0.0,
                    lambda_c: float = DEFAULT_LAMBDA_C,
                    lambda_r: float = DEFAULT_LAMBDA_R) -> LossBreakdown:
    """Combine all components into the final objective."""
    parts = {"bce": bce, "inter_class": inter_class, "intra_class": intra_class,
             "kd_feature": kd_feature, "kd_logit": kd_logit}
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not torch.isfinite(torch.tensor(v)):
            raise TrainingError(f"loss component {name} is non-finite ({v})")
    contrast = inter_class + intra_class
    regularization = kd_feature + kd_logit
    total = bce + lambda_c * contrast + lambda_r * regularization
    return LossBreakdown(bce=bce, inter_class=inter_class, intra_class=intra_class,
                         contrast=contrast, kd_feature=kd_feature, kd_logit=kd_logit,
                         regularization=regularization, total=total,
                         lambda_c=lambda_c, lambda_r=lambda_r)
