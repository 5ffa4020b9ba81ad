"""Small encoder-decoder segmentation network with incremental classifier growth.

The network factors into a feature extractor (dense C-channel map at 1/8
resolution) and a classifier head. The head is a list of 1x1 convs, one
per learning step, so old and new class channels live in separate
parameter tensors: expansion never touches existing weights and the
trainer can give each group its own learning rate.
"""

from __future__ import annotations

import copy
import json
import os
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingError
from .scenario import IncrementalScenario


class ForwardOutput(NamedTuple):
    features: torch.Tensor      # (B, C, h, w)
    logits_small: torch.Tensor  # (B, K, h, w) at decode resolution
    logits: torch.Tensor        # (B, K, H, W) upsampled to input resolution


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """Strided conv encoder + light decoder + per-step 1x1 classifier convs.

    Channel layout of the logits: channel 0 is the unknown class, then the
    class ids of each step in introduction order. The layout is persisted
    in ``class_ids`` and never reordered.
    """

    def __init__(self, base_class_ids, feature_channels: int = 64, seed: int = 0):
        super().__init__()
        self.feature_channels = feature_channels
        gen = torch.Generator().manual_seed(seed)
        with _default_init(gen):
            self.encoder = nn.Sequential(
                _conv_block(3, 32, stride=2),
                _conv_block(32, 64, stride=2),
                _conv_block(64, 96, stride=2),
                _conv_block(96, 128, stride=1),
            )
            self.decoder = _conv_block(128, feature_channels, stride=1)
            head0 = nn.Conv2d(feature_channels, 1 + len(base_class_ids), 1)
        self.heads = nn.ModuleList([head0])
        self.steps_class_ids: list[list[int]] = [list(int(c) for c in base_class_ids)]
        self.step = 1

    # -- channel bookkeeping ------------------------------------------------

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(c for step in self.steps_class_ids for c in step)

    @property
    def num_channels(self) -> int:
        return 1 + len(self.class_ids)

    def channel_of(self, class_id: int) -> int:
        if class_id == 0:
            return 0
        return 1 + self.class_ids.index(class_id)

    def channels_of_step(self, step: int) -> list[int]:
        """Logit channel indices produced at a given step (step 1 owns channel 0)."""
        offset = 1 + sum(len(s) for s in self.steps_class_ids[: step - 1])
        chans = list(range(offset, offset + len(self.steps_class_ids[step - 1])))
        if step == 1:
            chans = [0] + chans
        return chans

    # -- forward ------------------------------------------------------------

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        feats = self.extract_features(x)
        logits_small = torch.cat([head(feats) for head in self.heads], dim=1)
        logits = F.interpolate(logits_small, size=x.shape[-2:], mode="bilinear",
                               align_corners=False)
        return ForwardOutput(feats, logits_small, logits)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel label grid using the persisted channel -> class id layout."""
        with torch.no_grad():
            out = self.forward(x)
            chans = out.logits.argmax(dim=1)
        lut = torch.tensor([0] + list(self.class_ids), dtype=torch.long)
        return lut[chans]

    # -- incremental growth -------------------------------------------------

    def expand_classifier(self, new_class_ids, seed: int = 0,
                          init_from_unknown: bool = False) -> None:
        """Append one head conv for the new classes; existing weights untouched."""
        new_class_ids = [int(c) for c in new_class_ids]
        dup = set(new_class_ids) & set(self.class_ids)
        if dup:
            raise ConfigurationError(f"classes {sorted(dup)} already have channels")
        if len(set(new_class_ids)) != len(new_class_ids):
            raise ConfigurationError("duplicate ids in expansion set")
        head = nn.Conv2d(self.feature_channels, len(new_class_ids), 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            if init_from_unknown:
                w0 = self.heads[0].weight[0:1]
                b0 = self.heads[0].bias[0:1]
                head.weight.copy_(w0.expand_as(head.weight))
                head.bias.copy_(b0.expand_as(head.bias))
            else:
                head.weight.normal_(0.0, 0.01, generator=gen)
                head.bias.zero_()
        self.heads.append(head)
        self.steps_class_ids.append(new_class_ids)
        self.step += 1

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """'backbone', 'old_heads' (incl. the unknown channel), 'new_head'."""
        return {
            "backbone": list(self.encoder.parameters()) + list(self.decoder.parameters()),
            "old_heads": [p for h in self.heads[:-1] for p in h.parameters()],
            "new_head": list(self.heads[-1].parameters()),
        }


class _default_init:
    """Route module initialisation through a fixed torch.Generator."""

    def __init__(self, gen: torch.Generator):
        self.gen = gen

    def __enter__(self):
        self.state = torch.random.get_rng_state()
        torch.random.set_rng_state(self.gen.get_state())
        return self

    def __exit__(self, *exc):
        self.gen.set_state(torch.random.get_rng_state())
        torch.random.set_rng_state(self.state)
        return False


def snapshot(model: SegmentationNet) -> SegmentationNet:
    """Frozen deep copy: eval mode, no gradients, immune to later training."""
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def save_checkpoint(model: SegmentationNet, path: str,
                    scenario: IncrementalScenario | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "steps_class_ids": model.steps_class_ids,
        "feature_channels": model.feature_channels,
        "step": model.step,
        "scenario": scenario.to_manifest() if scenario is not None else None,
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(payload, path)
    with open(path + ".manifest.json", "w") as f:
        json.dump({"step": model.step, "class_ids": list(model.class_ids),
                   "channels": model.num_channels}, f, indent=2)


def load_checkpoint(path: str) -> tuple[SegmentationNet, dict]:
    if not os.path.exists(path):
        raise TrainingError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    steps = payload["steps_class_ids"]
    model = SegmentationNet(steps[0], feature_channels=payload["feature_channels"])
    for ids in steps[1:]:
        model.expand_classifier(ids)
    model.load_state_dict(payload["state_dict"])
    meta = {"step": payload["step"], "scenario": payload["scenario"],
            "extra": payload["extra"]}
    return model, meta
