"""Incremental-learning protocol: which classes exist at which step.

Label convention follows VOC mask files: 0 is the unknown/background
label, 255 marks ignored (unannotated) pixels, foreground classes use
ids 1..total. The unknown label is step-relative: at step t it stands
for "not a foreground class of the current label space".
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

UNKNOWN_ID = 0
IGNORE_ID = 255

MODES = ("overlapped", "disjoint")


@dataclass(frozen=True)
class LabelSpace:
    """The label universe of one learning step: known classes plus sentinels."""

    step: int
    known_ids: tuple[int, ...]
    unknown_id: int = UNKNOWN_ID
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if self.unknown_id in self.known_ids or self.ignore_id in self.known_ids:
            raise ConfigurationError("sentinel labels collide with foreground ids")

    @property
    def num_channels(self) -> int:
        """Dense-prediction channel count: unknown + every known class."""
        return 1 + len(self.known_ids)

    def channel_of(self, class_id: int) -> int:
        """Channel index for a label value; channel 0 is the unknown class."""
        if class_id == self.unknown_id:
            return 0
        return 1 + self.known_ids.index(class_id)

    def class_of(self, channel: int) -> int:
        if channel == 0:
            return self.unknown_id
        return self.known_ids[channel - 1]


@dataclass(frozen=True)
class IncrementalScenario:
    """Step-indexed class sets of an incremental protocol.

    The first step introduces ``base_count`` classes, every later step
    ``increment`` more, following ``class_order``. Immutable; safe to
    share across workers.
    """

    total_classes: int
    base_count: int
    increment: int
    num_steps: int
    class_order: tuple[int, ...]
    mode: str = "overlapped"
    unknown_id: int = UNKNOWN_ID
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if sorted(self.class_order) != list(range(1, self.total_classes + 1)):
            raise ConfigurationError("class_order must be a permutation of 1..total_classes")
        if self.base_count + self.increment * (self.num_steps - 1) != self.total_classes:
            raise ConfigurationError("step sizes do not add up to total_classes")

    def classes_at(self, t: int) -> tuple[int, ...]:
        """C^t: the classes introduced at step t."""
        self._check_step(t)
        if t == 1:
            return self.class_order[: self.base_count]
        lo = self.base_count + (t - 2) * self.increment
        return self.class_order[lo : lo + self.increment]

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """C^{1:t}: every class introduced up to and including step t."""
        self._check_step(t)
        hi = self.base_count + (t - 1) * self.increment
        return self.class_order[:hi]

    def label_space(self, t: int) -> LabelSpace:
        return LabelSpace(step=t, known_ids=self.seen_classes(t),
                          unknown_id=self.unknown_id, ignore_id=self.ignore_id)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ConfigurationError(f"step {t} out of range [1, {self.num_steps}]")

    def to_manifest(self) -> dict:
        return {
            "total_classes": self.total_classes,
            "base_count": self.base_count,
            "increment": self.increment,
            "num_steps": self.num_steps,
            "class_order": list(self.class_order),
            "mode": self.mode,
            "unknown_id": self.unknown_id,
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "IncrementalScenario":
        return cls(
            total_classes=manifest["total_classes"],
            base_count=manifest["base_count"],
            increment=manifest["increment"],
            num_steps=manifest["num_steps"],
            class_order=tuple(manifest["class_order"]),
            mode=manifest["mode"],
            unknown_id=manifest.get("unknown_id", UNKNOWN_ID),
            ignore_id=manifest.get("ignore_id", IGNORE_ID),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_manifest(), f, indent=2)

    @classmethod
    def load(cls, path) -> "IncrementalScenario":
        with open(path) as f:
            return cls.from_manifest(json.load(f))


def shuffled_order(total_classes: int, seed: int) -> tuple[int, ...]:
    """Seed-derived class permutation for order-robustness experiments."""
    rng = np.random.default_rng(seed)
    return tuple(int(c) for c in rng.permutation(np.arange(1, total_classes + 1)))


def parse_scenario(spec: str, total_classes: int,
                   class_order: Sequence[int] | None = None,
                   mode: str = "overlapped") -> IncrementalScenario:
    """Parse an "X-Y" spec into a scenario with T = 1 + (total - X) / Y steps.

    X classes are learned at step 1 and Y more at each later step. A
    single-step (offline) run is not expressible here; use
    :func:`single_step_scenario` for that.
    """
    parts = spec.strip().split("-")
    if len(parts) != 2:
        raise ConfigurationError(f"scenario spec must look like 'X-Y', got {spec!r}")
    try:
        base, inc = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigurationError(f"scenario spec must be numeric 'X-Y', got {spec!r}") from None
    if base < 1:
        raise ConfigurationError("base class count X must be >= 1")
    if inc < 1:
        raise ConfigurationError("increment Y must be >= 1; single-step training "
                                 "is configured explicitly, not via 'X-0'")
    if base > total_classes:
        raise ConfigurationError(f"X={base} exceeds total class count {total_classes}")
    remainder = total_classes - base
    if remainder == 0:
        raise ConfigurationError(
            f"X={base} equals the total class count; an 'X-Y' spec needs at least "
            "one incremental step (use single_step_scenario for offline training)")
    if remainder % inc != 0:
        raise ConfigurationError(
            f"cannot split {remainder} remaining classes into steps of {inc}")
    num_steps = 1 + remainder // inc
    if class_order is None:
        class_order = tuple(range(1, total_classes + 1))
    return IncrementalScenario(
        total_classes=total_classes, base_count=base, increment=inc,
        num_steps=num_steps, class_order=tuple(int(c) for c in class_order), mode=mode)


def single_step_scenario(total_classes: int,
                         class_order: Sequence[int] | None = None,
                         mode: str = "overlapped") -> IncrementalScenario:
    """Offline (T=1) protocol: all classes in the base step."""
    if class_order is None:
        class_order = tuple(range(1, total_classes + 1))
    return IncrementalScenario(
        total_classes=total_classes, base_count=total_classes, increment=0,
        num_steps=1, class_order=tuple(int(c) for c in class_order), mode=mode)


def _validate_mask_values(mask: np.ndarray, scenario: IncrementalScenario) -> None:
    legal = set(range(1, scenario.total_classes + 1))
    legal.add(scenario.unknown_id)
    legal.add(scenario.ignore_id)
    present = set(int(v) for v in np.unique(mask))
    illegal = present - legal
    if illegal:
        raise DataError(f"mask contains illegal label values {sorted(illegal)}")


def relabel_keep(mask: np.ndarray, keep_ids: Iterable[int],
                 unknown_id: int = UNKNOWN_ID, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Keep the given foreground ids; every other non-ignore pixel becomes unknown."""
    keep = np.isin(mask, np.fromiter(keep_ids, dtype=mask.dtype))
    out = np.where(keep | (mask == ignore_id), mask, unknown_id)
    return out.astype(mask.dtype)


def relabel_for_step(mask: np.ndarray, scenario: IncrementalScenario, t: int) -> np.ndarray:
    """Per-step ground truth: only C^t stays annotated, the rest collapses to unknown."""
    scenario._check_step(t)
    _validate_mask_values(mask, scenario)
    return relabel_keep(mask, scenario.classes_at(t),
                        unknown_id=scenario.unknown_id, ignore_id=scenario.ignore_id)


def _present_foreground(mask: np.ndarray, scenario: IncrementalScenario) -> set[int]:
    vals = set(int(v) for v in np.unique(mask))
    vals.discard(scenario.unknown_id)
    vals.discard(scenario.ignore_id)
    return vals


def filter_images_for_step(dataset, scenario: IncrementalScenario, t: int):
    """Select the subset of samples used to train step t.

    Overlapped mode keeps any image showing a current class; disjoint
    mode additionally rejects images containing future classes.
    """
    scenario._check_step(t)
    current = set(scenario.classes_at(t))
    seen = set(scenario.seen_classes(t))
    kept = []
    for sample in dataset:
        present = _present_foreground(sample.mask, scenario)
        if not present & current:
            continue
        if scenario.mode == "disjoint" and not present <= seen:
            continue
        kept.append(sample)
    if not kept:
        warnings.warn(f"no images matched step {t} of the scenario", stacklevel=2)
    return dataset.subset(kept) if hasattr(dataset, "subset") else kept


def seen_classes(scenario: IncrementalScenario, t: int) -> tuple[int, ...]:
    """Convenience alias for scenario.seen_classes(t)."""
    return scenario.seen_classes(t)
