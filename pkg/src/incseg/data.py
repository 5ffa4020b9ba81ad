"""Training data: synthetic shapes benchmark, VOC-style IO, augmentation, rehearsal bank.

The synthetic generator renders each class as a distinct shape/colour
family over a textured background, giving a dataset a small CPU model
can learn in minutes while still exhibiting forgetting dynamics.
"""

from __future__ import annotations

import colorsys
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError
from .scenario import IGNORE_ID, UNKNOWN_ID, relabel_keep

_SHAPES = ("disk", "square", "triangle", "ring", "diamond", "cross", "ellipse", "bars")


@dataclass
class SegSample:
    """An image with its integer label mask."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 over {class ids, unknown, ignore}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape[:2]} and "
                            f"mask {self.mask.shape} extents differ")

    def present_classes(self, unknown_id: int = UNKNOWN_ID,
                        ignore_id: int = IGNORE_ID) -> set[int]:
        vals = set(int(v) for v in np.unique(self.mask))
        vals.discard(unknown_id)
        vals.discard(ignore_id)
        return vals


class SegDataset:
    """In-memory list of samples with a record of how many foreground ids exist."""

    def __init__(self, samples: list[SegSample], num_classes: int):
        self.samples = list(samples)
        self.num_classes = num_classes
        self._by_id = {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx: int) -> SegSample:
        return self.samples[idx]

    def by_id(self, sample_id: str) -> SegSample:
        return self._by_id[sample_id]

    def subset(self, samples: list[SegSample]) -> "SegDataset":
        return SegDataset(samples, self.num_classes)

    def class_histogram(self) -> dict[int, int]:
        """Number of images each foreground class appears in."""
        hist: dict[int, int] = {c: 0 for c in range(1, self.num_classes + 1)}
        for s in self.samples:
            for c in s.present_classes():
                if c in hist:
                    hist[c] += 1
        return hist


def _class_color(class_id: int, num_classes: int) -> np.ndarray:
    hue = (class_id - 1) / max(num_classes, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95), dtype=np.float32)


def _shape_mask(kind: str, size: int, cy: float, cx: float,
                radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "triangle":
        return (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if kind == "ring":
        rr = dy * dy + dx * dx
        return (rr <= radius * radius) & (rr >= (0.45 * radius) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    if kind == "cross":
        arm = max(radius * 0.45, 1.5)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | \
               ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    if kind == "ellipse":
        return (dy / max(radius * 0.6, 1.0)) ** 2 + (dx / radius) ** 2 <= 1.0
    if kind == "bars":
        inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        return inside & ((yy.astype(np.int64) // max(int(radius / 2.5), 2)) % 2 == 0)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    # smooth low-contrast grey field: coarse noise upsampled bilinearly
    coarse = rng.uniform(0.35, 0.6, size=(size // 8 + 2, size // 8 + 2, 3)).astype(np.float32)
    img = np.empty((size, size, 3), dtype=np.float32)
    ys = np.linspace(0, coarse.shape[0] - 1.001, size)
    xs = np.linspace(0, coarse.shape[1] - 1.001, size)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    img[:] = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
              + c10 * fy * (1 - fx) + c11 * fy * fx)
    return img


def generate_synthetic_dataset(num_classes: int, samples_per_class: int,
                               image_size: int = 64, seed: int = 0,
                               max_extra_instances: int = 2) -> SegDataset:
    """Render a deterministic shapes dataset; every class anchors
    ``samples_per_class`` images and may additionally appear in others."""
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if image_size < 16:
        raise ConfigurationError(f"image_size={image_size} too small to place shapes")
    rng = np.random.default_rng(seed)
    samples = []
    idx = 0
    for primary in range(1, num_classes + 1):
        for _ in range(samples_per_class):
            extra = rng.integers(0, max_extra_instances + 1)
            others = [int(c) for c in rng.choice(np.arange(1, num_classes + 1),
                                                 size=extra, replace=False)]
            image = _textured_background(image_size, rng)
            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            for cls in [primary] + others:
                kind = _SHAPES[(cls - 1) % len(_SHAPES)]
                color = _class_color(cls, num_classes)
                radius = rng.uniform(0.12, 0.26) * image_size
                margin = radius * 0.7
                cy = rng.uniform(margin, image_size - margin)
                cx = rng.uniform(margin, image_size - margin)
                region = _shape_mask(kind, image_size, cy, cx, radius)
                if region.sum() < 12:
                    continue
                shade = 1.0 + 0.12 * np.sin(
                    (np.mgrid[0:image_size, 0:image_size][cls % 2]) / (1.5 + cls % 3))
                image[region] = np.clip(color[None, :] * shade[region, None], 0, 1)
                mask[region] = cls
            image += rng.normal(0.0, 0.015, size=image.shape).astype(np.float32)
            np.clip(image, 0.0, 1.0, out=image)
            samples.append(SegSample(image=image.astype(np.float32), mask=mask,
                                     id=f"syn_{idx:05d}"))
            idx += 1
    return SegDataset(samples, num_classes=num_classes)


def save_dataset(dataset: SegDataset, root: str, force: bool = False) -> None:
    """Write a VOC-style tree: images/*.png (RGB) + masks/*.png (8-bit labels)."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if os.path.exists(img_dir) and os.listdir(img_dir) and not force:
        raise ConfigurationError(f"{root} already holds a dataset; pass force to overwrite")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for s in dataset:
        Image.fromarray((s.image * 255).round().astype(np.uint8)).save(
            os.path.join(img_dir, f"{s.id}.png"))
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(
            os.path.join(mask_dir, f"{s.id}.png"))
    with open(os.path.join(root, "dataset.json"), "w") as f:
        json.dump({"num_classes": dataset.num_classes, "size": len(dataset)}, f, indent=2)


def load_voc_style(root: str, num_classes: int | None = None) -> SegDataset:
    """Read an images/ + masks/ tree of 8-bit label masks (255 = ignore).

    ``num_classes`` bounds the legal foreground ids; when absent it is
    taken from the dataset manifest, defaulting to the VOC count of 20.
    """
    manifest_path = os.path.join(root, "dataset.json")
    if num_classes is None:
        if os.path.exists(manifest_path):
            with open(manifest_path) as f:
                num_classes = int(json.load(f)["num_classes"])
        else:
            num_classes = 20
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir):
        raise DataError(f"no images/ directory under {root}")
    names = sorted(n for n in os.listdir(img_dir) if n.endswith(".png"))
    if not names:
        warnings.warn(f"{root} holds no images; returning an empty dataset", stacklevel=2)
        return SegDataset([], num_classes=num_classes)
    legal = set(range(0, num_classes + 1)) | {IGNORE_ID}
    samples = []
    for name in names:
        mask_path = os.path.join(mask_dir, name)
        if not os.path.exists(mask_path):
            raise DataError(f"missing mask for image {name}")
        image = np.asarray(Image.open(os.path.join(img_dir, name)).convert("RGB"),
                           dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
        bad = set(int(v) for v in np.unique(mask)) - legal
        if bad:
            raise DataError(f"mask {mask_path} contains illegal label values {sorted(bad)}")
        samples.append(SegSample(image=image, mask=mask, id=os.path.splitext(name)[0]))
    return SegDataset(samples, num_classes=num_classes)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentGeometry:
    """One sampled geometric transform, applicable to image, mask and any
    extra aligned mask stacks (e.g. cached region proposals)."""

    flip: bool
    scale: float
    crop_y: int
    crop_x: int
    out_size: tuple[int, int]

    @classmethod
    def sample(cls, shape: tuple[int, int], seed: int,
               flip_p: float = 0.5, scale_range: tuple[float, float] = (0.75, 1.25)
               ) -> "AugmentGeometry":
        rng = np.random.default_rng(seed)
        flip = bool(rng.random() < flip_p)
        scale = float(rng.uniform(*scale_range))
        H, W = shape
        sh, sw = max(1, round(H * scale)), max(1, round(W * scale))
        crop_y = int(rng.integers(0, max(sh - H, 0) + 1))
        crop_x = int(rng.integers(0, max(sw - W, 0) + 1))
        return cls(flip=flip, scale=scale, crop_y=crop_y, crop_x=crop_x, out_size=(H, W))

    def _scaled_size(self, H: int, W: int) -> tuple[int, int]:
        return max(1, round(H * self.scale)), max(1, round(W * self.scale))

    def apply_to_image(self, image: np.ndarray) -> np.ndarray:
        out = image[:, ::-1] if self.flip else image
        H, W = out.shape[:2]
        sh, sw = self._scaled_size(H, W)
        pil = Image.fromarray((out * 255).round().astype(np.uint8))
        out = np.asarray(pil.resize((sw, sh), Image.BILINEAR), dtype=np.float32) / 255.0
        return self._crop_or_pad(out)

    def apply_to_mask(self, mask: np.ndarray) -> np.ndarray:
        out = mask[:, ::-1] if self.flip else mask
        out = _nearest_resize(out, self._scaled_size(*out.shape[:2]))
        return self._crop_or_pad(out)

    def apply_to_mask_stack(self, masks: np.ndarray) -> np.ndarray:
        """(N, H, W) stack; nearest resize keeps a pixel partition a partition."""
        out = masks[:, :, ::-1] if self.flip else masks
        sh, sw = self._scaled_size(out.shape[1], out.shape[2])
        ys = _nearest_index(out.shape[1], sh)
        xs = _nearest_index(out.shape[2], sw)
        out = out[:, ys][:, :, xs]
        return np.stack([self._crop_or_pad(m) for m in out])

    def _crop_or_pad(self, arr: np.ndarray) -> np.ndarray:
        H, W = self.out_size
        h, w = arr.shape[:2]
        if h > H or w > W:
            arr = arr[self.crop_y:self.crop_y + H, self.crop_x:self.crop_x + W]
            h, w = arr.shape[:2]
        if h < H or w < W:
            # edge padding never invents label values
            pad = [(0, H - h), (0, W - w)] + [(0, 0)] * (arr.ndim - 2)
            arr = np.pad(arr, pad, mode="edge")
        return arr


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return np.minimum((np.arange(dst) + 0.5) * src / dst, src - 1).astype(int)


def _nearest_resize(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    ys = _nearest_index(mask.shape[0], size[0])
    xs = _nearest_index(mask.shape[1], size[1])
    return mask[ys][:, xs]


def hflip(sample: SegSample) -> SegSample:
    """Horizontal flip of image and mask; applying it twice is the identity."""
    return SegSample(image=np.ascontiguousarray(sample.image[:, ::-1]),
                     mask=np.ascontiguousarray(sample.mask[:, ::-1]), id=sample.id)


def augment(sample: SegSample, seed: int) -> SegSample:
    """Random flip / scale / crop, identical geometry for image and mask."""
    geom = AugmentGeometry.sample(sample.mask.shape, seed)
    return SegSample(image=geom.apply_to_image(sample.image),
                     mask=geom.apply_to_mask(sample.mask), id=sample.id)


# ---------------------------------------------------------------------------
# memory rehearsal


@dataclass
class MemoryBank:
    """Ids of retained past samples; masks are kept in original full form
    and relabelled on the fly for the step that replays them."""

    capacity: int
    sample_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.sample_ids)

    def samples(self, dataset: SegDataset, keep_ids=None) -> list[SegSample]:
        out = []
        for sid in self.sample_ids:
            s = dataset.by_id(sid)
            if keep_ids is not None:
                s = SegSample(image=s.image, mask=relabel_keep(s.mask, keep_ids), id=s.id)
            out.append(s)
        return out

    def to_manifest(self) -> dict:
        return {"capacity": self.capacity, "sample_ids": list(self.sample_ids)}

    @classmethod
    def from_manifest(cls, manifest: dict) -> "MemoryBank":
        return cls(capacity=manifest["capacity"], sample_ids=list(manifest["sample_ids"]))


def sample_memory(dataset: SegDataset, seen: tuple[int, ...] | list[int],
                  capacity: int, seed: int) -> MemoryBank:
    """Random selection constrained so every seen class keeps at least one
    exemplar whenever the dataset offers one."""
    rng = np.random.default_rng(seed)
    carriers: dict[int, list[str]] = {c: [] for c in seen}
    for s in dataset:
        present = s.present_classes()
        for c in present & set(seen):
            carriers[c].append(s.id)
    coverable = [c for c in seen if carriers[c]]
    if capacity < len(coverable):
        warnings.warn(f"memory capacity {capacity} below the {len(coverable)} seen "
                      "classes with exemplars; coverage will be partial", stacklevel=2)
    chosen: list[str] = []
    covered: set[int] = set()
    # rarest classes first so a shared image cannot starve a rare one
    for c in sorted(coverable, key=lambda c: (len(carriers[c]), c)):
        if len(chosen) >= capacity:
            break
        if c in covered:
            continue
        pick = carriers[c][int(rng.integers(len(carriers[c])))]
        if pick not in chosen:
            chosen.append(pick)
        covered |= dataset.by_id(pick).present_classes() & set(seen)
    remaining = [s.id for s in dataset
                 if s.id not in chosen and s.present_classes() & set(seen)]
    rng.shuffle(remaining)
    for sid in remaining:
        if len(chosen) >= capacity:
            break
        chosen.append(sid)
    return MemoryBank(capacity=capacity, sample_ids=chosen)
