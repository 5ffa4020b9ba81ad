"""Class-agnostic mask proposals: a deterministic graph-merge segmenter.

Stands in for a heavyweight learned proposal generator. The proposals
partition the pixel grid; downstream code relies only on that partition
property, never on proposal quality.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
from skimage.segmentation import felzenszwalb

from .errors import ConfigurationError

# fixed segmenter parameters; sigma=0 keeps flat regions exactly flat
FELZ_SCALE = 64.0
FELZ_SIGMA = 0.0
FELZ_MIN_SIZE = 8


@dataclass
class MaskProposalSet:
    """N binary masks partitioning the image; trailing masks may be empty padding."""

    masks: np.ndarray       # (N, H, W) uint8 in {0, 1}
    num_regions: int        # leading non-empty count

    def __post_init__(self):
        if self.masks.ndim != 3:
            raise ConfigurationError("proposal masks must be (N, H, W)")

    @property
    def capacity(self) -> int:
        return self.masks.shape[0]

    def nonempty(self) -> np.ndarray:
        return self.masks[: self.num_regions]

    def label_grid(self) -> np.ndarray:
        """(H, W) region index per pixel; inverse of the mask stack."""
        return np.argmax(self.masks, axis=0).astype(np.int32)


def _region_adjacency(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    a, b = labels[:, :-1], labels[:, 1:]
    for u, v in zip(a[a != b].ravel(), b[a != b].ravel()):
        pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    a, b = labels[:-1, :], labels[1:, :]
    for u, v in zip(a[a != b].ravel(), b[a != b].ravel()):
        pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    return pairs


def _merge_to_capacity(labels: np.ndarray, image: np.ndarray, n_max: int) -> np.ndarray:
    """Merge smallest regions into their most colour-similar neighbour until <= n_max."""
    labels = labels.copy()
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) <= n_max:
            break
        means = {int(i): image[labels == i].mean(axis=0) for i in ids}
        adj = _region_adjacency(labels)
        neighbours: dict[int, list[int]] = {int(i): [] for i in ids}
        for u, v in adj:
            neighbours[u].append(v)
            neighbours[v].append(u)
        smallest = int(ids[np.argmin(counts)])
        cands = neighbours[smallest]
        if not cands:  # disconnected leftover: fold into the largest region
            target = int(ids[np.argmax(counts)])
        else:
            dists = [float(np.linalg.norm(means[smallest] - means[c])) for c in cands]
            target = cands[int(np.argmin(dists))]
        labels[labels == smallest] = target
    return labels


def generate_proposals(image: np.ndarray, n_max: int = 100) -> MaskProposalSet:
    """Deterministic region partition of an image into at most n_max proposals.

    The result is padded with empty masks to exactly n_max so batches
    have a fixed shape; padding is skipped in prototype pooling.
    """
    if n_max < 2:
        raise ConfigurationError("need capacity for at least 2 proposals")
    img = np.ascontiguousarray(image, dtype=np.float64)
    labels = felzenszwalb(img, scale=FELZ_SCALE, sigma=FELZ_SIGMA,
                          min_size=FELZ_MIN_SIZE, channel_axis=2)
    labels = _merge_to_capacity(labels, img, n_max)
    ids, counts = np.unique(labels, return_counts=True)
    order = np.argsort(-counts, kind="stable")  # biggest region first, stable
    H, W = labels.shape
    masks = np.zeros((n_max, H, W), dtype=np.uint8)
    for slot, k in enumerate(order):
        masks[slot] = labels == ids[k]
    return MaskProposalSet(masks=masks, num_regions=len(ids))


def downsample_masks(masks: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-average each mask to the feature grid; a pixel partition stays a
    partition because averaging is linear."""
    if masks.ndim == 2:
        masks = masks[None]
    H, W = masks.shape[-2:]
    h, w = target
    if h > H or w > W:
        raise ConfigurationError(f"target {target} larger than source {(H, W)}")
    t = torch.from_numpy(np.ascontiguousarray(masks)).to(torch.float64)
    out = torch.nn.functional.adaptive_avg_pool2d(t.unsqueeze(0), (h, w)).squeeze(0)
    return out.numpy()


class ProposalCache:
    """On-disk store of proposal sets keyed by sample id.

    Proposals come from a frozen generator, so every step reuses the
    same masks; caching makes that exact by construction. Files are npz
    containers of bit-packed masks.
    """

    def __init__(self, directory: str, n_max: int = 100):
        self.directory = directory
        self.n_max = n_max
        os.makedirs(directory, exist_ok=True)

    def _path(self, sample_id: str) -> str:
        return os.path.join(self.directory, f"{sample_id}.npz")

    def put(self, sample_id: str, proposals: MaskProposalSet) -> None:
        packed = np.packbits(proposals.masks, axis=-1)
        np.savez_compressed(self._path(sample_id), packed=packed,
                            shape=np.array(proposals.masks.shape),
                            num_regions=np.array(proposals.num_regions))

    def get(self, sample_id: str) -> MaskProposalSet | None:
        path = self._path(sample_id)
        if not os.path.exists(path):
            return None
        with np.load(path) as z:
            shape = tuple(int(v) for v in z["shape"])
            masks = np.unpackbits(z["packed"], axis=-1)[..., : shape[-1]]
            return MaskProposalSet(masks=masks.reshape(shape).astype(np.uint8),
                                   num_regions=int(z["num_regions"]))

    def get_or_compute(self, sample) -> MaskProposalSet:
        cached = self.get(sample.id)
        if cached is not None:
            return cached
        props = generate_proposals(sample.image, self.n_max)
        self.put(sample.id, props)
        return props

    def precompute(self, dataset, workers: int | None = None) -> None:
        if workers is None:
            workers = int(os.environ.get("INCSEG_WORKERS", "1"))
        todo = [s for s in dataset if self.get(s.id) is None]
        if workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    lambda s: (s.id, generate_proposals(s.image, self.n_max)), todo))
            for sid, props in results:
                self.put(sid, props)
        else:
            for s in todo:
                self.put(s.id, generate_proposals(s.image, self.n_max))
