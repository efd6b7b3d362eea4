"""In-memory dataset: normalized image tensors, multi-hot labels, cached proposals."""

import os
from dataclasses import dataclass, field

import numpy as np

from .datagen import Manifest, load_manifest, read_ppm
from .errors import InputError
from .regions import ProposalConfig, ProposalSet, generate_proposals


def normalize_image(img: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float32 3xHxW in [-0.5, 0.5]."""
    return (img.astype(np.float32) / 255.0 - 0.5).transpose(2, 0, 1)


@dataclass
class ArrayDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, K) float32 multi-hot
    ids: list
    num_classes: int
    proposals: list = field(default_factory=list)  # per-image ProposalSet, filled lazily

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_hw(self):
        return self.images.shape[2], self.images.shape[3]

    def ensure_proposals(self, cfg: ProposalConfig):
        """Generate (deterministic) proposals once per image and keep them."""
        if self.proposals and len(self.proposals) == len(self) and self.proposals[0] is not None:
            return self
        raw = ((self.images.transpose(0, 2, 3, 1) + 0.5) * 255.0).astype(np.uint8)
        self.proposals = [generate_proposals(raw[i], cfg) for i in range(len(self))]
        for prop, image_id in zip(self.proposals, self.ids):
            prop.image_id = image_id
        return self


def load_split(root: str, split: str, num_classes: int) -> ArrayDataset:
    manifest = load_manifest(os.path.join(root, f"{split}.jsonl"), split=split)
    return from_manifest(root, manifest, num_classes)


def from_manifest(root: str, manifest: Manifest, num_classes: int) -> ArrayDataset:
    if not manifest.entries:
        raise InputError(f"manifest for split {manifest.split!r} is empty")
    images, labels, ids = [], [], []
    for entry in manifest.entries:
        img = read_ppm(os.path.join(root, entry["image"]))
        images.append(normalize_image(img))
        row = np.zeros(num_classes, dtype=np.float32)
        for l in entry["labels"]:
            if l >= num_classes:
                raise InputError(f"label {l} out of range for K={num_classes} in {entry['image']}")
            row[l] = 1.0
        labels.append(row)
        ids.append(entry["image"])
    return ArrayDataset(images=np.stack(images), labels=np.stack(labels), ids=ids,
                        num_classes=num_classes)


def batches(n: int, batch_size: int, rng: np.random.Generator = None):
    """Yield index arrays; shuffles when an rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
