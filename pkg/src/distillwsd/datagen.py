"""Synthetic multi-label scene generator and manifest I/O.

Scenes are 8-bit RGB images with 1-4 colored shapes (class = shape x color)
at random scale and position, drawn back-to-front so later shapes occlude
earlier ones.  A class is labeled only if at least 10% of its shape's area
stays visible.  Everything is deterministic: image n derives its RNG from
base_seed + n.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ManifestParseError

SHAPES = ("square", "circle", "triangle", "cross", "ring")
COLORS = {"red": (220, 50, 50), "green": (50, 200, 70), "blue": (60, 80, 225), "yellow": (230, 210, 50)}
VISIBLE_FRACTION = 0.10
OBJECT_COUNT_WEIGHTS = {1: 0.15, 2: 0.25, 3: 0.30, 4: 0.30}


def class_names(k: int):
    names = [f"{color}_{shape}" for shape in SHAPES for color in COLORS]
    if k > len(names):
        raise ConfigError(f"at most {len(names)} shape x color classes available, asked for {k}")
    return names[:k]


@dataclass
class SceneSpec:
    num_classes: int = 10
    image_size: int = 64
    objects_per_image: tuple = (1, 4)
    cooccurrence: np.ndarray = None  # KxK symmetric affinity; rows are sampling weights
    occlusion_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        class_names(self.num_classes)  # validates K
        if self.cooccurrence is None:
            self.cooccurrence = np.ones((self.num_classes, self.num_classes))
        self.cooccurrence = np.asarray(self.cooccurrence, dtype=np.float64)
        if self.cooccurrence.shape != (self.num_classes, self.num_classes):
            raise ConfigError(f"cooccurrence must be {self.num_classes}x{self.num_classes}")
        if np.any(self.cooccurrence < 0) or np.any(self.cooccurrence.sum(axis=1) <= 0):
            raise ConfigError("cooccurrence rows must be non-negative and not all zero")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")

    def marginals(self) -> np.ndarray:
        w = self.cooccurrence.sum(axis=1)
        return w / w.sum()


@dataclass
class Manifest:
    entries: list = field(default_factory=list)  # {"image": str, "labels": [int]}
    split: str = "train"

    def __len__(self):
        return len(self.entries)


# -- shape rasterization ------------------------------------------------------------

def _shape_mask(shape: str, size: int) -> np.ndarray:
    s = size
    yy, xx = np.mgrid[0:s, 0:s]
    cy = cx = (s - 1) / 2.0
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (s / 2.0) ** 2
    if shape == "triangle":
        # upright isoceles: apex top-center, base bottom
        frac = yy / max(s - 1, 1)
        return np.abs(xx - cx) <= frac * (s / 2.0)
    if shape == "cross":
        bar = s / 3.0
        return (np.abs(xx - cx) <= bar / 2.0) | (np.abs(yy - cy) <= bar / 2.0)
    if shape == "ring":
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (r2 <= (s / 2.0) ** 2) & (r2 >= (s / 4.0) ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


def _sample_classes(spec: SceneSpec, rng: np.random.Generator):
    """Object classes for one scene: the first follows the affinity marginals,
    later ones follow the mean affinity row of those already drawn."""
    counts = np.array(list(OBJECT_COUNT_WEIGHTS.keys()))
    weights = np.array(list(OBJECT_COUNT_WEIGHTS.values()))
    lo, hi = spec.objects_per_image
    allowed = (counts >= lo) & (counts <= hi)
    if not allowed.any():
        allowed = counts == np.clip(counts, lo, hi)
    n = int(rng.choice(counts[allowed], p=weights[allowed] / weights[allowed].sum()))
    chosen = [int(rng.choice(spec.num_classes, p=spec.marginals()))]
    for _ in range(n - 1):
        row = spec.cooccurrence[chosen].mean(axis=0)
        chosen.append(int(rng.choice(spec.num_classes, p=row / row.sum())))
    return chosen


def sample_scene(spec: SceneSpec, rng: np.random.Generator):
    """Draw object classes, sizes and positions for one scene (pre-raster)."""
    size = spec.image_size
    objects = []
    placed = []
    for cls in _sample_classes(spec, rng):
        extent = int(round(rng.uniform(0.15, 0.5) * size))
        extent = max(6, min(extent, size - 1))
        for attempt in range(12):
            x = int(rng.integers(0, size - extent + 1))
            y = int(rng.integers(0, size - extent + 1))
            may_occlude = attempt == 11 or rng.uniform() < spec.occlusion_prob
            overlaps = any(not (x + extent <= px or px + pe <= x or y + extent <= py or py + pe <= y)
                           for px, py, pe in placed)
            if may_occlude or not overlaps:
                break
        placed.append((x, y, extent))
        objects.append({"class": cls, "x": x, "y": y, "size": extent})
    return objects


def render_scene(spec: SceneSpec, objects, rng: np.random.Generator):
    """Rasterize back-to-front; returns (image HxWx3 uint8, visible label list)."""
    size = spec.image_size
    shade = int(rng.integers(70, 111))
    img = np.full((size, size, 3), shade, dtype=np.uint8)
    owner = np.full((size, size), -1, dtype=np.int64)
    areas = []
    for idx, obj in enumerate(objects):
        shape = SHAPES[obj["class"] // len(COLORS)]
        color = list(COLORS.values())[obj["class"] % len(COLORS)]
        mask = _shape_mask(shape, obj["size"])
        ys, xs = np.nonzero(mask)
        owner[obj["y"] + ys, obj["x"] + xs] = idx
        img[obj["y"] + ys, obj["x"] + xs] = color
        areas.append(mask.sum())
    labels = set()
    for idx, obj in enumerate(objects):
        visible = (owner == idx).sum()
        if visible >= VISIBLE_FRACTION * areas[idx]:
            labels.add(obj["class"])
    return img, sorted(labels)


# -- PPM I/O ----------------------------------------------------------------------

def write_ppm(path: str, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (image.shape[1], image.shape[0]))
        fh.write(image.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise InputError(f"{path}: not a binary P6 pixmap")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InputError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3).copy()


# -- manifests ---------------------------------------------------------------------

def save_manifest(manifest: Manifest, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            fh.write(json.dumps({"image": entry["image"], "labels": list(entry["labels"])}) + "\n")


def load_manifest(path: str, split: str = "train") -> Manifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(obj, dict) or "image" not in obj or "labels" not in obj:
                raise ManifestParseError("entry must have 'image' and 'labels'", lineno)
            if not all(isinstance(v, int) and v >= 0 for v in obj["labels"]):
                raise ManifestParseError("labels must be non-negative integers", lineno)
            entries.append({"image": obj["image"], "labels": list(obj["labels"])})
    return Manifest(entries=entries, split=split)


def generate_dataset(spec: SceneSpec, counts: dict, out_dir: str) -> dict:
    """Write PPM images plus one manifest per split; returns {split: Manifest}.

    Image n (numbered across all splits) uses seed spec.seed + n, so any
    prefix of the dataset is stable under count changes.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifests = {}
    index = 0
    for split in ("train", "val", "test"):
        n = int(counts.get(split, 0))
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        manifest = Manifest(entries=[], split=split)
        for _ in range(n):
            rng = np.random.default_rng(spec.seed + index)
            objects = sample_scene(spec, rng)
            img, labels = render_scene(spec, objects, rng)
            rel = os.path.join(split, f"img_{index:06d}.ppm")
            write_ppm(os.path.join(out_dir, rel), img)
            manifest.entries.append({"image": rel, "labels": labels})
            index += 1
        save_manifest(manifest, os.path.join(out_dir, f"{split}.jsonl"))
        manifests[split] = manifest
    return manifests
