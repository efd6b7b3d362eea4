"""Region proposals, RoI max pooling, IoU and greedy NMS.

Proposals come from a deterministic multi-scale sliding-window generator:
windows are scored by the Sobel edge mass they fully enclose minus a penalty
for edge components straddling their boundary.  It stands in for a learned
or classical proposal algorithm and only has to supply plausible boxes with
prior scores in (0, 1].
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import fastops
from .errors import ContractError, DimensionError, InputError
from .tensor import Tensor, _accumulate_owned, _as_tensor, _node

SCORE_FLOOR = 1e-3


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive-exclusive float pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DimensionError(f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class ProposalSet:
    """Per-image proposal boxes with their prior scores."""

    boxes: list
    prior_scores: list
    image_id: str = ""

    def __post_init__(self):
        if len(self.boxes) != len(self.prior_scores):
            raise ContractError(
                f"{len(self.boxes)} boxes but {len(self.prior_scores)} prior scores")
        self._coords = None
        self._scores = None

    def __len__(self):
        return len(self.boxes)

    def box_array(self) -> np.ndarray:
        if self._coords is None:
            self._coords = (np.array([b.as_array() for b in self.boxes])
                            if self.boxes else np.zeros((0, 4)))
        return self._coords

    def score_array(self) -> np.ndarray:
        if self._scores is None:
            self._scores = np.asarray(self.prior_scores, dtype=np.float64)
        return self._scores


@dataclass
class ProposalConfig:
    top_n: int = 64
    scales: tuple = (0.25, 0.3125, 0.375, 0.4375, 0.5, 0.625, 0.75)
    aspect_ratios: tuple = (1.0, 0.5, 2.0)  # width:height
    stride_fraction: float = 0.125
    boundary_penalty: float = 2.0
    edge_threshold: float = 0.1  # relative to the peak Sobel magnitude


def iou(a: Box, b: Box) -> float:
    """Intersection over union in continuous coordinates; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(boxes, scores, iou_thresh: float):
    """Greedy NMS: keep the best remaining box, drop overlaps above the threshold.

    Ties in score go to the lower index.  Returns retained indices in
    selection order.
    """
    if len(boxes) != len(scores):
        raise ContractError(f"{len(boxes)} boxes but {len(scores)} scores")
    if not 0 < iou_thresh < 1:
        raise ContractError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if not boxes:
        return []
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    coords = np.array([b.as_array() for b in boxes])
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for idx in order:
        if not alive[idx]:
            continue
        keep.append(int(idx))
        ix = np.minimum(coords[idx, 2], coords[:, 2]) - np.maximum(coords[idx, 0], coords[:, 0])
        iy = np.minimum(coords[idx, 3], coords[:, 3]) - np.maximum(coords[idx, 1], coords[:, 1])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        overlap = inter / (areas[idx] + areas - inter)
        alive &= overlap <= iou_thresh
    return keep


def recycle_to_length(items, n: int):
    """Cycle entries from the front until the list has exactly n items."""
    if not items:
        raise ContractError("cannot recycle an empty list")
    if len(items) >= n:
        return list(items[:n])
    out = list(items)
    i = 0
    while len(out) < n:
        out.append(items[i % len(items)])
        i += 1
    return out


def _window_grid(width: int, height: int, cfg: ProposalConfig):
    """Deterministic (x, y, w, h) windows: scales x aspect ratios, stride = window/4,
    with flush right/bottom rows appended so image borders stay covered."""
    m = min(width, height)
    windows = []
    for scale in cfg.scales:
        for ar in cfg.aspect_ratios:
            long_side = scale * m
            w = long_side if ar >= 1.0 else long_side * ar
            h = long_side if ar <= 1.0 else long_side / ar
            w, h = min(w, width), min(h, height)
            if w < 2 or h < 2:
                continue
            sx = max(1.0, w * cfg.stride_fraction)
            sy = max(1.0, h * cfg.stride_fraction)
            xs = list(np.arange(0.0, width - w + 1e-6, sx))
            ys = list(np.arange(0.0, height - h + 1e-6, sy))
            if xs and xs[-1] < width - w - 1e-6:
                xs.append(width - w)
            if ys and ys[-1] < height - h - 1e-6:
                ys.append(height - h)
            for y in ys:
                for x in xs:
                    windows.append((x, y, w, h))
    return windows


def _edge_magnitude(image: np.ndarray) -> np.ndarray:
    gray = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    # Replicated borders: the image frame itself must not read as an edge.
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def _edge_components(mag: np.ndarray, rel_thresh: float):
    """Connected components of the thresholded edge map.

    Returns (bboxes, masses): component bounding boxes as (x1, y1, x2, y2)
    rows and the Sobel mass inside each component.
    """
    peak = mag.max()
    if peak <= 0:
        return np.zeros((0, 4)), np.zeros(0)
    labels, count = ndimage.label(mag > rel_thresh * peak, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros((0, 4)), np.zeros(0)
    masses = ndimage.sum_labels(mag, labels, index=np.arange(1, count + 1))
    bboxes = np.array([[sl[1].start, sl[0].start, sl[1].stop, sl[0].stop]
                       for sl in ndimage.find_objects(labels)], dtype=np.float64)
    return bboxes, masses


def generate_proposals(image: np.ndarray, cfg: ProposalConfig) -> ProposalSet:
    """Score sliding windows by the edge mass they fully enclose, penalized by
    the mass of edge components straddling their boundary, normalized by window
    perimeter; return the top_n as a ProposalSet (recycled from the top if short)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 2 or image.shape[1] < 2:
        raise InputError(f"expected an HxWx3 image, got shape {image.shape}")
    height, width = image.shape[:2]
    windows = _window_grid(width, height, cfg)
    if not windows:
        raise InputError(f"image {width}x{height} smaller than the smallest window")
    if cfg.top_n < 1:
        raise ContractError("top_n must be >= 1")

    comp_boxes, comp_mass = _edge_components(_edge_magnitude(image), cfg.edge_threshold)
    win = np.array([[x, y, x + w, y + h] for x, y, w, h in windows])
    if comp_mass.size == 0:
        raw = np.zeros(len(windows))
    else:
        contained = ((comp_boxes[None, :, 0] >= win[:, None, 0])
                     & (comp_boxes[None, :, 1] >= win[:, None, 1])
                     & (comp_boxes[None, :, 2] <= win[:, None, 2])
                     & (comp_boxes[None, :, 3] <= win[:, None, 3]))
        ox = (np.minimum(comp_boxes[None, :, 2], win[:, None, 2])
              - np.maximum(comp_boxes[None, :, 0], win[:, None, 0]))
        oy = (np.minimum(comp_boxes[None, :, 3], win[:, None, 3])
              - np.maximum(comp_boxes[None, :, 1], win[:, None, 1]))
        straddling = (ox > 0) & (oy > 0) & ~contained
        perimeter = 2.0 * ((win[:, 2] - win[:, 0]) + (win[:, 3] - win[:, 1]))
        raw = (contained @ comp_mass - cfg.boundary_penalty * (straddling @ comp_mass)) / perimeter
        raw = np.clip(raw, 0.0, None)

    top = raw.max() if raw.size else 0.0
    scores = np.full(len(windows), SCORE_FLOOR) if top <= 0 else np.maximum(raw / top, SCORE_FLOOR)
    order = np.argsort(-scores, kind="stable")[:cfg.top_n]

    boxes, priors = [], []
    for i in order:
        x, y, w, h = windows[i]
        boxes.append(Box(x, y, min(x + w, width), min(y + h, height)))
        priors.append(float(scores[i]))
    boxes = recycle_to_length(boxes, cfg.top_n)
    priors = recycle_to_length(priors, cfg.top_n)
    return ProposalSet(boxes=boxes, prior_scores=priors)


# -- RoI pooling -----------------------------------------------------------------

def _project_boxes(coords: np.ndarray, fmap_hw, image_hw):
    """Boxes (r, 4) in image coordinates -> integer cell windows on the feature
    map (floor starts, ceil ends), clamped to at least one cell."""
    fh, fw = fmap_hw
    ih, iw = image_hw
    x1 = np.clip(np.floor(coords[:, 0] * fw / iw).astype(np.int64), 0, fw - 1)
    y1 = np.clip(np.floor(coords[:, 1] * fh / ih).astype(np.int64), 0, fh - 1)
    x2 = np.clip(np.ceil(coords[:, 2] * fw / iw).astype(np.int64), x1 + 1, fw)
    y2 = np.clip(np.ceil(coords[:, 3] * fh / ih).astype(np.int64), y1 + 1, fh)
    return x1, y1, x2, y2


def _bin_edges_many(start: np.ndarray, extent: np.ndarray, bins: int):
    """Per-box bin boundaries: (r,) starts/extents -> (r, bins) lo and hi."""
    idx = np.arange(bins)
    lo = start[:, None] + (idx[None, :] * extent[:, None]) // bins
    hi = start[:, None] + np.ceil((idx[None, :] + 1) * extent[:, None] / bins).astype(np.int64)
    return lo, np.maximum(hi, lo + 1)


def roi_pool_many(fmap, boxes, out_hw, image_hw):
    """Max-pool each box of a (c, h, w) feature map into (len(boxes), c, oh, ow).

    Bins use floor/ceil cell rounding; the gradient routes to the argmax cell,
    lowest flat index first on ties.  One tape node covers all boxes.
    """
    fmap = _as_tensor(fmap)
    if fmap.ndim != 3:
        raise DimensionError(f"roi_pool expects a (c, h, w) map, got {fmap.shape}")
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise DimensionError(f"output grid must be >= 1x1, got {out_hw}")
    c, fh, fw = fmap.shape
    if isinstance(boxes, ProposalSet):
        coords = boxes.box_array()
    elif isinstance(boxes, np.ndarray):
        coords = boxes
    else:
        coords = np.array([b.as_array() for b in boxes]) if len(boxes) else np.zeros((0, 4))
    r = len(coords)
    if r == 0:
        return _node(np.zeros((0, c, oh, ow), dtype=fmap.dtype), (fmap,), lambda g: None)

    x1, y1, x2, y2 = _project_boxes(coords, (fh, fw), image_hw)
    ys, ye = _bin_edges_many(y1, y2 - y1, oh)
    xs, xe = _bin_edges_many(x1, x2 - x1, ow)

    if fastops.AVAILABLE:
        out = np.empty((r, c, oh, ow), dtype=fmap.dtype)
        arg = np.empty((r, c, oh, ow), dtype=np.int64)
        fastops.roi_forward(fmap.data, ys, ye, xs, xe, out, arg)

        def backward(g):
            if not fmap.requires_grad:
                return
            dmap = np.zeros(fmap.shape, dtype=fmap.dtype)
            fastops.roi_backward(np.ascontiguousarray(g), arg, dmap.reshape(c, fh * fw))
            _accumulate_owned(fmap, dmap)

        return _node(out, (fmap,), backward)

    # Numpy fallback: gather a wy x wx candidate window per bin (narrow bins
    # repeat their last cell, which cannot change the max), y-major so the
    # first max hit is the lowest flat index.
    wy = int((ye - ys).max())
    wx = int((xe - xs).max())
    iy = np.minimum(ys[:, :, None] + np.arange(wy), ye[:, :, None] - 1)  # (r, oh, wy)
    ix = np.minimum(xs[:, :, None] + np.arange(wx), xe[:, :, None] - 1)  # (r, ow, wx)
    cand = (iy[:, :, None, :, None] * fw + ix[:, None, :, None, :]).reshape(r, oh, ow, wy * wx)
    flat_map = fmap.data.reshape(c, fh * fw)
    gathered = flat_map[:, cand]  # (c, r, oh, ow, W), W contiguous
    arg = gathered.argmax(axis=-1)
    out = np.take_along_axis(gathered, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not fmap.requires_grad:
            return
        src = np.take_along_axis(np.broadcast_to(cand, (c,) + cand.shape),
                                 arg[..., None], axis=-1)[..., 0]  # (c, r, oh, ow)
        flat = (np.arange(c)[:, None, None, None] * (fh * fw) + src).ravel()
        weights = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).ravel()
        dmap = np.bincount(flat, weights=weights, minlength=c * fh * fw)
        _accumulate_owned(fmap, dmap.reshape(c, fh, fw).astype(fmap.dtype))

    return _node(np.ascontiguousarray(out.transpose(1, 0, 2, 3)), (fmap,), backward)


def roi_pool(fmap, box: Box, out_hw, image_hw):
    """Single-box RoI max pooling: (c, h, w) -> (c, oh, ow)."""
    pooled = roi_pool_many(fmap, [box], out_hw, image_hw)
    return pooled[0]


def weighted_roi_features(fmap, proposals, scores, out_hw, image_hw):
    """Pool every proposal and scale each slice by its score: (|R|, c, oh, ow)."""
    boxes = proposals.box_array() if isinstance(proposals, ProposalSet) else proposals
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ContractError(f"{len(boxes)} proposals but {len(scores)} scores")
    pooled = roi_pool_many(fmap, boxes, out_hw, image_hw)
    weights = Tensor(scores.astype(pooled.dtype).reshape(-1, 1, 1, 1))
    return pooled * weights


def weighted_roi_features_batch(fmaps, coords_per_image, scores_per_image, out_hw, image_hw):
    """weighted_roi_features over a batch in one tape node.

    fmaps is (n, c, fh, fw); per-image coords (r_i, 4) and scores (r_i,) are
    constants (no gradient flows into them).  Output stacks all images' blocks
    along the first axis in input order.
    """
    fmaps = _as_tensor(fmaps)
    n, c, fh, fw = fmaps.shape
    oh, ow = out_hw
    counts = [len(s) for s in scores_per_image]
    total = int(np.sum(counts))
    if total == 0:
        return _node(np.zeros((0, c, oh, ow), dtype=fmaps.dtype), (fmaps,), lambda g: None)
    if not fastops.AVAILABLE:
        blocks = [weighted_roi_features(fmaps[i], coords_per_image[i], scores_per_image[i],
                                        out_hw, image_hw)
                  for i in range(n)]
        from .tensor import concat
        return concat(blocks, axis=0)

    coords = np.concatenate([np.asarray(cc, dtype=np.float64).reshape(-1, 4)
                             for cc in coords_per_image])
    scores = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores_per_image])
    img_of_box = np.repeat(np.arange(n), counts)
    x1, y1, x2, y2 = _project_boxes(coords, (fh, fw), image_hw)
    ys, ye = _bin_edges_many(y1, y2 - y1, oh)
    xs, xe = _bin_edges_many(x1, x2 - x1, ow)
    out = np.empty((total, c, oh, ow), dtype=fmaps.dtype)
    arg = np.empty((total, c, oh, ow), dtype=np.int64)
    sc = scores.astype(fmaps.dtype)
    fastops.roi_weighted_batch_forward(fmaps.data, img_of_box, ys, ye, xs, xe, sc, out, arg)

    def backward(g):
        if not fmaps.requires_grad:
            return
        dmaps = np.zeros(fmaps.shape, dtype=fmaps.dtype)
        fastops.roi_weighted_batch_backward(np.ascontiguousarray(g), arg, img_of_box, sc,
                                            dmaps.reshape(n, c, fh * fw))
        _accumulate_owned(fmaps, dmaps)

    return _node(out, (fmaps,), backward)
