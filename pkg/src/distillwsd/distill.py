"""Two-stage knowledge transfer from the frozen detection teacher.

Stage 1 matches objectness-weighted RoI features on selected conv layers and
updates only the student's backbone (and transform).  Stage 2 jointly fits
hard labels and the teacher's temperature-softened image predictions,
training every student parameter and all temperatures.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import fastops
from .dataset import ArrayDataset, batches
from .errors import ContractError, StateError
from .optim import SGD, TEMPERATURE_FLOOR
from .regions import nms, recycle_to_length, weighted_roi_features_batch
from .student import StudentModel
from .teacher import TeacherModel, teacher_softened_prediction
from .tensor import Parameter, Tensor


@dataclass
class DistillConfig:
    lambda_weight: float = 1.0
    nms_thresh: float = 0.4
    top_after_nms: int = 32          # paper-scale value: 100
    distill_layers: tuple = ("conv3",)
    stage1_lr: float = 1e-5
    stage1_epochs: int = 100
    stage1_stop_window: int = 5
    stage1_rel_tol: float = 1e-4
    stage2_lr: float = 1e-4
    stage2_epochs: int = 12
    plateau_epochs: int = 3
    plateau_min_delta: float = 1e-4
    lr_decay: float = 0.1
    batch_size: int = 16             # paper-scale value: 32
    momentum: float = 0.9
    weight_decay: float = 0.0005
    cache_teacher: bool = True
    require_stage1: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ContractError("lambda_weight must be >= 0")
        if not 0 < self.nms_thresh < 1:
            raise ContractError("nms_thresh must lie in (0, 1)")
        if self.top_after_nms < 1:
            raise ContractError("top_after_nms must be >= 1")


class TemperatureBank:
    """Learnable temperatures: per-class for the teacher's class softmax and the
    student sigmoid, per proposal rank for the teacher's proposal softmax."""

    def __init__(self, num_classes: int, top_n: int, dtype=np.float32):
        self.t_c = Parameter(Tensor(np.ones(num_classes, dtype=dtype), requires_grad=True), "temps.t_c")
        self.t_d = Parameter(Tensor(np.ones(top_n, dtype=dtype), requires_grad=True), "temps.t_d")
        self.t = Parameter(Tensor(np.ones(num_classes, dtype=dtype), requires_grad=True), "temps.t")

    def parameters(self):
        return [self.t_c, self.t_d, self.t]

    def values(self) -> dict:
        return {p.name.split(".")[1]: p.tensor.data.copy() for p in self.parameters()}


@dataclass
class StageReport:
    stage: int
    losses: dict = field(default_factory=dict)  # series name -> per-epoch values
    epochs_run: int = 0
    wall_time: float = 0.0
    final_temperatures: dict = field(default_factory=dict)
    seed: int = 0


# -- losses ---------------------------------------------------------------------

def feature_distill_loss(f_t, f_s) -> Tensor:
    """Mean squared feature gap over one image's proposal block:
    sum((f_t - f_s)^2) / (2 * |R'|).  The teacher side is detached."""
    f_t = f_t.detach() if isinstance(f_t, Tensor) else Tensor(np.asarray(f_t))
    if tuple(f_t.shape) != tuple(f_s.shape):
        raise ContractError(f"feature shapes differ: {f_t.shape} vs {f_s.shape}")
    num_props = f_t.shape[0]
    diff = f_t - f_s
    return (diff * diff).sum() * (1.0 / (2.0 * num_props))


def prediction_distill_loss(p_t_soft, p_s_soft) -> Tensor:
    """sum((p_t' - p_s')^2) / (2N); inputs are (K,) vectors or (N, K) batches."""
    p_t_soft = p_t_soft if isinstance(p_t_soft, Tensor) else Tensor(np.asarray(p_t_soft))
    n = 1 if p_t_soft.ndim == 1 else p_t_soft.shape[0]
    diff = p_t_soft - p_s_soft
    return (diff * diff).sum() * (1.0 / (2.0 * n))


def hard_loss(p, y) -> Tensor:
    """Per-class binary cross-entropy summed over classes, averaged over the
    batch; predictions are clamped to [1e-6, 1 - 1e-6] first."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    n = 1 if p.ndim == 1 else p.shape[0]
    pc = T.clip(p, 1e-6, 1.0 - 1e-6)
    ll = Tensor(y) * T.log(pc) + Tensor(1.0 - y) * T.log(1.0 - pc)
    return -ll.sum() * (1.0 / n)


def combined_loss(hard, soft, lambda_weight: float) -> Tensor:
    if lambda_weight < 0:
        raise ContractError("lambda_weight must be >= 0")
    hard = hard if isinstance(hard, Tensor) else Tensor(np.asarray(hard))
    soft = soft if isinstance(soft, Tensor) else Tensor(np.asarray(soft))
    return hard + soft * float(lambda_weight)


# -- proposal selection and teacher caching ------------------------------------------

def select_distill_proposals(bundle, proposals, cfg: DistillConfig):
    """NMS on the teacher's objectness, truncate, recycle.  Returns
    (boxes, restricted objectness, selected indices)."""
    s_prime = bundle.s_prime.data if isinstance(bundle.s_prime, Tensor) else np.asarray(bundle.s_prime)
    keep = nms(proposals.boxes, [float(v) for v in s_prime], cfg.nms_thresh)
    keep = recycle_to_length(keep, cfg.top_after_nms)
    boxes = [proposals.boxes[i] for i in keep]
    return boxes, s_prime[keep], np.asarray(keep)


@dataclass
class TeacherCacheEntry:
    m_c: np.ndarray          # (R, K)
    m_d: np.ndarray          # (R, K)
    s_prime: np.ndarray      # (R,)
    sel_boxes: list          # |R'| boxes after NMS + recycling
    sel_coords: np.ndarray   # (|R'|, 4) same boxes as an array
    sel_s_prime: np.ndarray  # (|R'|,)
    conv_feats: dict         # layer -> (c, h, w) array


def build_teacher_cache(teacher: TeacherModel, dataset: ArrayDataset, cfg: DistillConfig,
                        batch_size: int = 32) -> list:
    """One gradient-free teacher pass per image; the frozen teacher makes the
    outputs reusable across every epoch and arm."""
    if not teacher.frozen:
        raise ContractError("teacher must be frozen before distillation")
    dataset.ensure_proposals(teacher.cfg.proposal_cfg)
    entries = [None] * len(dataset)
    with T.no_grad():
        for idx in batches(len(dataset), batch_size):
            images = Tensor(dataset.images[idx])
            feats = teacher.conv_features(images)
            bundles = teacher.forward_batch(images, [dataset.proposals[i] for i in idx])
            for j, row in enumerate(idx):
                props = dataset.proposals[row]
                boxes, sel_sp, _ = select_distill_proposals(bundles[j], props, cfg)
                entries[row] = TeacherCacheEntry(
                    m_c=bundles[j].m_c.data.copy(),
                    m_d=bundles[j].m_d.data.copy(),
                    s_prime=bundles[j].s_prime.data.copy(),
                    sel_boxes=boxes,
                    sel_coords=np.array([b.as_array() for b in boxes]),
                    sel_s_prime=sel_sp,
                    conv_feats={layer: feats[layer].data[j].copy() for layer in cfg.distill_layers},
                )
    return entries


def _teacher_entry(teacher, dataset, cache, row, cfg):
    if cache is not None:
        return cache[row]
    with T.no_grad():
        images = Tensor(dataset.images[row:row + 1])
        feats = teacher.conv_features(images)
        bundle = teacher.forward_batch(images, [dataset.proposals[row]])[0]
    boxes, sel_sp, _ = select_distill_proposals(bundle, dataset.proposals[row], cfg)
    return TeacherCacheEntry(
        m_c=bundle.m_c.data, m_d=bundle.m_d.data, s_prime=bundle.s_prime.data,
        sel_boxes=boxes, sel_coords=np.array([b.as_array() for b in boxes]), sel_s_prime=sel_sp,
        conv_feats={layer: feats[layer].data[0] for layer in cfg.distill_layers})


# -- stage 1: feature-level transfer ---------------------------------------------------

def run_stage1(teacher: TeacherModel, student: StudentModel, dataset: ArrayDataset,
               cfg: DistillConfig, cache: list = None) -> StageReport:
    """Match score-weighted RoI features on the configured layers; only the
    student's conv/transform parameters are updated."""
    if not teacher.frozen:
        raise ContractError("teacher must be frozen before stage 1")
    fastops.tune_allocator()
    dataset.ensure_proposals(teacher.cfg.proposal_cfg)
    if cache is None and cfg.cache_teacher:
        cache = build_teacher_cache(teacher, dataset, cfg)
    rng = np.random.default_rng(cfg.seed)
    params = student.conv_parameters()
    opt = SGD(params, lr=cfg.stage1_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    report = StageReport(stage=1, seed=cfg.seed,
                         losses={layer: [] for layer in cfg.distill_layers})
    report.losses["total"] = []
    hw = dataset.image_hw
    roi_out = teacher.cfg.roi_out
    start = time.perf_counter()

    for epoch in range(cfg.stage1_epochs):
        sums = {layer: 0.0 for layer in cfg.distill_layers}
        seen = 0
        for idx in batches(len(dataset), cfg.batch_size, rng):
            n = len(idx)
            images = Tensor(dataset.images[idx])
            feats = student.conv_features(images)
            entries = [_teacher_entry(teacher, dataset, cache, row, cfg) for row in idx]
            coords = [e.sel_coords for e in entries]
            weights = [e.sel_s_prime for e in entries]
            loss = None
            for layer in cfg.distill_layers:
                with T.no_grad():
                    f_t = weighted_roi_features_batch(
                        Tensor(np.stack([e.conv_feats[layer] for e in entries])),
                        coords, weights, roi_out, hw)
                f_s = weighted_roi_features_batch(student.transform(feats[layer], layer),
                                                  coords, weights, roi_out, hw)
                diff = Tensor(f_t.data) - f_s
                term = (diff * diff).sum() * (1.0 / (2.0 * n * cfg.top_after_nms))
                sums[layer] += term.item() * n
                loss = term if loss is None else loss + term
            opt.zero_grad()
            loss.backward()
            opt.step()
            seen += n
        for layer in cfg.distill_layers:
            report.losses[layer].append(sums[layer] / seen)
        report.losses["total"].append(sum(sums[layer] for layer in cfg.distill_layers) / seen)
        report.epochs_run = epoch + 1
        if _stage1_converged(report.losses["total"], cfg):
            break
    report.wall_time = time.perf_counter() - start
    student.stage1_trained = True
    return report


def _stage1_converged(series, cfg: DistillConfig) -> bool:
    w = cfg.stage1_stop_window
    if len(series) <= w:
        return False
    past, now = series[-1 - w], series[-1]
    return abs(past - now) < cfg.stage1_rel_tol * max(abs(past), 1e-12)


# -- stage 2: prediction-level transfer ------------------------------------------------

def soft_target_batch(cache_entries, temps: TemperatureBank) -> Tensor:
    """Teacher softened predictions for a batch, stacked to (N, K); the graph
    reaches only the temperatures."""
    rows = []
    for entry in cache_entries:
        p_t = teacher_softened_prediction(
            _BundleView(entry.m_c, entry.m_d), temps.t_c.tensor, temps.t_d.tensor)
        rows.append(T.reshape(p_t, (1, p_t.shape[0])))
    return T.concat(rows, axis=0)


class _BundleView:
    """Just enough of a ScoreBundle for the softened-prediction path."""

    def __init__(self, m_c, m_d):
        self.m_c = Tensor(m_c)
        self.m_d = Tensor(m_d)


def run_stage2(teacher: TeacherModel, student: StudentModel, train_ds: ArrayDataset,
               val_ds: ArrayDataset, cfg: DistillConfig, temps: TemperatureBank,
               cache: list = None) -> StageReport:
    """Joint hard-label + softened-prediction training of the whole student.

    With lambda_weight = 0 this is plain multi-label training and the teacher
    is never consulted (the baseline arm).
    """
    use_teacher = cfg.lambda_weight > 0
    if use_teacher and not teacher.frozen:
        raise ContractError("teacher must be frozen before stage 2")
    if cfg.require_stage1 and not student.stage1_trained:
        raise StateError("stage-1 conv parameters required: run stage 1 first or load its checkpoint")
    fastops.tune_allocator()
    rng = np.random.default_rng(cfg.seed + 1)
    student.reinit_heads(rng)
    if use_teacher:
        train_ds.ensure_proposals(teacher.cfg.proposal_cfg)
        if cache is None and cfg.cache_teacher:
            cache = build_teacher_cache(teacher, train_ds, cfg)

    opt_w = SGD(student.parameters(), lr=cfg.stage2_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    opt_t = SGD(temps.parameters(), lr=cfg.stage2_lr, momentum=cfg.momentum,
                weight_decay=0.0, clamp_min=TEMPERATURE_FLOOR)
    report = StageReport(stage=2, seed=cfg.seed,
                         losses={"hard": [], "soft": [], "val_hard": []})
    best_val = np.inf
    stall = 0
    start = time.perf_counter()

    for epoch in range(cfg.stage2_epochs):
        hard_sum = soft_sum = 0.0
        seen = 0
        for idx in batches(len(train_ds), cfg.batch_size, rng):
            n = len(idx)
            logits = student.forward_batch(Tensor(train_ds.images[idx]))
            p = T.sigmoid(logits)
            l_hard = hard_loss(p, train_ds.labels[idx])
            if use_teacher:
                entries = [_teacher_entry(teacher, train_ds, cache, row, cfg) for row in idx]
                p_t = soft_target_batch(entries, temps)
                p_s = T.tempered_sigmoid(logits, temps.t.tensor)
                l_soft = prediction_distill_loss(p_t, p_s)
            else:
                l_soft = Tensor(np.zeros((), dtype=np.float64))
            loss = combined_loss(l_hard, l_soft, cfg.lambda_weight)
            opt_w.zero_grad()
            opt_t.zero_grad()
            loss.backward()
            opt_w.step()
            opt_t.step()
            hard_sum += l_hard.item() * n
            soft_sum += l_soft.item() * n
            seen += n
        report.losses["hard"].append(hard_sum / seen)
        report.losses["soft"].append(soft_sum / seen)
        val = _validation_hard_loss(student, val_ds, cfg.batch_size)
        report.losses["val_hard"].append(val)
        report.epochs_run = epoch + 1
        if val < best_val - cfg.plateau_min_delta:
            best_val = val
            stall = 0
        else:
            stall += 1
            if stall >= cfg.plateau_epochs:
                opt_w.lr *= cfg.lr_decay
                opt_t.lr *= cfg.lr_decay
                stall = 0
    report.wall_time = time.perf_counter() - start
    report.final_temperatures = temps.values()
    return report


def _validation_hard_loss(student: StudentModel, val_ds: ArrayDataset, batch_size: int) -> float:
    total = 0.0
    with T.no_grad():
        for idx in batches(len(val_ds), batch_size):
            logits = student.forward_batch(Tensor(val_ds.images[idx]))
            total += hard_loss(T.sigmoid(logits), val_ds.labels[idx]).item() * len(idx)
    return total / len(val_ds)
