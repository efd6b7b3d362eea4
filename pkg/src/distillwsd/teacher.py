"""Region-based weakly-supervised detection teacher.

A small conv stack feeds score-weighted RoI features into a shared fc layer
and two K-logit heads.  The classification head is softmaxed over classes
per proposal, the detection head over proposals per class; their elementwise
product is the fused score matrix.  Summing fused scores over proposals
gives the image-level prediction, summing over classes gives per-proposal
objectness.  Only image-level labels are ever used for training.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import fastops
from .dataset import ArrayDataset, batches
from .errors import ContractError, InputError
from .optim import SGD, init_param
from .regions import ProposalConfig, ProposalSet, nms, weighted_roi_features_batch
from .tensor import Tensor

CONV_BLOCKS = ("conv1", "conv2", "conv3")


@dataclass
class TeacherConfig:
    num_classes: int = 10
    input_size: int = 64
    channels: tuple = (16, 32, 64)
    roi_out: tuple = (7, 7)
    fc_width: int = 128
    top_n: int = 64
    proposal_cfg: ProposalConfig = None
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    input_scales: tuple = (64,)  # optional two-scale training, e.g. (64, 96)
    seed: int = 0

    def __post_init__(self):
        if self.proposal_cfg is None:
            self.proposal_cfg = ProposalConfig(top_n=self.top_n)
        else:
            self.proposal_cfg.top_n = self.top_n


@dataclass
class ScoreBundle:
    """Per-image teacher outputs; all fields are tape tensors."""

    m_c: Tensor  # (|R|, K) classification-branch logits
    m_d: Tensor  # (|R|, K) detection-branch logits
    s_c: Tensor  # softmax over classes, rows sum to 1
    s_d: Tensor  # softmax over proposals, columns sum to 1
    s: Tensor    # fused s_c * s_d
    p: Tensor    # (K,) image-level prediction
    s_prime: Tensor  # (|R|,) per-proposal objectness


class TeacherModel:
    def __init__(self, cfg: TeacherConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self._params = {}
        c_in = 3
        for name, c_out in zip(CONV_BLOCKS, cfg.channels):
            self._add(init_param(rng, f"{name}.weight", (c_out, c_in, 3, 3), "he", dtype))
            self._add(init_param(rng, f"{name}.bias", (c_out,), "zeros", dtype))
            c_in = c_out
        d = cfg.channels[-1] * cfg.roi_out[0] * cfg.roi_out[1]
        self._add(init_param(rng, "fc.weight", (cfg.fc_width, d), "xavier", dtype))
        self._add(init_param(rng, "fc.bias", (cfg.fc_width,), "zeros", dtype))
        for head in ("cls_head", "det_head"):
            self._add(init_param(rng, f"{head}.weight", (cfg.num_classes, cfg.fc_width), "xavier", dtype))
            self._add(init_param(rng, f"{head}.bias", (cfg.num_classes,), "zeros", dtype))

    def _add(self, p):
        if p.name in self._params:
            raise ContractError(f"duplicate parameter name {p.name}")
        self._params[p.name] = p

    def parameters(self):
        return list(self._params.values())

    def param(self, name: str):
        return self._params[name]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self._params.values())

    def freeze(self):
        for p in self._params.values():
            p.freeze()

    def state_arrays(self):
        return {name: p.tensor.data for name, p in self._params.items()}

    # -- forward pieces ---------------------------------------------------------
    def conv_features(self, images: Tensor) -> dict:
        """Run the conv stack; returns every block's post-pool feature map."""
        feats = {}
        h = images
        for name in CONV_BLOCKS:
            h = T.conv2d(h, self.param(f"{name}.weight").tensor, self.param(f"{name}.bias").tensor,
                         stride=1, pad=1)
            h = T.max_pool2d(T.relu(h), 2, 2)
            feats[name] = h
        return feats

    def head_logits(self, pooled_flat: Tensor):
        hidden = T.relu(T.linear(pooled_flat, self.param("fc.weight").tensor,
                                 self.param("fc.bias").tensor))
        m_c = T.linear(hidden, self.param("cls_head.weight").tensor, self.param("cls_head.bias").tensor)
        m_d = T.linear(hidden, self.param("det_head.weight").tensor, self.param("det_head.bias").tensor)
        return m_c, m_d

    def forward_batch(self, images: Tensor, proposal_sets) -> list:
        """ScoreBundle per image; the conv stack and heads run batched."""
        n = images.shape[0]
        hw = (images.shape[2], images.shape[3])
        top_n = self.cfg.top_n
        for props in proposal_sets:
            if len(props) != top_n:
                raise ContractError(f"expected {top_n} proposals per image, got {len(props)}")
        fmap = self.conv_features(images)[CONV_BLOCKS[-1]]
        flat_dim = self.cfg.channels[-1] * self.cfg.roi_out[0] * self.cfg.roi_out[1]
        pooled = weighted_roi_features_batch(
            fmap, [ps.box_array() for ps in proposal_sets],
            [ps.score_array() for ps in proposal_sets], self.cfg.roi_out, hw)
        m_c_all, m_d_all = self.head_logits(T.reshape(pooled, (n * top_n, flat_dim)))
        bundles = []
        for i in range(n):
            bundles.append(fuse_scores(m_c_all[i * top_n:(i + 1) * top_n],
                                       m_d_all[i * top_n:(i + 1) * top_n]))
        return bundles


def fuse_scores(m_c: Tensor, m_d: Tensor) -> ScoreBundle:
    """Two-branch fusion from the per-proposal logit matrices."""
    s_c = T.softmax(m_c, axis=1)
    s_d = T.softmax(m_d, axis=0)
    s = s_c * s_d
    return ScoreBundle(m_c=m_c, m_d=m_d, s_c=s_c, s_d=s_d, s=s,
                       p=s.sum(axis=0), s_prime=s.sum(axis=1))


def teacher_forward(model: TeacherModel, image, proposals: ProposalSet) -> ScoreBundle:
    """Single-image forward; `image` is (3, H, W) array or Tensor."""
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.dtype))
    return model.forward_batch(T.reshape(image, (1,) + tuple(image.shape)), [proposals])[0]


def teacher_softened_prediction(bundle: ScoreBundle, t_c: Tensor, t_d: Tensor) -> Tensor:
    """Image-level prediction rebuilt from temperature-softened branch softmaxes.

    Gradients flow into the temperatures; the logits are used as constants so
    frozen teacher weights stay out of the tape.
    """
    m_c = bundle.m_c.detach() if isinstance(bundle.m_c, Tensor) else Tensor(bundle.m_c)
    m_d = bundle.m_d.detach() if isinstance(bundle.m_d, Tensor) else Tensor(bundle.m_d)
    soft = T.tempered_softmax(m_c, t_c, "class") * T.tempered_softmax(m_d, t_d, "proposal")
    return soft.sum(axis=0)


def detect(model: TeacherModel, image, proposals: ProposalSet, iou_thresh: float = 0.4):
    """Per-class NMS over the fused score columns -> {class: [(Box, score), ...]}."""
    with T.no_grad():
        bundle = teacher_forward(model, image, proposals)
    s = bundle.s.data
    out = {}
    for k in range(s.shape[1]):
        keep = nms(proposals.boxes, s[:, k].tolist(), iou_thresh)
        out[k] = [(proposals.boxes[i], float(s[i, k])) for i in keep]
    return out


def predict_scores(model: TeacherModel, dataset: ArrayDataset, batch_size: int = 32) -> np.ndarray:
    """Image-level predictions over a dataset, gradient-free."""
    dataset.ensure_proposals(model.cfg.proposal_cfg)
    scores = np.zeros((len(dataset), model.cfg.num_classes), dtype=np.float64)
    with T.no_grad():
        for idx in batches(len(dataset), batch_size):
            images = Tensor(dataset.images[idx])
            bundles = model.forward_batch(images, [dataset.proposals[i] for i in idx])
            for row, b in zip(idx, bundles):
                scores[row] = b.p.data
    return scores


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    seed: int = 0
    wall_time: float = 0.0


def train_teacher(dataset: ArrayDataset, cfg: TeacherConfig) -> tuple:
    """SGD on per-class binary cross-entropy of the fused image prediction."""
    if len(dataset) == 0:
        raise InputError("empty dataset")
    from .distill import hard_loss  # local import: distill depends on teacher types

    fastops.tune_allocator()

    rng = np.random.default_rng(cfg.seed)
    model = TeacherModel(cfg, rng)
    dataset.ensure_proposals(cfg.proposal_cfg)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    report = TrainReport(seed=cfg.seed)
    start = time.perf_counter()
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        count = 0
        for idx in batches(len(dataset), cfg.batch_size, rng):
            images, proposal_sets, hw = _batch_at_scale(dataset, idx, cfg, rng)
            bundles = model.forward_batch(images, proposal_sets)
            p = T.concat([T.reshape(b.p, (1, cfg.num_classes)) for b in bundles], axis=0)
            loss = hard_loss(p, dataset.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
            count += len(idx)
        report.losses.append(epoch_loss / count)
    report.wall_time = time.perf_counter() - start
    return model, report


def _batch_at_scale(dataset: ArrayDataset, idx, cfg: TeacherConfig, rng: np.random.Generator):
    """Assemble a batch, optionally nearest-neighbor resized to a sampled scale."""
    imgs = dataset.images[idx]
    scale = int(rng.choice(cfg.input_scales)) if len(cfg.input_scales) > 1 else cfg.input_scales[0]
    h0, w0 = imgs.shape[2], imgs.shape[3]
    props = [dataset.proposals[i] for i in idx]
    if scale == h0:
        return Tensor(imgs), props, (h0, w0)
    rows = (np.arange(scale) * h0 // scale)
    cols = (np.arange(scale) * w0 // scale)
    resized = imgs[:, :, rows[:, None], cols[None, :]]
    factor = scale / h0
    from .regions import Box

    scaled_props = [
        ProposalSet(boxes=[Box(b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor)
                           for b in ps.boxes],
                    prior_scores=list(ps.prior_scores), image_id=ps.image_id)
        for ps in props
    ]
    return Tensor(resized), scaled_props, (scale, scale)
