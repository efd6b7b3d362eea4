"""Plain multi-label classification student with sigmoid outputs.

The conv stack mirrors the teacher's so feature transfer can use an identity
transform; a channel-mismatched variant routes distilled layers through a
learned 1x1 conv instead.  Test-time prediction needs nothing but this model.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import ArrayDataset, batches
from .errors import ContractError
from .optim import init_param
from .regions import weighted_roi_features
from .tensor import Tensor

CONV_BLOCKS = ("conv1", "conv2", "conv3")


@dataclass
class StudentConfig:
    num_classes: int = 10
    input_size: int = 64
    channels: tuple = (16, 32, 64)
    teacher_channels: tuple = (16, 32, 64)  # per-block targets for the transform
    fc_width: int = 128
    seed: int = 0


@dataclass
class StudentOutput:
    m: Tensor       # (K,) logits
    p: Tensor       # sigmoid(m)
    p_soft: Tensor  # tempered sigmoid at the current temperatures


class StudentModel:
    def __init__(self, cfg: StudentConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.stage1_trained = False
        self._params = {}
        c_in = 3
        for name, c_out in zip(CONV_BLOCKS, cfg.channels):
            self._add(init_param(rng, f"{name}.weight", (c_out, c_in, 3, 3), "he", dtype))
            self._add(init_param(rng, f"{name}.bias", (c_out,), "zeros", dtype))
            c_in = c_out
        # 1x1 transform per block wherever the channel counts differ
        for name, c_own, c_teacher in zip(CONV_BLOCKS, cfg.channels, cfg.teacher_channels):
            if c_own != c_teacher:
                self._add(init_param(rng, f"psi.{name}.weight", (c_teacher, c_own, 1, 1), "he", dtype))
                self._add(init_param(rng, f"psi.{name}.bias", (c_teacher,), "zeros", dtype))
        spatial = cfg.input_size // 2 ** len(CONV_BLOCKS)
        d = cfg.channels[-1] * spatial * spatial
        self._flat_dim = d
        self._add(init_param(rng, "fc.weight", (cfg.fc_width, d), "xavier", dtype))
        self._add(init_param(rng, "fc.bias", (cfg.fc_width,), "zeros", dtype))
        self._add(init_param(rng, "head.weight", (cfg.num_classes, cfg.fc_width), "xavier", dtype))
        self._add(init_param(rng, "head.bias", (cfg.num_classes,), "zeros", dtype))

    def _add(self, p):
        if p.name in self._params:
            raise ContractError(f"duplicate parameter name {p.name}")
        self._params[p.name] = p

    def parameters(self):
        return list(self._params.values())

    def conv_parameters(self):
        """Backbone plus transform parameters; what feature transfer updates."""
        return [p for name, p in self._params.items()
                if name.split(".")[0] in CONV_BLOCKS or name.startswith("psi.")]

    def head_parameters(self):
        return [p for name, p in self._params.items() if name.split(".")[0] in ("fc", "head")]

    def state_arrays(self):
        return {name: p.tensor.data for name, p in self._params.items()}

    def param(self, name: str):
        return self._params[name]

    def reinit_heads(self, rng: np.random.Generator):
        """Fresh fan-balanced uniform heads (used at the start of stage 2)."""
        for p in self.head_parameters():
            fresh = init_param(rng, p.name, p.tensor.data.shape,
                               "xavier" if p.name.endswith("weight") else "zeros", self.dtype)
            p.tensor.data[...] = fresh.tensor.data

    # -- forward ------------------------------------------------------------------
    def conv_features(self, images: Tensor) -> dict:
        feats = {}
        h = images
        for name in CONV_BLOCKS:
            h = T.conv2d(h, self.param(f"{name}.weight").tensor, self.param(f"{name}.bias").tensor,
                         stride=1, pad=1)
            h = T.max_pool2d(T.relu(h), 2, 2)
            feats[name] = h
        return feats

    def transform(self, fmap: Tensor, layer: str) -> Tensor:
        """Identity when channels already match the teacher, else the 1x1 conv."""
        key = f"psi.{layer}.weight"
        if key not in self._params:
            return fmap
        squeezed = fmap.ndim == 3
        if squeezed:
            fmap = T.reshape(fmap, (1,) + tuple(fmap.shape))
        out = T.conv2d(fmap, self._params[key].tensor, self._params[f"psi.{layer}.bias"].tensor,
                       stride=1, pad=0)
        return out[0] if squeezed else out

    def forward_batch(self, images: Tensor) -> Tensor:
        """(N, 3, H, W) -> logits (N, K)."""
        if images.shape[2] != self.cfg.input_size or images.shape[3] != self.cfg.input_size:
            raise ContractError(
                f"student expects {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {images.shape[2]}x{images.shape[3]}")
        h = self.conv_features(images)[CONV_BLOCKS[-1]]
        h = T.relu(T.linear(T.reshape(h, (images.shape[0], self._flat_dim)),
                            self.param("fc.weight").tensor, self.param("fc.bias").tensor))
        return T.linear(h, self.param("head.weight").tensor, self.param("head.bias").tensor)


def student_forward(model: StudentModel, image, temps: Tensor = None) -> StudentOutput:
    """Single-image forward.  `temps` are the per-class sigmoid temperatures;
    omitted means 1 everywhere, making p_soft coincide with p."""
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.dtype))
    m = model.forward_batch(T.reshape(image, (1,) + tuple(image.shape)))[0]
    p = T.sigmoid(m)
    p_soft = T.tempered_sigmoid(m, temps) if temps is not None else p
    return StudentOutput(m=m, p=p, p_soft=p_soft)


def student_conv_features(model: StudentModel, image, boxes, s_prime, roi_out, layer: str = "conv3"):
    """Transformed, objectness-weighted RoI features of one image.

    Only backbone and transform parameters enter this graph, so feature-level
    training can never touch the classifier head.
    """
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.dtype))
    hw = (image.shape[1], image.shape[2])
    feats = model.conv_features(T.reshape(image, (1,) + tuple(image.shape)))
    fmap = model.transform(feats[layer][0], layer)
    expected = model.cfg.teacher_channels[CONV_BLOCKS.index(layer)]
    if fmap.shape[0] != expected:
        raise ContractError(
            f"transform produced {fmap.shape[0]} channels at {layer}, teacher has {expected}")
    return weighted_roi_features(fmap, boxes, s_prime, roi_out, hw)


def predict_labels(p, tau: float) -> np.ndarray:
    """Threshold scores into a binary label vector: 1 iff p_k > tau (strict)."""
    if not 0 < tau < 1:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    return (p > tau).astype(np.int64)


def predict_scores(model: StudentModel, dataset: ArrayDataset, batch_size: int = 64) -> np.ndarray:
    """Sigmoid scores over a dataset; teacher-free by construction."""
    scores = np.zeros((len(dataset), model.cfg.num_classes), dtype=np.float64)
    with T.no_grad():
        for idx in batches(len(dataset), batch_size):
            logits = model.forward_batch(Tensor(dataset.images[idx]))
            scores[idx] = 1.0 / (1.0 + np.exp(-logits.data))
    return scores
