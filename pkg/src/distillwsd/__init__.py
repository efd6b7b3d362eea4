"""Cross-task distillation from a weakly-supervised detector into a
multi-label classifier, at desk scale on synthetic scenes."""

__version__ = "0.1.0"

from .tensor import (  # noqa: F401
    Parameter,
    Tensor,
    conv2d,
    linear,
    max_pool2d,
    no_grad,
    sigmoid,
    softmax,
    tempered_sigmoid,
    tempered_softmax,
)
from .regions import Box, ProposalConfig, ProposalSet, generate_proposals, iou, nms, roi_pool  # noqa: F401
