"""lcmlab: a desk-scale lab for soft classification targets.

Trains small pooled-embedding classifiers against one-hot targets, label
smoothing, and instance-dependent label-confusion distributions, with a
repeated-split comparison protocol, within-group label-noise injection and a
synthetic confusable-corpus generator.
"""

from .autodiff import Tape, Tensor, backprop, grad_check, kl_divergence, softmax
from .targets import LabelConfusion, LabelSmoothing, OneHot, TargetStrategy

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backprop", "grad_check", "kl_divergence", "softmax",
    "OneHot", "LabelSmoothing", "LabelConfusion", "TargetStrategy",
    "__version__",
]
