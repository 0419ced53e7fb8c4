"""Training-target strategies: one-hot, label smoothing, and instance-dependent
label-confusion targets.

The confusion route scores how much the current instance resembles each
class (dot products against the label representation matrix, passed through
a small dense head and a softmax) and mixes that distribution with the
one-hot truth under a strength knob ``alpha``; the result replaces the
one-hot vector as the supervision target under a KL loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, softmax
from .encoders import glorot_uniform


class TargetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OneHot:
    pass


@dataclass(frozen=True)
class LabelSmoothing:
    epsilon: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise TargetError(f"label smoothing epsilon must be in (0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class LabelConfusion:
    alpha: float = 4.0
    stop_epoch: int | None = None
    stop_gradient_to_target: bool = False

    def __post_init__(self):
        if self.alpha < 0.5:
            raise TargetError(f"alpha must be at least 0.5, got {self.alpha}")
        if self.stop_epoch is not None and self.stop_epoch < 1:
            raise TargetError(f"stop_epoch must be positive, got {self.stop_epoch}")


TargetStrategy = OneHot | LabelSmoothing | LabelConfusion


def strategy_label(strategy: TargetStrategy) -> str:
    if isinstance(strategy, OneHot):
        return "one-hot"
    if isinstance(strategy, LabelSmoothing):
        return f"ls({strategy.epsilon:g})"
    if isinstance(strategy, LabelConfusion):
        stop = f",stop={strategy.stop_epoch}" if strategy.stop_epoch is not None else ""
        return f"lcm({strategy.alpha:g}{stop})"
    raise TargetError(f"unknown strategy {strategy!r}")


def parse_strategy(doc: dict) -> TargetStrategy:
    """Build a strategy from a config mapping like {"kind": "lcm", "alpha": 4}."""
    known = {"kind", "epsilon", "alpha", "stop_epoch", "stop_gradient_to_target"}
    unknown = set(doc) - known
    if unknown:
        raise TargetError(f"unknown strategy keys {sorted(unknown)}")
    kind = doc.get("kind")
    if kind == "one-hot":
        return OneHot()
    if kind == "ls":
        return LabelSmoothing(epsilon=float(r) if (r := doc.get("epsilon")) is not None else 0.1)
    if kind == "lcm":
        return LabelConfusion(
            alpha=float(doc.get("alpha", 4.0)),
            stop_epoch=int(s) if (s := doc.get("stop_epoch")) is not None else None,
            stop_gradient_to_target=bool(doc.get("stop_gradient_to_target", False)),
        )
    raise TargetError(f"unknown strategy kind {kind!r} (expected one-hot, ls or lcm)")


# ---------------------------------------------------------------------------
# head parameters
# ---------------------------------------------------------------------------

@dataclass
class LcmHeadParams:
    """Dense C -> C map applied to the instance-label similarity scores."""

    weight: Tensor  # C x C
    bias: Tensor    # C

    @classmethod
    def create(cls, num_classes: int, rng: np.random.Generator) -> "LcmHeadParams":
        return cls(
            weight=Tensor(glorot_uniform(rng, num_classes, num_classes), requires_grad=True,
                          name="lcm.weight"),
            bias=Tensor(np.zeros(num_classes), requires_grad=True, name="lcm.bias"),
        )

    def named(self) -> dict[str, Tensor]:
        return {"lcm.weight": self.weight, "lcm.bias": self.bias}


# ---------------------------------------------------------------------------
# target distributions
# ---------------------------------------------------------------------------

@dataclass
class TargetDistribution:
    """A per-example training target; ``tensor`` is set when the values stay
    connected to a tape (confusion targets with gradients enabled)."""

    values: np.ndarray
    provenance: str
    tensor: Tensor | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or np.any(v < 0.0) or abs(v.sum() - 1.0) > 1e-9:
            raise TargetError(f"invalid target distribution (sum {v.sum()!r})")
        self.values = v


def one_hot_values(class_id: int, num_classes: int) -> np.ndarray:
    if not (0 <= class_id < num_classes):
        raise TargetError(f"class_id {class_id} out of range for {num_classes} classes")
    v = np.zeros(num_classes)
    v[class_id] = 1.0
    return v


def one_hot_target(class_id: int, num_classes: int) -> TargetDistribution:
    return TargetDistribution(one_hot_values(class_id, num_classes), "one-hot")


def label_smoothing_target(class_id: int, num_classes: int, epsilon: float) -> TargetDistribution:
    if not (0.0 < epsilon < 1.0):
        raise TargetError(f"epsilon must be in (0, 1), got {epsilon}")
    values = (1.0 - epsilon) * one_hot_values(class_id, num_classes) + epsilon / num_classes
    return TargetDistribution(values, f"label-smoothing({epsilon:g})")


def label_confusion_distribution(text_repr: Tensor, label_matrix: Tensor,
                                 head: LcmHeadParams, tape: Tape) -> Tensor:
    """Confusion distribution for one instance: softmax(W @ (V_label @ v) + b)."""
    d = text_repr.data.shape[-1]
    if label_matrix.data.ndim != 2 or label_matrix.data.shape[1] != d:
        raise ShapeError(
            f"label_confusion_distribution: label matrix {tuple(label_matrix.data.shape)} "
            f"does not match representation of dimension {d}")
    similarity = tape.apply_primitive("matmul", label_matrix, text_repr)        # (C,)
    logits = tape.apply_primitive("matmul", head.weight, similarity)
    logits = tape.apply_primitive("add", logits, head.bias)
    return tape.apply_primitive("softmax", logits)


def simulated_label_distribution(one_hot: np.ndarray, confusion: Tensor, alpha: float,
                                 tape: Tape) -> Tensor:
    """Training target: softmax(alpha * one_hot + confusion)."""
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if not _is_one_hot(one_hot):
        raise TargetError("simulated_label_distribution: first argument must be one-hot")
    if one_hot.shape != confusion.data.shape:
        raise ShapeError(
            f"simulated_label_distribution: shapes {tuple(one_hot.shape)} vs "
            f"{tuple(confusion.data.shape)}")
    anchored = tape.constant(alpha * one_hot)
    return tape.apply_primitive("softmax",
                                tape.apply_primitive("add", anchored, confusion))


def simulated_values(one_hot: np.ndarray, confusion: np.ndarray, alpha: float) -> np.ndarray:
    """Plain-array version of the simulated distribution (no tape)."""
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if not _is_one_hot(one_hot):
        raise TargetError("simulated_values: first argument must be one-hot")
    return softmax(alpha * one_hot + np.asarray(confusion, dtype=np.float64))


def _is_one_hot(v: np.ndarray) -> bool:
    return v.ndim == 1 and np.all((v == 0.0) | (v == 1.0)) and v.sum() == 1.0


def lcm_loss(target: Tensor, predicted: Tensor, tape: Tape) -> Tensor:
    """KL(target || predicted); gradient flows into both branches unless the
    caller detached the target."""
    return tape.apply_primitive("kl_div", target, predicted)


def make_target(strategy: TargetStrategy, class_id: int, num_classes: int,
                text_repr: Tensor | None = None, label_matrix: Tensor | None = None,
                head: LcmHeadParams | None = None, epoch: int = 0,
                tape: Tape | None = None) -> TargetDistribution:
    """Produce the training target for one example under the given strategy.

    The confusion variant needs the encoder outputs and a tape; with
    ``stop_epoch`` set, epochs at or past it fall back to the plain one-hot
    target.
    """
    if isinstance(strategy, OneHot):
        return one_hot_target(class_id, num_classes)
    if isinstance(strategy, LabelSmoothing):
        return label_smoothing_target(class_id, num_classes, strategy.epsilon)
    if not isinstance(strategy, LabelConfusion):
        raise TargetError(f"unknown strategy {strategy!r}")
    if strategy.stop_epoch is not None and epoch >= strategy.stop_epoch:
        return one_hot_target(class_id, num_classes)
    if text_repr is None or label_matrix is None or head is None or tape is None:
        raise TargetError("confusion targets need text_repr, label_matrix, head and tape")
    confusion = label_confusion_distribution(text_repr, label_matrix, head, tape)
    simulated = simulated_label_distribution(one_hot_values(class_id, num_classes),
                                             confusion, strategy.alpha, tape)
    if strategy.stop_gradient_to_target:
        simulated = tape.constant(simulated.data.copy())
    return TargetDistribution(simulated.data.copy(),
                              f"lcm(alpha={strategy.alpha:g})", tensor=simulated)


def batch_targets(strategy: TargetStrategy, label_ids: np.ndarray, num_classes: int,
                  text_reprs: Tensor | None, label_matrix: Tensor | None,
                  head: LcmHeadParams | None, epoch: int,
                  tape: Tape) -> tuple[Tensor, bool]:
    """Target matrix (B x C) for a whole batch; row b equals make_target on
    example b. Returns (targets, confusion_active)."""
    one_hot_rows = np.zeros((len(label_ids), num_classes))
    one_hot_rows[np.arange(len(label_ids)), label_ids] = 1.0
    if isinstance(strategy, OneHot):
        return tape.constant(one_hot_rows), False
    if isinstance(strategy, LabelSmoothing):
        return tape.constant((1.0 - strategy.epsilon) * one_hot_rows
                             + strategy.epsilon / num_classes), False
    if not isinstance(strategy, LabelConfusion):
        raise TargetError(f"unknown strategy {strategy!r}")
    if strategy.stop_epoch is not None and epoch >= strategy.stop_epoch:
        return tape.constant(one_hot_rows), False
    if text_reprs is None or label_matrix is None or head is None:
        raise TargetError("confusion targets need text_reprs, label_matrix and head")
    similarity = tape.apply_primitive("matmul", text_reprs,
                                      tape.apply_primitive("transpose", label_matrix))
    logits = tape.apply_primitive("add_row",
                                  tape.apply_primitive(
                                      "matmul", similarity,
                                      tape.apply_primitive("transpose", head.weight)),
                                  head.bias)
    confusion = tape.apply_primitive("softmax", logits)
    anchored = tape.constant(strategy.alpha * one_hot_rows)
    simulated = tape.apply_primitive("softmax",
                                     tape.apply_primitive("add", anchored, confusion))
    if strategy.stop_gradient_to_target:
        simulated = tape.constant(simulated.data.copy())
    return simulated, True
