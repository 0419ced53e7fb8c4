"""Mini-batch training with Adam, seeded reproducibility and the
confusion-target early-stop schedule.

A run is fully determined by (seed, config, data): parameter init comes from
the run seed, each epoch's shuffle from (seed, epoch index), and the
optimizer is plain Adam with bias correction. Test-time prediction reads
only the text encoder and classifier; the label encoder and confusion head
exist solely to shape the training targets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoders
from .autodiff import Tape, Tensor, backprop
from .data import Dataset
from .encoders import (ClassifierParams, LabelEncoderParams, TextEncoderParams,
                       decode_param_doc, encode_param_doc)
from .seeds import derive_seed
from .targets import (LabelConfusion, LcmHeadParams, TargetStrategy, batch_targets,
                      strategy_label)


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: TargetStrategy
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 128
    dim: int = 64
    max_len: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class Model:
    text_encoder: TextEncoderParams
    classifier: ClassifierParams
    label_encoder: LabelEncoderParams | None = None
    lcm_head: LcmHeadParams | None = None

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.text_encoder.named())
        params.update(self.classifier.named())
        if self.label_encoder is not None:
            params.update(self.label_encoder.named())
        if self.lcm_head is not None:
            params.update(self.lcm_head.named())
        return params


def init_model(num_classes: int, dim: int, seed: int, with_confusion: bool,
               vocab_size: int | None = None, feature_dim: int | None = None,
               pretrained_embedding: np.ndarray | None = None) -> Model:
    """Seeded parameter init; the text/classifier draws come first so models
    that differ only in the target strategy share their base initialisation."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    text = TextEncoderParams.create(dim, rng, vocab_size=vocab_size,
                                    feature_dim=feature_dim,
                                    pretrained_embedding=pretrained_embedding)
    clf = ClassifierParams.create(dim, num_classes, rng)
    label_enc = head = None
    if with_confusion:
        label_enc = LabelEncoderParams.create(num_classes, dim, rng)
        head = LcmHeadParams.create(num_classes, rng)
    return Model(text_encoder=text, classifier=clf, label_encoder=label_enc, lcm_head=head)


def model_from_params(arrays: dict[str, np.ndarray]) -> Model:
    """Rebuild a model from a checkpoint's named arrays. Confusion-side
    parameters are optional; their absence yields an inference-only model."""
    def tensor(name):
        return Tensor(arrays[name], requires_grad=True, name=name)

    text = TextEncoderParams(
        embedding=tensor("text.embedding") if "text.embedding" in arrays else None,
        hidden_w=tensor("text.hidden_w"),
        hidden_b=tensor("text.hidden_b"),
    )
    clf = ClassifierParams(weight=tensor("clf.weight"), bias=tensor("clf.bias"))
    label_enc = head = None
    if "label.embedding" in arrays:
        label_enc = LabelEncoderParams(embedding=tensor("label.embedding"),
                                       hidden_w=tensor("label.hidden_w"),
                                       hidden_b=tensor("label.hidden_b"))
    if "lcm.weight" in arrays:
        head = LcmHeadParams(weight=tensor("lcm.weight"), bias=tensor("lcm.bias"))
    return Model(text_encoder=text, classifier=clf, label_encoder=label_enc, lcm_head=head)


def inference_params(model: Model) -> dict[str, Tensor]:
    """Only what prediction needs: text encoder + classifier."""
    params = {}
    params.update(model.text_encoder.named())
    params.update(model.classifier.named())
    return params


def save_model(model: Model, path, inference_only: bool = False) -> None:
    params = inference_params(model) if inference_only else model.parameters()
    encoders.save_params(params, path)


def load_model(path) -> Model:
    return model_from_params(encoders.load_params(path))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})

    def to_doc(self) -> dict:
        doc = encode_param_doc({f"m.{k}": Tensor(v) for k, v in self.m.items()})
        doc.update(encode_param_doc({f"v.{k}": Tensor(v) for k, v in self.v.items()}))
        doc["t"] = self.t
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "AdamState":
        t = doc.pop("t")
        arrays = decode_param_doc(doc)
        doc["t"] = t
        m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
        return cls(m=m, v=v, t=int(t))


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors.

    Parameters missing from ``grads`` are treated as zero-gradient: their
    moments decay but they still move by the momentum tail.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name].data if name in grads else np.zeros_like(p.data)
        if np.any(np.isnan(g)):
            raise TrainError(f"NaN gradient for parameter {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        p.data = p.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lcm_active: bool


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_acc", "test_acc", "lcm_active"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc),
                                 repr(r.test_acc), int(r.lcm_active)])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        history = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                history.records.append(EpochRecord(
                    epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                    train_acc=float(row["train_acc"]), test_acc=float(row["test_acc"]),
                    lcm_active=bool(int(row["lcm_active"]))))
        return history


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _confusion_active(strategy: TargetStrategy, epoch: int) -> bool:
    return isinstance(strategy, LabelConfusion) and (
        strategy.stop_epoch is None or epoch < strategy.stop_epoch)


def train_epoch(model: Model, adam: AdamState, dataset: Dataset, config: TrainConfig,
                epoch: int, rng: np.random.Generator) -> tuple[float, bool]:
    """One pass over the dataset; returns (mean example loss, confusion targets active).

    The label matrix is encoded once per batch and shared across its
    examples; the final partial batch is included.
    """
    if not dataset.examples:
        raise TrainError("train_epoch: empty dataset")
    num_classes = dataset.num_classes
    order = rng.permutation(len(dataset.examples))
    params = model.parameters()
    active = _confusion_active(config.strategy, epoch)
    total_loss, total_examples = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        batch_idx = order[start:start + config.batch_size]
        batch = [dataset.examples[i] for i in batch_idx]
        labels = np.array([e.label_id for e in batch], dtype=np.int64)
        tape = Tape()
        tape.watch(*params.values())
        reprs = encoders.encode_text_batch(batch, model.text_encoder, tape)
        label_matrix = None
        if active:
            if model.label_encoder is None or model.lcm_head is None:
                raise TrainError("confusion strategy requires label encoder and head")
            label_matrix = encoders.encode_labels(num_classes, model.label_encoder, tape)
        targets, _ = batch_targets(config.strategy, labels, num_classes, reprs,
                                   label_matrix, model.lcm_head, epoch, tape)
        predicted = encoders.predict_distribution_batch(reprs, model.classifier, tape)
        per_example = tape.apply_primitive("kl_div", targets, predicted)
        loss = tape.apply_primitive("mean", per_example, axis=0)
        grads = backprop(tape, loss, params=params)
        adam_step(params, grads, adam, config)
        total_loss += float(loss.data) * len(batch)
        total_examples += len(batch)
    return total_loss / total_examples, active


def _check_labels(dataset: Dataset, num_classes: int, name: str) -> None:
    labels = dataset.labels()
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise TrainError(f"{name} split contains label ids outside [0, {num_classes})")


def train_run(train_set: Dataset, test_set: Dataset, config: TrainConfig,
              model: Model | None = None, adam: AdamState | None = None,
              start_epoch: int = 0, vocab_size: int | None = None,
              pretrained_embedding: np.ndarray | None = None) -> tuple[Model, TrainHistory]:
    """Train for ``config.epochs`` epochs and evaluate test accuracy each epoch.

    ``model``/``adam``/``start_epoch`` allow resuming from a checkpoint; epoch
    indices stay absolute so shuffles and the early-stop schedule line up with
    an uninterrupted run.
    """
    if train_set.label_names != test_set.label_names:
        raise TrainError("train/test splits disagree on label names")
    num_classes = train_set.num_classes
    _check_labels(train_set, num_classes, "train")
    _check_labels(test_set, num_classes, "test")

    if model is None:
        feature_dim = train_set.feature_dim
        if feature_dim is None and vocab_size is None:
            vocab_size = 1 + max(max(e.token_ids) for e in train_set.examples + test_set.examples)
        model = init_model(num_classes, config.dim, config.seed,
                           with_confusion=isinstance(config.strategy, LabelConfusion),
                           vocab_size=vocab_size, feature_dim=feature_dim,
                           pretrained_embedding=pretrained_embedding)
    if adam is None:
        adam = AdamState.create(model.parameters())

    history = TrainHistory()
    for epoch in range(start_epoch, start_epoch + config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch))
        train_loss, active = train_epoch(model, adam, train_set, config, epoch, rng)
        train_acc = float(np.mean(
            encoders.predict_ids(train_set.examples, model.text_encoder, model.classifier)
            == train_set.labels()))
        test_acc = float(np.mean(
            encoders.predict_ids(test_set.examples, model.text_encoder, model.classifier)
            == test_set.labels()))
        history.records.append(EpochRecord(epoch=epoch, train_loss=train_loss,
                                           train_acc=train_acc, test_acc=test_acc,
                                           lcm_active=active))
    return model, history


def run_label(config: TrainConfig) -> str:
    return strategy_label(config.strategy)


def with_strategy(config: TrainConfig, strategy: TargetStrategy) -> TrainConfig:
    return replace(config, strategy=strategy)
