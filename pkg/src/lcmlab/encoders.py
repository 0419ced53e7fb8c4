"""Text encoder, label encoder and softmax classifier.

The text encoder is a pooled bag of embeddings: gather rows for the true
(unpadded) token sequence, mean-pool, then one tanh layer. The label encoder
applies the same embedding-plus-tanh-layer shape to the class indices
themselves, producing one representation row per class in class-index order.
Both per-example and batched forward paths are provided; they compute the
same function (the batched path exists because training happens in
mini-batches).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, softmax

EMBED_INIT_BOUND = 0.05


class EncoderError(ValueError):
    pass


def uniform_embedding(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.uniform(-EMBED_INIT_BOUND, EMBED_INIT_BOUND, size=(rows, dim))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------

@dataclass
class TextEncoderParams:
    """Embedding table (token path), or a plain hidden layer (vector path)."""

    embedding: Tensor | None   # |V| x d; None for fixed-length feature inputs
    hidden_w: Tensor           # d x input_dim
    hidden_b: Tensor           # d

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, vocab_size: int | None = None,
               feature_dim: int | None = None,
               pretrained_embedding: np.ndarray | None = None) -> "TextEncoderParams":
        if dim < 1:
            raise EncoderError("dim must be >= 1")
        if (vocab_size is None) == (feature_dim is None):
            raise EncoderError("exactly one of vocab_size / feature_dim required")
        embedding = None
        input_dim = feature_dim
        if vocab_size is not None:
            table = (pretrained_embedding if pretrained_embedding is not None
                     else uniform_embedding(rng, vocab_size, dim))
            if table.shape != (vocab_size, dim):
                raise EncoderError(f"embedding table shape {table.shape} != ({vocab_size}, {dim})")
            embedding = Tensor(np.array(table, dtype=np.float64), requires_grad=True,
                               name="text.embedding")
            input_dim = dim
        return cls(
            embedding=embedding,
            hidden_w=Tensor(glorot_uniform(rng, dim, input_dim), requires_grad=True,
                            name="text.hidden_w"),
            hidden_b=Tensor(np.zeros(dim), requires_grad=True, name="text.hidden_b"),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"text.hidden_w": self.hidden_w, "text.hidden_b": self.hidden_b}
        if self.embedding is not None:
            out["text.embedding"] = self.embedding
        return out


@dataclass
class LabelEncoderParams:
    """Per-class embedding plus one tanh layer; row k belongs to class k."""

    embedding: Tensor   # C x d
    hidden_w: Tensor    # d x d
    hidden_b: Tensor    # d

    @classmethod
    def create(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "LabelEncoderParams":
        if num_classes < 2:
            raise EncoderError("label encoder needs at least 2 classes")
        return cls(
            embedding=Tensor(uniform_embedding(rng, num_classes, dim), requires_grad=True,
                             name="label.embedding"),
            hidden_w=Tensor(glorot_uniform(rng, dim, dim), requires_grad=True,
                            name="label.hidden_w"),
            hidden_b=Tensor(np.zeros(dim), requires_grad=True, name="label.hidden_b"),
        )

    def named(self) -> dict[str, Tensor]:
        return {"label.embedding": self.embedding, "label.hidden_w": self.hidden_w,
                "label.hidden_b": self.hidden_b}


@dataclass
class ClassifierParams:
    weight: Tensor  # d x C
    bias: Tensor    # C

    @classmethod
    def create(cls, dim: int, num_classes: int, rng: np.random.Generator) -> "ClassifierParams":
        return cls(
            weight=Tensor(glorot_uniform(rng, dim, num_classes), requires_grad=True,
                          name="clf.weight"),
            bias=Tensor(np.zeros(num_classes), requires_grad=True, name="clf.bias"),
        )

    def named(self) -> dict[str, Tensor]:
        return {"clf.weight": self.weight, "clf.bias": self.bias}


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------

def _token_bag(example) -> np.ndarray:
    return np.asarray(example.token_ids[:example.length], dtype=np.int64)


def encode_text(example, params: TextEncoderParams, tape: Tape) -> Tensor:
    """Representation vector for one example (length d)."""
    if example.token_ids is not None:
        if example.length is None or example.length < 1:
            raise EncoderError("encode_text: empty token sequence")
        if params.embedding is None:
            raise EncoderError("encode_text: token input but no embedding table")
        gathered = tape.apply_primitive("gather", params.embedding, ids=_token_bag(example))
        pooled = tape.apply_primitive("mean", gathered, axis=0)
    else:
        vec = np.asarray(example.feature_vector, dtype=np.float64)
        if vec.size == 0:
            raise EncoderError("encode_text: empty feature vector")
        pooled = tape.constant(vec)
    pre = tape.apply_primitive("matmul", params.hidden_w, pooled)
    pre = tape.apply_primitive("add", pre, params.hidden_b)
    return tape.apply_primitive("tanh", pre)


def encode_text_batch(examples, params: TextEncoderParams, tape: Tape) -> Tensor:
    """Representation matrix (B x d) for a batch; same math as encode_text."""
    if not examples:
        raise EncoderError("encode_text_batch: empty batch")
    if examples[0].token_ids is not None:
        if params.embedding is None:
            raise EncoderError("encode_text_batch: token input but no embedding table")
        bags = tuple(_token_bag(e) for e in examples)
        pooled = tape.apply_primitive("bag_mean", params.embedding, bags=bags)
    else:
        pooled = tape.constant(np.stack([e.feature_vector for e in examples]))
    w_t = tape.apply_primitive("transpose", params.hidden_w)
    pre = tape.apply_primitive("add_row", tape.apply_primitive("matmul", pooled, w_t),
                               params.hidden_b)
    return tape.apply_primitive("tanh", pre)


def encode_labels(num_classes: int, params: LabelEncoderParams, tape: Tape) -> Tensor:
    """Label representation matrix (C x d), rows in class-index order."""
    if num_classes < 2:
        raise EncoderError("encode_labels: need at least 2 classes")
    if params.embedding.data.shape[0] != num_classes:
        raise ShapeError(
            f"encode_labels: embedding has {params.embedding.data.shape[0]} rows, "
            f"expected {num_classes}")
    gathered = tape.apply_primitive("gather", params.embedding,
                                    ids=np.arange(num_classes, dtype=np.int64))
    w_t = tape.apply_primitive("transpose", params.hidden_w)
    pre = tape.apply_primitive("add_row", tape.apply_primitive("matmul", gathered, w_t),
                               params.hidden_b)
    return tape.apply_primitive("tanh", pre)


def predict_distribution(text_repr: Tensor, params: ClassifierParams, tape: Tape) -> Tensor:
    """Predicted class distribution for one representation vector."""
    logits = tape.apply_primitive("matmul", text_repr, params.weight)
    logits = tape.apply_primitive("add", logits, params.bias)
    return tape.apply_primitive("softmax", logits)


def predict_distribution_batch(text_reprs: Tensor, params: ClassifierParams,
                               tape: Tape) -> Tensor:
    logits = tape.apply_primitive("add_row",
                                  tape.apply_primitive("matmul", text_reprs, params.weight),
                                  params.bias)
    return tape.apply_primitive("softmax", logits)


# --- tape-free inference (test-time prediction never needs gradients) ---

def text_representations(examples, params: TextEncoderParams) -> np.ndarray:
    if examples and examples[0].token_ids is not None:
        pooled = np.stack([params.embedding.data[_token_bag(e)].mean(axis=0)
                           for e in examples])
    else:
        pooled = np.stack([e.feature_vector for e in examples])
    return np.tanh(pooled @ params.hidden_w.data.T + params.hidden_b.data)


def predict_proba(examples, text_params: TextEncoderParams,
                  clf_params: ClassifierParams) -> np.ndarray:
    reprs = text_representations(examples, text_params)
    return softmax(reprs @ clf_params.weight.data + clf_params.bias.data)


def predict_ids(examples, text_params: TextEncoderParams,
                clf_params: ClassifierParams) -> np.ndarray:
    return np.argmax(predict_proba(examples, text_params, clf_params), axis=1)


# ---------------------------------------------------------------------------
# checkpoints: {name -> {shape, flat data}} with bit-exact float encoding
# ---------------------------------------------------------------------------

def encode_param_doc(params: dict[str, Tensor]) -> dict:
    doc = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        doc[name] = {"shape": list(tensor.data.shape),
                     "data": [float(v).hex() for v in flat]}
    return doc


def decode_param_doc(doc: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in doc.items():
        values = np.array([float.fromhex(v) for v in entry["data"]], dtype=np.float64)
        out[name] = values.reshape(entry["shape"])
    return out


def save_params(params: dict[str, Tensor], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(encode_param_doc(params), fh, sort_keys=True, indent=0)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        return decode_param_doc(json.load(fh))
