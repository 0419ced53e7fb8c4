"""Corpus ingestion, vocabulary, deterministic splits, synthetic confused
corpora and group-aware label-noise injection.

The synthetic generator draws each document i.i.d. from a per-class unigram
topic distribution; classes come in confusable pairs whose distributions are
pulled toward their common midpoint by an ``overlap`` knob. Because the
generating distributions are known, an exact Bayes oracle is available to
calibrate how confusable a generated corpus actually is.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

PAD_ID = 0
UNK_ID = 1
_NUM_RESERVED = 2


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and encoding
# ---------------------------------------------------------------------------

@dataclass
class Vocab:
    """Token table with reserved ids 0 (padding) and 1 (unknown)."""

    token_to_id: dict[str, int]
    min_freq: int

    @property
    def size(self) -> int:
        """Total id count including the two reserved ids."""
        return len(self.token_to_id) + _NUM_RESERVED

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def tokenize(text: str) -> list[str]:
    # Lowercase + whitespace; deterministic and dependency-free.
    return text.lower().split()


def build_vocab(corpus: list[str], min_freq: int = 1, max_size: int = 100_000) -> Vocab:
    """Build a vocabulary from raw texts.

    Tokens are ranked by (descending frequency, then lexicographic) before id
    assignment and truncated to ``max_size`` non-reserved entries.
    """
    if not corpus:
        raise DataError("build_vocab: empty corpus")
    if min_freq < 1 or max_size < 1:
        raise DataError("build_vocab: min_freq and max_size must be positive")
    counts = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))[:max_size]
    table = {t: i + _NUM_RESERVED for i, t in enumerate(kept)}
    return Vocab(token_to_id=table, min_freq=min_freq)


@dataclass
class Example:
    """One classification instance: a token-id sequence or a feature vector."""

    label_id: int
    token_ids: list[int] | None = None
    length: int | None = None          # true (unpadded) length of token_ids
    feature_vector: np.ndarray | None = None

    def __post_init__(self):
        has_tokens = self.token_ids is not None
        has_features = self.feature_vector is not None
        if has_tokens == has_features:
            raise DataError("Example: exactly one of token_ids / feature_vector required")
        if has_tokens and (self.length is None or not (1 <= self.length <= len(self.token_ids))):
            raise DataError("Example: length must be in [1, len(token_ids)]")


@dataclass
class Dataset:
    examples: list[Example]
    label_names: list[str]
    provenance: str = ""

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def feature_dim(self) -> int | None:
        """Feature dimension for vector data, None for token data."""
        first = self.examples[0] if self.examples else None
        if first is not None and first.feature_vector is not None:
            return int(first.feature_vector.shape[0])
        return None

    def labels(self) -> np.ndarray:
        return np.array([e.label_id for e in self.examples], dtype=np.int64)


def encode_corpus(records: list[dict], vocab: Vocab, label_names: list[str],
                  max_len: int) -> Dataset:
    """Encode raw records ({"text"|"features", "label"}) into a Dataset.

    Unknown tokens map to the unknown id; sequences are truncated to
    ``max_len`` then padded with the padding id, keeping the true length for
    mean pooling.
    """
    if max_len < 1:
        raise DataError("encode_corpus: max_len must be positive")
    label_index = {name: i for i, name in enumerate(label_names)}
    examples: list[Example] = []
    feature_dim: int | None = None
    for i, record in enumerate(records):
        label = record.get("label")
        if label not in label_index:
            raise DataError(f"encode_corpus: record {i} has unknown label {label!r}")
        if "features" in record:
            vec = np.asarray(record["features"], dtype=np.float64)
            if vec.ndim != 1 or vec.size == 0:
                raise DataError(f"encode_corpus: record {i} has invalid feature vector")
            if feature_dim is None:
                feature_dim = vec.size
            elif vec.size != feature_dim:
                raise DataError(f"encode_corpus: record {i} feature dim {vec.size} != {feature_dim}")
            examples.append(Example(label_id=label_index[label], feature_vector=vec))
            continue
        ids = [vocab.lookup(t) for t in tokenize(record.get("text", ""))][:max_len]
        if not ids:
            raise DataError(f"encode_corpus: record {i} has empty text")
        length = len(ids)
        ids = ids + [PAD_ID] * (max_len - length)
        examples.append(Example(label_id=label_index[label], token_ids=ids, length=length))
    kinds = {e.token_ids is None for e in examples}
    if len(kinds) > 1:
        raise DataError("encode_corpus: corpus mixes text and feature records")
    return Dataset(examples=examples, label_names=list(label_names))


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index partition behind :func:`split_dataset` (exposed for auditing)."""
    if n < 2:
        raise DataError("split_dataset: need at least 2 examples")
    if not (0.0 < train_fraction < 1.0):
        raise DataError(f"split_dataset: train_fraction must be in (0, 1), got {train_fraction}")
    n_train = math.floor(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise DataError("split_dataset: degenerate split leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:]


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded uniform shuffle, then the first floor(N * fraction) go to train."""
    train_idx, test_idx = split_indices(len(dataset.examples), train_fraction, seed)
    make = lambda idx, tag: Dataset(
        examples=[dataset.examples[i] for i in idx],
        label_names=list(dataset.label_names),
        provenance=f"{dataset.provenance}|split(seed={seed},{tag})",
    )
    return make(train_idx, "train"), make(test_idx, "test")


# ---------------------------------------------------------------------------
# synthetic confused corpus
# ---------------------------------------------------------------------------

@dataclass
class ConfusionSpec:
    """Controls for the synthetic unigram-topic corpus generator.

    ``overlap`` pulls each class distribution toward the midpoint of its
    confusable pair: with overlap w, class k effectively samples from
    (1 - w/2) * own + (w/2) * partner, so w = 0 keeps the original topics
    and w = 1 makes a pair's class-conditional distributions identical.
    """

    class_count: int
    topic_distributions: np.ndarray     # class_count x vocab rows, each sums to 1
    partners: list[int]                 # partner class per class; k means "no mixing"
    overlap: float
    samples_per_class: int
    doc_length: int
    seed: int
    vocab_words: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.topic_distributions = np.asarray(self.topic_distributions, dtype=np.float64)
        c, v = self.topic_distributions.shape
        if c != self.class_count:
            raise DataError("ConfusionSpec: topic_distributions row count != class_count")
        if not np.allclose(self.topic_distributions.sum(axis=1), 1.0, atol=1e-9):
            raise DataError("ConfusionSpec: topic distributions must sum to 1")
        if not (0.0 <= self.overlap <= 1.0):
            raise DataError(f"ConfusionSpec: overlap must be in [0, 1], got {self.overlap}")
        if len(self.partners) != c or any(not (0 <= p < c) for p in self.partners):
            raise DataError("ConfusionSpec: partners must list a class index per class")
        if self.samples_per_class < 1:
            raise DataError("ConfusionSpec: samples_per_class must be >= 1")
        if self.doc_length < 1:
            raise DataError("ConfusionSpec: doc_length must be >= 1")
        if not self.vocab_words:
            self.vocab_words = [f"w{i:04d}" for i in range(v)]
        if not self.label_names:
            self.label_names = [f"class_{k:02d}" for k in range(c)]

    @classmethod
    def build(cls, classes: int, words_per_class: int, overlap: float,
              samples_per_class: int, doc_length: int, seed: int) -> "ConfusionSpec":
        """Standard configuration: disjoint Zipf-weighted topic blocks with
        classes paired off (0-1, 2-3, ...)."""
        if classes < 2:
            raise DataError("ConfusionSpec.build: need at least 2 classes")
        if classes % 2 != 0 and overlap > 0.0:
            raise DataError("ConfusionSpec.build: pairing requires an even class count")
        vocab_size = classes * words_per_class
        dists = np.zeros((classes, vocab_size))
        ranks = np.arange(1, words_per_class + 1, dtype=np.float64)
        weights = 1.0 / ranks
        weights /= weights.sum()
        for k in range(classes):
            dists[k, k * words_per_class:(k + 1) * words_per_class] = weights
        partners = [k + 1 if k % 2 == 0 else k - 1 for k in range(classes)]
        if classes % 2 != 0:
            partners[-1] = classes - 1
        return cls(class_count=classes, topic_distributions=dists, partners=partners,
                   overlap=overlap, samples_per_class=samples_per_class,
                   doc_length=doc_length, seed=seed)

    def effective_distributions(self) -> np.ndarray:
        """Per-class sampling distributions after overlap mixing."""
        w = self.overlap
        eff = np.array(self.topic_distributions, copy=True)
        for k, p in enumerate(self.partners):
            if p != k:
                eff[k] = (1.0 - w / 2.0) * self.topic_distributions[k] \
                    + (w / 2.0) * self.topic_distributions[p]
        return eff

    def group_map(self) -> dict[str, str]:
        """Labels sharing a partner pair share a group."""
        groups: dict[str, str] = {}
        for k, p in enumerate(self.partners):
            lo = min(k, p)
            groups[self.label_names[k]] = f"group_{lo}" if p != k else f"solo_{k}"
        return groups

    def to_json_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "topic_distributions": self.topic_distributions.tolist(),
            "partners": list(self.partners),
            "overlap": self.overlap,
            "samples_per_class": self.samples_per_class,
            "doc_length": self.doc_length,
            "seed": self.seed,
            "vocab_words": list(self.vocab_words),
            "label_names": list(self.label_names),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ConfusionSpec":
        return cls(**{k: doc[k] for k in (
            "class_count", "topic_distributions", "partners", "overlap",
            "samples_per_class", "doc_length", "seed", "vocab_words", "label_names")})


def generate_confused_records(spec: ConfusionSpec) -> list[dict]:
    """Raw {"text", "label"} records sampled from the generator."""
    rng = np.random.default_rng(spec.seed)
    eff = spec.effective_distributions()
    vocab_size = eff.shape[1]
    records = []
    for k in range(spec.class_count):
        for _ in range(spec.samples_per_class):
            token_ids = rng.choice(vocab_size, size=spec.doc_length, p=eff[k])
            text = " ".join(spec.vocab_words[t] for t in token_ids)
            records.append({"text": text, "label": spec.label_names[k]})
    return records


def generate_confused_corpus(spec: ConfusionSpec) -> Dataset:
    """Generate records and encode them through the standard pipeline."""
    records = generate_confused_records(spec)
    vocab = build_vocab([r["text"] for r in records], min_freq=1,
                        max_size=len(spec.vocab_words))
    dataset = encode_corpus(records, vocab, spec.label_names, max_len=spec.doc_length)
    dataset.provenance = json.dumps({"generator": {"overlap": spec.overlap,
                                                   "classes": spec.class_count,
                                                   "seed": spec.seed}})
    return dataset


def bayes_accuracy(spec: ConfusionSpec, records: list[dict]) -> float:
    """Accuracy of the exact Bayes classifier (known effective distributions)
    on generated records. Ties go to the lowest class index."""
    eff = spec.effective_distributions()
    with np.errstate(divide="ignore"):
        log_eff = np.where(eff > 0.0, np.log(np.maximum(eff, 1e-300)), -1e30)
    word_index = {w: i for i, w in enumerate(spec.vocab_words)}
    label_index = {name: i for i, name in enumerate(spec.label_names)}
    correct = 0
    for record in records:
        counts = Counter(word_index[t] for t in record["text"].split())
        idx = np.fromiter(counts.keys(), dtype=np.int64)
        mult = np.fromiter(counts.values(), dtype=np.float64)
        scores = log_eff[:, idx] @ mult
        if int(np.argmax(scores)) == label_index[record["label"]]:
            correct += 1
    return correct / len(records)


# ---------------------------------------------------------------------------
# label noise
# ---------------------------------------------------------------------------

def load_group_map(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or not all(isinstance(v, str) for v in doc.values()):
        raise DataError(f"group map {path}: expected a flat {{label: group}} object")
    return doc


def inject_label_noise(dataset: Dataset, groups: dict[str, str], rate: float,
                       seed: int) -> Dataset:
    """Mislabel exactly round(rate * |eligible|) examples within label groups.

    An example is eligible when its label's group contains at least two
    labels; the replacement label is drawn uniformly from the other labels of
    the same group. The flip list is recorded in the returned dataset's
    provenance for audit.
    """
    if not (0.0 <= rate <= 1.0):
        raise DataError(f"inject_label_noise: rate must be in [0, 1], got {rate}")
    missing = [name for name in dataset.label_names if name not in groups]
    if missing:
        raise DataError(f"inject_label_noise: group map missing labels {missing}")
    members: dict[str, list[int]] = {}
    for idx, name in enumerate(dataset.label_names):
        members.setdefault(groups[name], []).append(idx)
    alternatives = {
        label_id: [m for m in members[groups[dataset.label_names[label_id]]] if m != label_id]
        for label_id in range(dataset.num_classes)
    }
    eligible = [i for i, e in enumerate(dataset.examples) if alternatives[e.label_id]]
    if rate > 0.0 and not eligible:
        raise DataError("inject_label_noise: no group has two or more labels")

    n_flips = int(round(rate * len(eligible)))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(eligible), size=n_flips, replace=False).tolist()) \
        if n_flips else []
    flips = []
    new_examples = list(dataset.examples)
    for pos in chosen:
        idx = eligible[pos]
        old = new_examples[idx]
        options = alternatives[old.label_id]
        new_label = options[int(rng.integers(len(options)))]
        new_examples[idx] = replace(old, label_id=new_label)
        flips.append({"index": idx,
                      "old": dataset.label_names[old.label_id],
                      "new": dataset.label_names[new_label]})
    audit = {"source": dataset.provenance,
             "label_noise": {"rate": rate, "seed": seed,
                             "eligible": len(eligible), "flips": flips}}
    return Dataset(examples=new_examples, label_names=list(dataset.label_names),
                   provenance=json.dumps(audit))


def noise_audit(dataset: Dataset) -> dict:
    """Parse the flip audit recorded by :func:`inject_label_noise`."""
    doc = json.loads(dataset.provenance)
    return doc["label_noise"]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_corpus_jsonl(path) -> list[dict]:
    """JSON-lines corpus: one object per line with "text" (or "features") and "label"."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if "label" not in record or ("text" not in record and "features" not in record):
                raise DataError(f"{path}:{lineno}: record needs 'label' and 'text' or 'features'")
            records.append(record)
    if not records:
        raise DataError(f"{path}: empty corpus")
    return records


def save_corpus_jsonl(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def dataset_records(dataset: Dataset, vocab: Vocab | None = None) -> list[dict]:
    """Re-materialize raw records from an encoded dataset (for noisy exports).

    Token datasets need the vocab that encoded them.
    """
    id_to_token = {}
    if vocab is not None:
        id_to_token = {i: t for t, i in vocab.token_to_id.items()}
    records = []
    for e in dataset.examples:
        label = dataset.label_names[e.label_id]
        if e.feature_vector is not None:
            records.append({"features": e.feature_vector.tolist(), "label": label})
        else:
            if vocab is None:
                raise DataError("dataset_records: vocab required for token datasets")
            words = [id_to_token.get(t, "<unk>") for t in e.token_ids[:e.length]]
            records.append({"text": " ".join(words), "label": label})
    return records


def load_pretrained_embeddings(path, vocab: Vocab, dim: int,
                               seed: int = 0) -> tuple[np.ndarray, float]:
    """Load a word-per-line text embedding file into a |V| x dim table.

    Rows for in-file tokens are copied verbatim; everything else keeps the
    standard seeded uniform init. Returns (table, coverage fraction over
    non-reserved vocab tokens).
    """
    from . import encoders  # deferred: the init scheme lives with the encoders

    if dim < 1:
        raise DataError("load_pretrained_embeddings: dim must be positive")
    table = encoders.uniform_embedding(np.random.default_rng(seed), vocab.size, dim)
    found = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) <= 1 and not line.strip():
                continue
            if len(parts) != dim + 1:
                raise DataError(
                    f"{path}:{lineno}: expected token plus {dim} values, got {len(parts) - 1}")
            token = parts[0]
            token_id = vocab.token_to_id.get(token)
            values = [float(v) for v in parts[1:]]
            if token_id is not None:
                table[token_id] = values
                found += 1
    denom = max(len(vocab.token_to_id), 1)
    return table, found / denom
