"""Command-line experiment driver.

Everything is configured by one JSON document (a few scalar fields can be
overridden by flags); every output directory gets a manifest recording the
resolved config, the derived seeds and input-file digests, so any experiment
can be reproduced bit-identically from its artifacts.

Subcommands: gen-data, inject-noise, train, eval-splits, export-labelsim.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import encoders
from .autodiff import Tape
from .data import ConfusionSpec, DataError, Dataset
from .evaluate import (EvalError, label_similarity_matrix, repeated_splits_eval,
                       write_split_csv, write_summary_csv)
from .seeds import derive_seed
from .targets import LabelConfusion, LabelSmoothing, TargetError, TargetStrategy, OneHot, \
    parse_strategy, strategy_label
from .train import Model, TrainConfig, TrainError, save_model, train_run


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_GENERATOR_KEYS = {"classes", "words_per_class", "overlap", "samples_per_class",
                   "doc_length", "seed"}
_TRAIN_KEYS = {"epochs", "learning_rate", "batch_size", "dim", "max_len"}
_VOCAB_KEYS = {"min_freq", "max_size"}
_TOP_KEYS = {"dataset", "group_map", "noise_rate", "strategies", "train", "vocab",
             "embeddings", "n_splits", "train_fraction", "seed", "out_dir"}


@dataclass
class ExperimentConfig:
    dataset_path: str | None
    generator: dict | None
    group_map_path: str | None
    noise_rate: float
    strategies: list[TargetStrategy]
    train: dict
    vocab: dict
    embeddings_path: str | None
    n_splits: int
    train_fraction: float
    seed: int
    out_dir: str | None
    echo: dict = field(default_factory=dict)  # resolved document for the manifest


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")

    dataset = doc.get("dataset")
    if not isinstance(dataset, dict) or len(set(dataset) & {"path", "generator"}) != 1:
        raise ConfigError('config needs "dataset": {"path": ...} or {"generator": {...}}')
    _reject_unknown(dataset, {"path", "generator"}, "dataset")
    generator = dataset.get("generator")
    if generator is not None:
        _reject_unknown(generator, _GENERATOR_KEYS, "generator")

    strategies_doc = doc.get("strategies", [{"kind": "one-hot"}])
    if not isinstance(strategies_doc, list) or not strategies_doc:
        raise ConfigError('"strategies" must be a nonempty list')
    try:
        strategies = [parse_strategy(s) for s in strategies_doc]
    except TargetError as exc:
        raise ConfigError(str(exc)) from None

    train = dict(doc.get("train", {}))
    _reject_unknown(train, _TRAIN_KEYS, "train")
    vocab = dict(doc.get("vocab", {}))
    _reject_unknown(vocab, _VOCAB_KEYS, "vocab")

    embeddings = doc.get("embeddings")
    if embeddings is not None:
        _reject_unknown(embeddings, {"path"}, "embeddings")
        if "path" not in embeddings:
            raise ConfigError('"embeddings" needs a "path"')

    noise_rate = float(doc.get("noise_rate", 0.0))
    if not (0.0 <= noise_rate <= 1.0):
        raise ConfigError(f"noise_rate must be in [0, 1], got {noise_rate}")
    n_splits = int(doc.get("n_splits", 10))
    train_fraction = float(doc.get("train_fraction", 0.7))
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")

    return ExperimentConfig(
        dataset_path=dataset.get("path"),
        generator=generator,
        group_map_path=doc.get("group_map"),
        noise_rate=noise_rate,
        strategies=strategies,
        train=train,
        vocab=vocab,
        embeddings_path=embeddings["path"] if embeddings else None,
        n_splits=n_splits,
        train_fraction=train_fraction,
        seed=int(doc.get("seed", 0)),
        out_dir=doc.get("out_dir"),
        echo=doc,
    )


def load_config(path, args) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    doc = _apply_overrides(doc, args)
    return parse_config(doc)


def _apply_overrides(doc: dict, args) -> dict:
    doc = json.loads(json.dumps(doc))  # deep copy; keeps the echo JSON-clean
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "splits", None) is not None:
        doc["n_splits"] = args.splits
    if getattr(args, "noise_rate", None) is not None:
        doc["noise_rate"] = args.noise_rate
    if getattr(args, "out", None) is not None:
        doc["out_dir"] = args.out
    if getattr(args, "strategy", None) is not None:
        doc["strategies"] = [{"kind": args.strategy}]
    for entry in doc.get("strategies", []):
        if getattr(args, "alpha", None) is not None and entry.get("kind") == "lcm":
            entry["alpha"] = args.alpha
        if getattr(args, "epsilon", None) is not None and entry.get("kind") == "ls":
            entry["epsilon"] = args.epsilon
    if getattr(args, "overlap", None) is not None:
        gen = doc.get("dataset", {}).get("generator")
        if gen is None:
            raise ConfigError("--overlap only applies to generator datasets")
        gen["overlap"] = args.overlap
    return doc


def _train_config(cfg: ExperimentConfig, strategy: TargetStrategy) -> TrainConfig:
    try:
        return TrainConfig(strategy=strategy, seed=cfg.seed, **cfg.train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from None


# ---------------------------------------------------------------------------
# dataset resolution
# ---------------------------------------------------------------------------

def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _build_spec(cfg: ExperimentConfig) -> ConfusionSpec:
    gen = dict(cfg.generator)
    gen.setdefault("seed", derive_seed(cfg.seed, "gen"))
    return ConfusionSpec.build(
        classes=int(gen.get("classes", 4)),
        words_per_class=int(gen.get("words_per_class", 40)),
        overlap=float(gen.get("overlap", 0.5)),
        samples_per_class=int(gen.get("samples_per_class", 500)),
        doc_length=int(gen.get("doc_length", 30)),
        seed=int(gen["seed"]),
    )


@dataclass
class ResolvedData:
    dataset: Dataset
    vocab: datamod.Vocab | None
    vocab_size: int | None
    groups: dict[str, str] | None
    inputs: dict            # file digests / generator echo for the manifest
    noise_flips: int | None = None


def _resolve_dataset(cfg: ExperimentConfig) -> ResolvedData:
    inputs: dict = {}
    if cfg.generator is not None:
        spec = _build_spec(cfg)
        records = datamod.generate_confused_records(spec)
        vocab = datamod.build_vocab([r["text"] for r in records], min_freq=1,
                                    max_size=len(spec.vocab_words))
        dataset = datamod.encode_corpus(records, vocab, spec.label_names,
                                        max_len=spec.doc_length)
        groups = spec.group_map()
        inputs["generator"] = {"overlap": spec.overlap, "classes": spec.class_count,
                               "samples_per_class": spec.samples_per_class,
                               "doc_length": spec.doc_length, "seed": spec.seed}
    else:
        path = cfg.dataset_path
        records = datamod.load_corpus_jsonl(path)
        inputs["dataset"] = {"path": str(path), "sha256": _file_digest(path)}
        label_names = sorted({r["label"] for r in records})
        if any("text" in r for r in records):
            vocab = datamod.build_vocab([r.get("text", "") for r in records],
                                        min_freq=int(cfg.vocab.get("min_freq", 1)),
                                        max_size=int(cfg.vocab.get("max_size", 50000)))
        else:
            vocab = None
        max_len = int(cfg.train.get("max_len", 64))
        dataset = datamod.encode_corpus(records, vocab, label_names, max_len=max_len) \
            if vocab is not None else \
            datamod.encode_corpus(records, datamod.Vocab({}, 1), label_names, max_len=max_len)
        groups = None
        if cfg.group_map_path:
            groups = datamod.load_group_map(cfg.group_map_path)
            inputs["group_map"] = {"path": str(cfg.group_map_path),
                                   "sha256": _file_digest(cfg.group_map_path)}

    flips = None
    if cfg.noise_rate > 0.0:
        if groups is None:
            raise ConfigError("noise_rate > 0 requires a group map")
        noise_seed = derive_seed(cfg.seed, "noise")
        dataset = datamod.inject_label_noise(dataset, groups, cfg.noise_rate, noise_seed)
        flips = len(datamod.noise_audit(dataset)["flips"])
        inputs["noise"] = {"rate": cfg.noise_rate, "seed": noise_seed, "flips": flips}
    return ResolvedData(dataset=dataset, vocab=vocab,
                        vocab_size=vocab.size if vocab is not None else None,
                        groups=groups, inputs=inputs, noise_flips=flips)


def _load_embeddings(cfg: ExperimentConfig, resolved: ResolvedData):
    if cfg.embeddings_path is None:
        return None
    if resolved.vocab is None:
        raise ConfigError("pretrained embeddings need a token dataset")
    dim = int(cfg.train.get("dim", 64))
    table, coverage = datamod.load_pretrained_embeddings(
        cfg.embeddings_path, resolved.vocab, dim, seed=derive_seed(cfg.seed, "emb"))
    resolved.inputs["embeddings"] = {"path": str(cfg.embeddings_path),
                                     "sha256": _file_digest(cfg.embeddings_path),
                                     "coverage": coverage}
    return table


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, extra: dict) -> None:
    manifest = {"command": command, "config": cfg.echo, "seed": cfg.seed}
    manifest.update(extra)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _require_out_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.out_dir:
        raise ConfigError("an output directory is required (config out_dir or --out)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _slug(label: str) -> str:
    return label.replace("(", "_").replace(")", "").replace(",", "_").replace("=", "")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args)
    if cfg.generator is None:
        raise ConfigError("gen-data needs a generator dataset section")
    out = _require_out_dir(cfg)
    spec = _build_spec(cfg)
    records = datamod.generate_confused_records(spec)
    datamod.save_corpus_jsonl(records, out / "corpus.jsonl")
    with open(out / "groups.json", "w", encoding="utf-8") as fh:
        json.dump(spec.group_map(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(out, "gen-data", cfg,
                    {"generator_spec": spec.to_json_dict(),
                     "outputs": ["corpus.jsonl", "groups.json"]})
    print(f"wrote {len(records)} records to {out / 'corpus.jsonl'}")
    return 0


def cmd_inject_noise(args) -> int:
    cfg = load_config(args.config, args)
    if cfg.dataset_path is None:
        raise ConfigError("inject-noise needs a dataset path")
    if cfg.group_map_path is None:
        raise ConfigError("inject-noise needs a group_map path")
    if cfg.noise_rate <= 0.0:
        raise ConfigError("inject-noise needs noise_rate > 0")
    out = _require_out_dir(cfg)
    records = datamod.load_corpus_jsonl(cfg.dataset_path)
    label_names = sorted({r["label"] for r in records})
    groups = datamod.load_group_map(cfg.group_map_path)
    vocab = datamod.build_vocab([r.get("text", "") for r in records], min_freq=1)
    dataset = datamod.encode_corpus(records, vocab, label_names,
                                    max_len=int(cfg.train.get("max_len", 64)))
    noise_seed = derive_seed(cfg.seed, "noise")
    noisy = datamod.inject_label_noise(dataset, groups, cfg.noise_rate, noise_seed)
    audit = datamod.noise_audit(noisy)
    # Apply the audited flips to the raw records so the texts survive verbatim.
    flipped_records = [dict(r) for r in records]
    for flip in audit["flips"]:
        flipped_records[flip["index"]]["label"] = flip["new"]
    datamod.save_corpus_jsonl(flipped_records, out / "corpus_noisy.jsonl")
    _write_manifest(out, "inject-noise", cfg, {
        "inputs": {"dataset": {"path": str(cfg.dataset_path),
                               "sha256": _file_digest(cfg.dataset_path)},
                   "group_map": {"path": str(cfg.group_map_path),
                                 "sha256": _file_digest(cfg.group_map_path)}},
        "noise": {"rate": cfg.noise_rate, "seed": noise_seed,
                  "eligible": audit["eligible"], "flips": len(audit["flips"]),
                  "flip_list": audit["flips"]},
        "outputs": ["corpus_noisy.jsonl"],
    })
    print(f"flipped {len(audit['flips'])} of {audit['eligible']} eligible labels")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    out = _require_out_dir(cfg)
    resolved = _resolve_dataset(cfg)
    pretrained = _load_embeddings(cfg, resolved)
    strategy = cfg.strategies[0]
    config = _train_config(cfg, strategy)
    split_seed = cfg.seed + 0  # matches split 0 of the repeated protocol
    train_set, test_set = datamod.split_dataset(resolved.dataset, cfg.train_fraction,
                                                split_seed)
    model, history = train_run(train_set, test_set,
                               replace(config, seed=derive_seed(cfg.seed, "train", 0)),
                               vocab_size=resolved.vocab_size,
                               pretrained_embedding=pretrained)
    history.to_csv(out / "history.csv")
    save_model(model, out / "checkpoint.json")
    save_model(model, out / "checkpoint_inference.json", inference_only=True)
    _write_manifest(out, "train", cfg, {
        "strategy": strategy_label(strategy),
        "split_seed": split_seed,
        "train_seed": derive_seed(cfg.seed, "train", 0),
        "inputs": resolved.inputs,
        "outputs": ["history.csv", "checkpoint.json", "checkpoint_inference.json"],
        "final_test_accuracy": history.records[-1].test_acc,
    })
    print(f"final test accuracy {history.records[-1].test_acc:.4f} "
          f"({strategy_label(strategy)})")
    return 0


def _export_similarity(model: Model, label_names: list[str], path, layer: str) -> None:
    if model.label_encoder is None:
        raise ConfigError("checkpoint has no label-encoder parameters")
    if layer == "embedding":
        matrix = model.label_encoder.embedding.data
    else:
        tape = Tape()
        matrix = encoders.encode_labels(len(label_names), model.label_encoder, tape).data
    label_similarity_matrix(matrix, label_names).to_csv(path)


def cmd_eval_splits(args) -> int:
    cfg = load_config(args.config, args)
    out = _require_out_dir(cfg)
    resolved = _resolve_dataset(cfg)
    pretrained = _load_embeddings(cfg, resolved)
    runs = [(s, _train_config(cfg, s)) for s in cfg.strategies]
    reports, details = repeated_splits_eval(
        resolved.dataset, runs, n_splits=cfg.n_splits, base_seed=cfg.seed,
        train_fraction=cfg.train_fraction, jobs=args.jobs,
        vocab_size=resolved.vocab_size, pretrained_embedding=pretrained)

    outputs = ["splits.csv", "summary.csv"]
    write_split_csv(reports, out / "splits.csv")
    for (strategy, _), split_runs in zip(runs, details):
        slug = _slug(strategy_label(strategy))
        for detail in split_runs:
            name = f"history_{slug}_split{detail.split_index}.csv"
            detail.history.to_csv(out / name)
            outputs.append(name)
            if isinstance(strategy, LabelConfusion):
                sim_name = f"labelsim_{slug}_split{detail.split_index}.csv"
                _export_similarity(detail.model, resolved.dataset.label_names,
                                   out / sim_name, layer="encoded")
                outputs.append(sim_name)
    _write_manifest(out, "eval-splits", cfg, {
        "split_seeds": [cfg.seed + i for i in range(cfg.n_splits)],
        "train_seeds": [derive_seed(cfg.seed, "train", i) for i in range(cfg.n_splits)],
        "inputs": resolved.inputs,
        "outputs": outputs,
        "summary": [{"strategy": r.strategy, "mean": r.mean, "std": r.std,
                     "p_vs_baseline": r.p_vs_baseline} for r in reports],
    })
    write_summary_csv(reports, out / "summary.csv")  # last: only on full success
    for report in reports:
        extra = "" if report.p_vs_baseline is None else f"  p={report.p_vs_baseline:.4f}"
        print(f"{report.strategy}: {report.mean:.4f} +/- {report.std:.4f}{extra}")
    return 0


def cmd_export_labelsim(args) -> int:
    from .train import load_model

    model = load_model(args.checkpoint)
    if args.labels:
        label_names = args.labels.split(",")
    elif args.dataset:
        records = datamod.load_corpus_jsonl(args.dataset)
        label_names = sorted({r["label"] for r in records})
    else:
        if model.label_encoder is None:
            raise ConfigError("checkpoint has no label-encoder parameters")
        label_names = [f"label_{i}" for i in range(model.label_encoder.embedding.data.shape[0])]
    _export_similarity(model, label_names, args.out, layer=args.layer)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--splits", type=int, help="override n_splits")
    p.add_argument("--noise-rate", dest="noise_rate", type=float, help="override noise_rate")
    p.add_argument("--alpha", type=float, help="override alpha of lcm strategies")
    p.add_argument("--epsilon", type=float, help="override epsilon of ls strategies")
    p.add_argument("--strategy", choices=["one-hot", "ls", "lcm"],
                   help="replace the strategy list with a single strategy")
    p.add_argument("--overlap", type=float, help="override generator overlap")
    p.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcmlab",
                                     description="soft-target training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic confused corpus")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inject-noise", help="flip labels within groups")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", help="train one strategy on one split")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-splits", help="repeated-split comparison of strategies")
    _add_config_arguments(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel (strategy x split) workers")
    p.set_defaults(func=cmd_eval_splits)

    p = sub.add_parser("export-labelsim", help="label similarity matrix from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="comma-separated label names")
    p.add_argument("--dataset", help="corpus file to take label names from")
    p.add_argument("--layer", choices=["encoded", "embedding"], default="encoded")
    p.set_defaults(func=cmd_export_labelsim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, TargetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EvalError, TrainError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
