"""Accuracy metrics, the repeated-split comparison protocol, Welch's t-test
and label-representation diagnostics.

The protocol retrains every strategy on the same sequence of seeded 7:3
splits (split i uses base_seed + i for all strategies), reports mean and
sample standard deviation of test accuracy, and attaches a two-sided Welch
p-value against the first-listed (baseline) strategy. The t-distribution
tail is evaluated through a continued-fraction regularized incomplete beta,
so the package needs no statistics dependency.
"""
from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from math import exp, inf, lgamma, log, log1p, sqrt

import numpy as np

from .data import Dataset, split_dataset, split_indices
from .seeds import derive_seed
from .train import Model, TrainConfig, TrainHistory, train_run
from .targets import LabelConfusion, TargetStrategy, strategy_label


class EvalError(ValueError):
    pass


class IdenticalSamplesError(EvalError):
    """Both samples are degenerate and equal; a t-test is meaningless."""


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise EvalError(f"accuracy: need equal nonempty lengths, got "
                        f"{predictions.shape} vs {labels.shape}")
    return float(np.mean(predictions == labels))


# ---------------------------------------------------------------------------
# Welch's t-test
# ---------------------------------------------------------------------------

_BETACF_EPS = 3e-16
_BETACF_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz continued fraction for the incomplete beta.
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_FPMIN:
        d = _BETACF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via the continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log1p(-x)
    front = exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    """Two-sided tail probability of the t-distribution."""
    if dof <= 0.0:
        raise EvalError(f"degrees of freedom must be positive, got {dof}")
    if t == 0.0:
        return 1.0
    return betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass(frozen=True)
class WelchResult:
    statistic: float
    dof: float
    p_value: float


def welch_t_test(a, b) -> WelchResult:
    """Unequal-variance two-sample t-test, two-sided.

    Raises :class:`IdenticalSamplesError` when both samples have zero
    variance and equal means; reports p = 0 when both have zero variance but
    the means differ.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise EvalError("welch_t_test: both samples need at least 2 values")
    mean_a, mean_b = float(a.mean()), float(b.mean())
    var_a = float(a.var(ddof=1))
    var_b = float(b.var(ddof=1))
    if var_a == 0.0 and var_b == 0.0:
        if mean_a == mean_b:
            raise IdenticalSamplesError("both samples are constant and equal")
        return WelchResult(statistic=inf if mean_a > mean_b else -inf, dof=float("nan"),
                           p_value=0.0)
    se_a, se_b = var_a / a.size, var_b / b.size
    t = (mean_a - mean_b) / sqrt(se_a + se_b)
    dof = (se_a + se_b) ** 2 / (se_a ** 2 / (a.size - 1) + se_b ** 2 / (b.size - 1))
    return WelchResult(statistic=t, dof=dof, p_value=student_t_two_sided_p(t, dof))


# ---------------------------------------------------------------------------
# repeated-split protocol
# ---------------------------------------------------------------------------

@dataclass
class SplitReport:
    strategy: str
    accuracies: list[float]
    seeds: list[int]
    split_digests: list[str]
    mean: float
    std: float
    baseline: str | None = None
    p_vs_baseline: float | None = None
    comparison: str | None = None  # "welch" | "identical" | None for the baseline row


@dataclass
class RunDetail:
    strategy: str
    split_index: int
    split_seed: int
    test_accuracy: float
    history: TrainHistory
    model: Model


def _summarize(strategy: str, accuracies: list[float], seeds: list[int],
               digests: list[str]) -> SplitReport:
    arr = np.asarray(accuracies)
    return SplitReport(strategy=strategy, accuracies=list(accuracies), seeds=list(seeds),
                       split_digests=list(digests), mean=float(arr.mean()),
                       std=float(arr.std(ddof=1)))


def _split_digest(train_idx: np.ndarray) -> str:
    material = ",".join(str(i) for i in sorted(train_idx.tolist()))
    return hashlib.sha256(material.encode()).hexdigest()[:16]


def _execute_run(task) -> RunDetail:
    (dataset, strategy, config, split_index, split_seed, train_fraction, vocab_size,
     pretrained) = task
    train_set, test_set = split_dataset(dataset, train_fraction, split_seed)
    run_config = replace(config, strategy=strategy,
                         seed=derive_seed(config.seed, "train", split_index))
    model, history = train_run(train_set, test_set, run_config, vocab_size=vocab_size,
                               pretrained_embedding=pretrained)
    return RunDetail(strategy=strategy_label(strategy), split_index=split_index,
                     split_seed=split_seed, test_accuracy=history.records[-1].test_acc,
                     history=history, model=model)


def repeated_splits_eval(dataset: Dataset, runs: list[tuple[TargetStrategy, TrainConfig]],
                         n_splits: int, base_seed: int, train_fraction: float = 0.7,
                         jobs: int = 1, vocab_size: int | None = None,
                         pretrained_embedding: np.ndarray | None = None,
                         ) -> tuple[list[SplitReport], list[list[RunDetail]]]:
    """Train every strategy once per shared seeded split and compare to the
    first-listed strategy with Welch's t-test.

    Returns (one report per strategy, per-strategy lists of run details).
    """
    if n_splits < 2:
        raise EvalError("repeated_splits_eval: need at least 2 splits")
    if not runs:
        raise EvalError("repeated_splits_eval: no strategies given")
    split_seeds = [base_seed + i for i in range(n_splits)]
    digests = [_split_digest(split_indices(len(dataset.examples), train_fraction, s)[0])
               for s in split_seeds]

    tasks = [(dataset, strategy, config, i, split_seeds[i], train_fraction, vocab_size,
              pretrained_embedding)
             for strategy, config in runs for i in range(n_splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            flat = list(pool.map(_execute_run, tasks))
    else:
        flat = [_execute_run(t) for t in tasks]
    details = [flat[r * n_splits:(r + 1) * n_splits] for r in range(len(runs))]

    reports = []
    for (strategy, _config), split_runs in zip(runs, details):
        reports.append(_summarize(strategy_label(strategy),
                                  [d.test_accuracy for d in split_runs],
                                  split_seeds, digests))
    baseline = reports[0]
    for report in reports[1:]:
        report.baseline = baseline.strategy
        try:
            result = welch_t_test(report.accuracies, baseline.accuracies)
            report.p_vs_baseline = result.p_value
            report.comparison = "welch"
        except IdenticalSamplesError:
            report.p_vs_baseline = None
            report.comparison = "identical"
    return reports, details


# ---------------------------------------------------------------------------
# label-representation diagnostics
# ---------------------------------------------------------------------------

@dataclass
class SimilarityMatrix:
    values: np.ndarray      # C x C cosine similarities
    label_names: list[str]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label"] + self.label_names)
            for name, row in zip(self.label_names, self.values):
                writer.writerow([name] + [repr(v) for v in row])


def label_similarity_matrix(label_matrix: np.ndarray, label_names: list[str]) -> SimilarityMatrix:
    """Cosine similarity between label representation rows."""
    m = np.asarray(label_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != len(label_names):
        raise EvalError(f"label_similarity_matrix: matrix {m.shape} does not match "
                        f"{len(label_names)} labels")
    norms = np.linalg.norm(m, axis=1)
    for name, norm in zip(label_names, norms):
        if norm == 0.0:
            raise EvalError(f"label_similarity_matrix: zero-norm representation for {name!r}")
    unit = m / norms[:, None]
    values = np.clip(unit @ unit.T, -1.0, 1.0)
    return SimilarityMatrix(values=values, label_names=list(label_names))


def group_similarity_summary(sim: SimilarityMatrix, groups: dict[str, str]) -> tuple[float, float]:
    """(mean within-group, mean between-group) over off-diagonal entries."""
    within, between = [], []
    for i, a in enumerate(sim.label_names):
        for j, b in enumerate(sim.label_names):
            if i == j:
                continue
            (within if groups[a] == groups[b] else between).append(sim.values[i, j])
    if not within or not between:
        raise EvalError("group_similarity_summary: need both within- and between-group pairs")
    return float(np.mean(within)), float(np.mean(between))


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_split_csv(reports: list[SplitReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "split_index", "seed", "test_accuracy"])
        for report in reports:
            for i, (seed, acc) in enumerate(zip(report.seeds, report.accuracies)):
                writer.writerow([report.strategy, i, seed, repr(acc)])


def write_summary_csv(reports: list[SplitReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "mean", "std", "p_vs_baseline"])
        for report in reports:
            if report.comparison == "identical":
                p = "identical"
            elif report.p_vs_baseline is None:
                p = ""
            else:
                p = repr(report.p_vs_baseline)
            writer.writerow([report.strategy, repr(report.mean), repr(report.std), p])
