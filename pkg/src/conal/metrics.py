"""Evaluation metrics: accuracy, calibration (ECE, NLL, Brier), OOD AUROC,
mean corruption error, acquisition sampling bias, and query-cost accounting.

All functions are pure; natural logarithms throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError

MCE_NORMALIZATION = "none"  # plain mean error; no baseline-model normalization


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise DataError("accuracy undefined for empty input")
    return float((probs.argmax(axis=1) == labels).mean())


def ece(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins.

    Confidence is the max class probability; each nonempty bin contributes
    its sample share times |accuracy - mean confidence|.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = probs.shape[0]
    if n == 0:
        raise DataError("ece undefined for empty input")
    if n_bins < 1:
        raise ConfigError("n_bins must be positive")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise DataError("probability rows must sum to 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    counts, acc_sums, conf_sums = kernels.confidence_bin_stats(conf, correct, n_bins)
    nonzero = counts > 0
    gaps = np.abs(acc_sums[nonzero] - conf_sums[nonzero])
    return float(gaps.sum() / n)


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over samples of the squared distance to the one-hot label."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise DataError("brier undefined for empty input")
    onehot = np.zeros_like(probs)
    onehot[np.arange(probs.shape[0]), labels] = 1.0
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood; probabilities clamped below at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise DataError("nll undefined for empty input")
    p_true = np.clip(probs[np.arange(probs.shape[0]), labels], 1e-12, None)
    return float(-np.log(p_true).mean())


def auroc(scores_in: np.ndarray, scores_out: np.ndarray) -> float:
    """Probability a random out-score exceeds a random in-score (ties half).

    Rank-based Mann-Whitney computation; higher score means more
    out-of-distribution.
    """
    scores_in = np.asarray(scores_in, dtype=np.float64)
    scores_out = np.asarray(scores_out, dtype=np.float64)
    if scores_in.size == 0 or scores_out.size == 0:
        raise DataError("auroc needs both score sets nonempty")
    combined = np.concatenate([scores_in, scores_out])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_scores = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    n_in = scores_in.size
    n_out = scores_out.size
    rank_sum_out = ranks[n_in:].sum()
    u = rank_sum_out - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


def sampling_bias(class_counts, n_classes: int) -> float:
    """One minus the acquired-label entropy over the balanced entropy.

    0 for uniform acquisition across the configured classes, 1 when a single
    class absorbs everything; classes with zero count contribute nothing.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if n_classes < 2:
        raise ConfigError("sampling bias needs at least 2 configured classes")
    total = counts.sum()
    if total < 1:
        raise DataError("sampling bias undefined for an empty acquisition")
    p = counts[counts > 0] / total
    entropy = float(-(p * np.log(p)).sum())
    return 1.0 - entropy / np.log(n_classes)


def mce(per_shift_errors) -> float:
    """Unweighted mean classification error across shift kind/intensity cells.

    No baseline normalization is applied (reports carry an explicit
    ``mce_normalization: none`` marker).
    """
    if isinstance(per_shift_errors, dict):
        values = list(per_shift_errors.values())
    else:
        values = list(np.asarray(per_shift_errors, dtype=np.float64).ravel())
    if not values:
        raise DataError("mce undefined with no shift cells")
    return float(np.mean(values))


@dataclass(frozen=True)
class QueryCost:
    forward_passes: int
    wall_ms: float

    @staticmethod
    def from_snapshots(passes_before: int, passes_after: int,
                       t_before: float, t_after: float) -> "QueryCost":
        return QueryCost(passes_after - passes_before, (t_after - t_before) * 1000.0)


@dataclass
class IterationReport:
    """Everything measured in one active-learning iteration (one JSONL row)."""

    iteration: int
    labeled_count: int
    accuracy: float
    ece: float
    nll: float
    brier: float
    sampling_bias: float
    auroc_ood: float | None
    mce: float | None
    per_shift: list = field(default_factory=list)
    query_wall_ms: float = 0.0
    forward_passes_used: int = 0
    sampling_bias_acquired: float | None = None
    deficit_fills: int = 0
    truncated: bool = False
    mce_normalization: str = MCE_NORMALIZATION

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "labeled_count": self.labeled_count,
            "accuracy": self.accuracy,
            "ece": self.ece,
            "nll": self.nll,
            "brier": self.brier,
            "sampling_bias": self.sampling_bias,
            "auroc_ood": self.auroc_ood,
            "mce": self.mce,
            "per_shift": self.per_shift,
            "query_wall_ms": self.query_wall_ms,
            "forward_passes_used": self.forward_passes_used,
            "sampling_bias_acquired": self.sampling_bias_acquired,
            "deficit_fills": self.deficit_fills,
            "truncated": self.truncated,
            "mce_normalization": self.mce_normalization,
        }


CURVE_METRICS = ("accuracy", "ece", "nll", "brier", "sampling_bias", "auroc_ood", "mce")


def write_reports_jsonl(reports: list[IterationReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def read_reports_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
