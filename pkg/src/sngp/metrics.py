"""Calibration, proper-scoring, and OOD-ranking metrics.

* ``ece``: equal-width binning of the maximum predicted probability into M
  bins (default 15); the score is the bin-count-weighted mean absolute gap
  between per-bin accuracy and per-bin confidence.  Empty bins contribute 0.
* ``nll`` / ``brier``: mean negative log-likelihood (probabilities clipped at
  1e-12) and the mean multiclass quadratic score sum_k (p_k - onehot_k)^2.
* ``auroc``: rank statistic with average ranks across ties, equivalent to
  pair counting with half credit for tied scores.
* ``aupr``: step integration of the precision-recall curve at the distinct
  score thresholds, OOD treated as the positive class (higher score = more
  OOD).
* ``dempster_shafer``: K / (K + sum_k exp(logit_k)), a logit-magnitude
  uncertainty in (0, 1) that decreases as any logit grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import rankdata


@dataclass
class PredictionSet:
    """Aligned predictions for a batch of inputs.

    probs: (N, K) rows on the simplex.  labels: (N,) int class ids.
    ood_flags / uncertainty_scores are optional companions for OOD ranking.
    """

    probs: np.ndarray
    labels: np.ndarray
    ood_flags: np.ndarray | None = None
    uncertainty_scores: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ValueError("probs must be (N, K) aligned with labels")
        row_sums = self.probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9) or np.any(self.probs < -1e-12):
            raise ValueError("probs rows must lie on the simplex")


def accuracy(preds: PredictionSet) -> float:
    return float(np.mean(np.argmax(preds.probs, axis=1) == preds.labels))


def ece(preds: PredictionSet, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bin m covers [m/M, (m+1)/M); confidence exactly 1.0 falls in the last bin.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = preds.probs.max(axis=1)
    correct = (np.argmax(preds.probs, axis=1) == preds.labels).astype(np.float64)
    idx = np.minimum((conf * num_bins).astype(int), num_bins - 1)
    n = conf.shape[0]
    total = 0.0
    for m in range(num_bins):
        mask = idx == m
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        total += (cnt / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def ece_bin_table(preds: PredictionSet, num_bins: int = 15) -> list[tuple[float, float, float, int]]:
    """Reliability table rows (bin_lo, confidence, accuracy, count); empty bins give zeros."""
    conf = preds.probs.max(axis=1)
    correct = (np.argmax(preds.probs, axis=1) == preds.labels).astype(np.float64)
    idx = np.minimum((conf * num_bins).astype(int), num_bins - 1)
    rows = []
    for m in range(num_bins):
        mask = idx == m
        cnt = int(mask.sum())
        if cnt:
            rows.append((m / num_bins, float(conf[mask].mean()), float(correct[mask].mean()), cnt))
        else:
            rows.append((m / num_bins, 0.0, 0.0, 0))
    return rows


def nll(preds: PredictionSet) -> float:
    p = np.clip(preds.probs[np.arange(len(preds.labels)), preds.labels], 1e-12, None)
    return float(np.mean(-np.log(p)))


def brier(preds: PredictionSet) -> float:
    onehot = np.zeros_like(preds.probs)
    onehot[np.arange(len(preds.labels)), preds.labels] = 1.0
    return float(np.mean(np.sum((preds.probs - onehot) ** 2, axis=1)))


def _check_binary_flags(flags: np.ndarray) -> np.ndarray:
    flags = np.asarray(flags, dtype=bool)
    if flags.all() or not flags.any():
        raise ValueError("need at least one positive and one negative example")
    return flags


def auroc(scores: np.ndarray, ood_flags: np.ndarray) -> float:
    """Area under the ROC curve, ties given half credit via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = _check_binary_flags(ood_flags)
    ranks = rankdata(scores)
    n_pos = int(flags.sum())
    n_neg = flags.size - n_pos
    rank_sum = float(ranks[flags].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aupr(scores: np.ndarray, ood_flags: np.ndarray) -> float:
    """Area under the precision-recall curve by step integration.

    Thresholds sweep the distinct scores from high to low; each recall
    increment contributes its precision, i.e. sum_i (R_i - R_{i-1}) * P_i.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = _check_binary_flags(ood_flags)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_flags = flags[order].astype(np.float64)
    tp = np.cumsum(sorted_flags)
    fp = np.cumsum(1.0 - sorted_flags)
    # Collapse ties: evaluate only at the last index of each distinct score.
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    tp, fp = tp[distinct], fp[distinct]
    n_pos = flags.sum()
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def dempster_shafer(logits: np.ndarray) -> float:
    """Uncertainty K / (K + sum_k exp(logit_k)), strictly decreasing in each logit."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    k = logits.shape[-1]
    # K/(K + e^lse) == sigmoid(log K - lse), stable for any logit magnitude.
    return float(expit(np.log(k) - logsumexp(logits)))


def metrics_report(values: dict[str, float]) -> str:
    """Flat ``metric=value`` text block (one pair per line)."""
    return "\n".join(f"{k}={v:.17g}" for k, v in values.items()) + "\n"


def metrics_csv_row(values: dict[str, float], keys: list[str]) -> str:
    """One CSV row with the requested keys, for sweep aggregation."""
    return ",".join(f"{values[k]:.17g}" if isinstance(values[k], float) else str(values[k])
                    for k in keys)
