"""Decision-theoretic oracles: Bregman scores, entropies, and minimax witnesses.

A (separable) Bregman scoring rule is generated by a strictly concave
``psi``.  Sign conventions here are normalized so that every rule is a loss
(lower is better) and the propriety/minimax statements below hold literally;
textbook treatments differ by the sign of the generator, so the mapping is
spelled out:

    stored generator      psi (strictly concave on (0, 1))
    pointwise score       L(y, p) = psi'(p_y) + sum_k [psi(p_k) - p_k psi'(p_k)]
    expected score        s(p, p*) = E_{y ~ p*} L(y, p)
                                   = sum_k [(p*_k - p_k) psi'(p_k) + psi(p_k)]
    generalized entropy   H(p) = s(p, p) = sum_k psi(p_k)

    Brier rule   psi(t) = 1/K - t^2      ->  L(y, p) = sum_k (p_k - onehot_k)^2
    log rule     psi(t) = -t log t       ->  L(y, p) = -log p_y

Strict propriety follows from strict concavity: s(p, p*) > s(p*, p*) for
every p != p*.  The brute-force oracles below verify, on an exact simplex
grid, that the minimax prediction inf_p sup_{p*} s(p, p*) and the maximum of
H coincide at the uniform distribution, and ``l1_ece_bound_check`` verifies
by simulation that calibration error is bounded by the mean L1 gap between
the model and the data-generating conditionals at the predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import RngState
from .metrics import PredictionSet, ece

LOG_CLIP = 1e-9

# Enumerating more grid-point pairs than this is refused (the oracles are
# meant for K <= 4 at coarse steps).
MAX_GRID_PAIRS = 40_000_000


@dataclass
class ScoringRule:
    """Named Bregman rule with strictly concave generator ``psi``."""

    name: str
    psi: Callable[[np.ndarray], np.ndarray]
    psi_prime: Callable[[np.ndarray], np.ndarray]

    def check_concavity(self, num_points: int = 99) -> None:
        """Numerically verify strict concavity of psi on (0, 1)."""
        t = np.linspace(0.01, 0.99, num_points)
        h = 0.005
        second_diff = self.psi(t + h) - 2.0 * self.psi(t) + self.psi(t - h)
        if not np.all(second_diff < 0.0):
            raise ValueError(f"generator of rule {self.name!r} is not strictly concave")


def brier_rule(num_classes: int) -> ScoringRule:
    k = float(num_classes)
    return ScoringRule(name="brier",
                       psi=lambda t: 1.0 / k - np.square(t),
                       psi_prime=lambda t: -2.0 * t)


def log_rule() -> ScoringRule:
    def psi(t):
        t = np.clip(t, LOG_CLIP, None)
        return -t * np.log(t)

    def psi_prime(t):
        t = np.clip(t, LOG_CLIP, None)
        return -(np.log(t) + 1.0)

    return ScoringRule(name="log", psi=psi, psi_prime=psi_prime)


def _check_simplex(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what} must lie on the probability simplex")
    return p


def pointwise_score(y: int, p: np.ndarray, rule: ScoringRule) -> float:
    """Loss of predicting ``p`` when the outcome is class ``y`` (lower better)."""
    p = _check_simplex(p, "p")
    return float(rule.psi_prime(p[y]) + np.sum(rule.psi(p) - p * rule.psi_prime(p)))


def bregman_score(p: np.ndarray, p_star: np.ndarray, rule: ScoringRule) -> float:
    """Expected pointwise score of prediction ``p`` under outcomes ``y ~ p_star``.

    Strictly proper: for fixed p_star this is minimized over p exactly at
    p = p_star, where it equals the entropy sum_k psi(p_star_k).
    """
    p = _check_simplex(p, "p")
    p_star = _check_simplex(p_star, "p_star")
    return float(np.sum((p_star - p) * rule.psi_prime(p) + rule.psi(p)))


def bregman_entropy(p: np.ndarray, rule: ScoringRule) -> float:
    """Generalized entropy sum_k psi(p_k) (Shannon entropy for the log rule)."""
    p = _check_simplex(p, "p")
    return float(np.sum(rule.psi(p)))


@dataclass
class SimplexGrid:
    """All distributions over K classes with probabilities that are exact
    multiples of ``step``.  Stored as integer counts summing to 1/step, so
    membership and sums are exact."""

    num_classes: int
    step: float
    counts: np.ndarray = field(init=False)
    denominator: int = field(init=False)

    def __post_init__(self):
        n = round(1.0 / self.step)
        if abs(n * self.step - 1.0) > 1e-12:
            raise ValueError(f"step {self.step} does not divide 1")
        self.denominator = n
        self.counts = np.array(list(_compositions(n, self.num_classes)), dtype=np.int64)

    def points(self) -> np.ndarray:
        return self.counts / float(self.denominator)

    def __len__(self) -> int:
        return self.counts.shape[0]


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head, *rest)


class GridTooLargeError(ValueError):
    """The requested simplex-grid game is too large to enumerate."""


def _grids_for_game(num_classes: int, step: float) -> np.ndarray:
    grid = SimplexGrid(num_classes, step)
    pairs = len(grid) ** 2
    if pairs > MAX_GRID_PAIRS:
        raise GridTooLargeError(
            f"grid has {len(grid)} points -> {pairs} pairs to enumerate "
            f"(limit {MAX_GRID_PAIRS}); use a coarser step or fewer classes")
    return grid.points()


def minimax_oracle(num_classes: int, step: float, rule: ScoringRule) -> np.ndarray:
    """Brute-force argmin_p max_{p*} of the expected score over the grid squared.

    The returned grid point is the minimax-optimal prediction; for every
    Bregman rule it is the uniform distribution (up to one grid step).
    """
    pts = _grids_for_game(num_classes, step)
    # s(p, p*) = p* . psi'(p) + sum_k [psi(p_k) - p_k psi'(p_k)]; enumerate the
    # p*-dependent part as a (num_p*, num_p) matrix and take column maxima.
    psi_p = rule.psi(pts)
    psi_prime_p = rule.psi_prime(pts)
    const = np.sum(psi_p - pts * psi_prime_p, axis=1)
    sup_scores = (pts @ psi_prime_p.T).max(axis=0) + const
    return pts[int(np.argmin(sup_scores))]


def minimax_value(num_classes: int, step: float, rule: ScoringRule) -> float:
    """Value of the grid game at the minimax prediction."""
    pts = _grids_for_game(num_classes, step)
    psi_p = rule.psi(pts)
    psi_prime_p = rule.psi_prime(pts)
    const = np.sum(psi_p - pts * psi_prime_p, axis=1)
    sup_scores = (pts @ psi_prime_p.T).max(axis=0) + const
    return float(sup_scores.min())


def max_entropy_oracle(num_classes: int, step: float, rule: ScoringRule) -> np.ndarray:
    """Grid argmax of the generalized entropy; coincides with the minimax point."""
    pts = _grids_for_game(num_classes, step)
    entropies = rule.psi(pts).sum(axis=1)
    return pts[int(np.argmax(entropies))]


def mixture_predictive(p_ind: np.ndarray, p_domain: float, num_classes: int) -> np.ndarray:
    """Blend of the in-domain prediction and the uniform distribution.

    Returns p_ind * p_domain + (1/K) * (1 - p_domain), which stays on the
    simplex for any domain probability in [0, 1].
    """
    p_ind = _check_simplex(p_ind, "p_ind")
    if not 0.0 <= p_domain <= 1.0:
        raise ValueError("p_domain must lie in [0, 1]")
    if p_ind.shape[0] != num_classes:
        raise ValueError("p_ind length must equal num_classes")
    return p_ind * p_domain + (1.0 - p_domain) / num_classes


def sample_labels(probs: np.ndarray, rng: RngState) -> np.ndarray:
    """Draw one label per row of a (N, K) probability array."""
    u = rng.uniform(probs.shape[0], 0.0, 1.0)
    cdf = np.cumsum(probs, axis=1)
    labels = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(labels, probs.shape[1] - 1)


def l1_ece_bound_check(model_probs: np.ndarray, true_probs: np.ndarray, n_draws: int,
                       rng: RngState, num_bins: int = 15) -> tuple[float, float, bool]:
    """Simulate the calibration-error-vs-L1 bound on synthetic inputs.

    Labels are drawn y_i ~ true_probs_i (one per row, so n_draws must equal
    the row count).  Returns the empirical ECE of model_probs against those
    labels, the mean |true_probs[y_hat] - model_probs[y_hat]| at the predicted
    class, and whether ECE <= L1 + 3/sqrt(n_draws).
    """
    model_probs = np.asarray(model_probs, dtype=np.float64)
    true_probs = np.asarray(true_probs, dtype=np.float64)
    if model_probs.shape != true_probs.shape:
        raise ValueError("model and true probability arrays must be aligned")
    if model_probs.shape[0] != n_draws:
        raise ValueError("n_draws must equal the number of rows")
    labels = sample_labels(true_probs, rng)
    empirical_ece = ece(PredictionSet(probs=model_probs, labels=labels), num_bins=num_bins)
    y_hat = np.argmax(model_probs, axis=1)
    rows = np.arange(n_draws)
    empirical_l1 = float(np.mean(np.abs(true_probs[rows, y_hat] - model_probs[rows, y_hat])))
    holds = empirical_ece <= empirical_l1 + 3.0 / np.sqrt(n_draws)
    return empirical_ece, empirical_l1, bool(holds)
