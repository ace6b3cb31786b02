"""Random-Fourier-feature Gaussian-process output layer with a Laplace posterior.

The layer maps a hidden vector ``h`` to features

    phi = sqrt(2 / D) * cos(-(1 / length_scale) * W h' + b)

with ``W`` frozen i.i.d. standard normal and ``b`` frozen Uniform(0, 2*pi);
``h'`` is ``h`` after optional layer normalization and an optional frozen
Gaussian down-projection.  Inner products of these features approximate an
RBF kernel: ``phi(x) . phi(y) ~= exp(-||x - y||^2 / (2 l^2))``.

Class logits are linear in the features, ``g_k = phi . beta_k``, so the model
is a Bayesian linear model in ``beta`` and the Laplace approximation to its
posterior is Gaussian with a closed-form per-class precision

    precision_k = s * I + sum_i p_ik (1 - p_ik) phi_i phi_i^T

accumulated over data (``update_precision_exact``), or tracked with a
discounted moving average during the final training epoch
(``update_precision_minibatch``; previous precision weighted ``m``, fresh
minibatch term weighted ``1 - m``).  Predictive variance for class k is
``phi^T precision_k^{-1} phi``, evaluated through an SPD solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import RngState, NotSpdError, spd_factor, spd_solve_factored

LAYER_NORM_EPS = 1e-6


@dataclass
class GpPrediction:
    """Posterior summary for one input: logits mean/variance, MC-averaged probs,
    and the logit-magnitude uncertainty score K / (K + sum_k exp(logit_k))."""

    mean_logits: np.ndarray
    variance_logits: np.ndarray
    probs: np.ndarray
    uncertainty_ds: float


class RffGpLayer:
    """Frozen random-feature frontend plus trainable output weights and
    per-class Laplace precision matrices."""

    def __init__(self, in_dim: int, num_features: int, num_classes: int, rng: RngState,
                 length_scale: float = 2.0, ridge_s: float = 0.001, discount_m: float = 0.999,
                 use_layer_norm: bool = True, projection_dim: int | None = None,
                 shared_precision: bool = False):
        if length_scale <= 0.0:
            raise ValueError("length_scale must be positive")
        if ridge_s <= 0.0:
            raise ValueError("ridge_s must be positive")
        if not 0.0 <= discount_m < 1.0:
            raise ValueError("discount_m must lie in [0, 1)")
        self.in_dim = in_dim
        self.num_features = num_features
        self.num_classes = num_classes
        self.length_scale = float(length_scale)
        self.ridge_s = float(ridge_s)
        self.discount_m = float(discount_m)
        self.use_layer_norm = use_layer_norm
        self.shared_precision = shared_precision

        if projection_dim is not None:
            self.input_projection = rng.derive("gp_proj").normal_matrix(projection_dim, in_dim)
            feat_in = projection_dim
        else:
            self.input_projection = None
            feat_in = in_dim
        self.w_fixed = rng.derive("gp_w").normal_matrix(num_features, feat_in)
        self.b_fixed = rng.derive("gp_b").uniform(num_features, 0.0, 2.0 * np.pi)
        self.beta = np.zeros((num_classes, num_features))
        self.precision: list[np.ndarray] = []
        self._factors: list | None = None
        self.reset_precision()

    # -- feature pipeline ---------------------------------------------------

    def rff_features(self, h: np.ndarray) -> np.ndarray:
        """Cosine features of one hidden vector or a (batch, in_dim) matrix.

        Every entry is bounded by sqrt(2 / num_features).
        """
        h = np.asarray(h, dtype=np.float64)
        single = h.ndim == 1
        if single:
            h = h[None, :]
        phi, _ = self.features_with_tape(h)
        return phi[0] if single else phi

    def features_with_tape(self, h: np.ndarray) -> tuple[np.ndarray, dict]:
        """Batch features plus the intermediates needed for backprop into h."""
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected hidden dim {self.in_dim}, got {h.shape[-1]}")
        tape: dict = {}
        x = h
        if self.use_layer_norm:
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            inv_sd = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
            x = (x - mu) * inv_sd
            tape["ln_out"] = x
            tape["ln_inv_sd"] = inv_sd
        if self.input_projection is not None:
            x = x @ self.input_projection.T
        z = -(1.0 / self.length_scale) * (x @ self.w_fixed.T) + self.b_fixed
        tape["z"] = z
        phi = np.sqrt(2.0 / self.num_features) * np.cos(z)
        return phi, tape

    def backprop_features(self, tape: dict, grad_phi: np.ndarray) -> np.ndarray:
        """Gradient of the loss w.r.t. the hidden input, given d loss / d phi."""
        dz = -np.sqrt(2.0 / self.num_features) * np.sin(tape["z"]) * grad_phi
        dx = -(1.0 / self.length_scale) * (dz @ self.w_fixed)
        if self.input_projection is not None:
            dx = dx @ self.input_projection
        if self.use_layer_norm:
            y = tape["ln_out"]
            inv_sd = tape["ln_inv_sd"]
            mean_dx = dx.mean(axis=-1, keepdims=True)
            mean_dx_y = (dx * y).mean(axis=-1, keepdims=True)
            dx = (dx - mean_dx - y * mean_dx_y) * inv_sd
        return dx

    def logits(self, phi: np.ndarray) -> np.ndarray:
        """Class logits ``g_k = phi . beta_k`` for a vector or batch of features."""
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape[-1] != self.num_features:
            raise ValueError(f"expected {self.num_features} features, got {phi.shape[-1]}")
        return phi @ self.beta.T

    # -- Laplace posterior precision -----------------------------------------

    def _num_precision(self) -> int:
        return 1 if self.shared_precision else self.num_classes

    def reset_precision(self) -> None:
        """Set every class precision to ridge_s * I."""
        eye = np.eye(self.num_features)
        self.precision = [self.ridge_s * eye.copy() for _ in range(self._num_precision())]
        self._factors = None

    def _fisher_terms(self, phi_batch: np.ndarray, probs_batch: np.ndarray) -> list[np.ndarray]:
        """Per-class sums p_ik (1 - p_ik) phi_i phi_i^T, symmetrized exactly."""
        terms = []
        weights = probs_batch * (1.0 - probs_batch)
        for k in range(self.num_classes):
            t = (phi_batch * weights[:, k:k + 1]).T @ phi_batch
            terms.append(0.5 * (t + t.T))
        if self.shared_precision:
            terms = [sum(terms) / self.num_classes]
        return terms

    def _check_batch(self, phi_batch: np.ndarray, probs_batch: np.ndarray) -> None:
        if phi_batch.ndim != 2 or phi_batch.shape[1] != self.num_features:
            raise ValueError(f"phi batch must be (M, {self.num_features}), got {phi_batch.shape}")
        if probs_batch.shape != (phi_batch.shape[0], self.num_classes):
            raise ValueError(f"probs batch must be (M, {self.num_classes}), got {probs_batch.shape}")

    def update_precision_minibatch(self, phi_batch: np.ndarray, probs_batch: np.ndarray) -> None:
        """Discounted moving-average update: m * previous + (1 - m) * batch term.

        An empty batch contributes a zero fresh term, i.e. it only scales the
        previous precision by m.
        """
        phi_batch = np.asarray(phi_batch, dtype=np.float64)
        probs_batch = np.asarray(probs_batch, dtype=np.float64)
        if phi_batch.shape[0] == 0:
            for p in self.precision:
                p *= self.discount_m
            self._factors = None
            return
        self._check_batch(phi_batch, probs_batch)
        terms = self._fisher_terms(phi_batch, probs_batch)
        for p, t in zip(self.precision, terms):
            p *= self.discount_m
            p += (1.0 - self.discount_m) * t
        self._factors = None

    def update_precision_exact(self, phi_all: np.ndarray, probs_all: np.ndarray) -> None:
        """One-pass exact precision: ridge_s * I plus the full-data Fisher term."""
        self.reset_precision()
        phi_all = np.asarray(phi_all, dtype=np.float64)
        probs_all = np.asarray(probs_all, dtype=np.float64)
        if phi_all.shape[0] == 0:
            return
        self._check_batch(phi_all, probs_all)
        terms = self._fisher_terms(phi_all, probs_all)
        for p, t in zip(self.precision, terms):
            p += t
        self._factors = None

    def _precision_factors(self):
        if self._factors is None:
            try:
                self._factors = [spd_factor(p) for p in self.precision]
            except NotSpdError as exc:
                raise NotSpdError(f"precision matrix lost positive definiteness: {exc}") from exc
        return self._factors

    def predictive_variance(self, phi: np.ndarray, k: int) -> float:
        """Posterior logit variance phi^T precision_k^{-1} phi (always >= 0)."""
        phi = np.asarray(phi, dtype=np.float64)
        factor = self._precision_factors()[0 if self.shared_precision else k]
        return float(max(phi @ spd_solve_factored(factor, phi), 0.0))

    def predictive_variance_batch(self, phi_batch: np.ndarray) -> np.ndarray:
        """(batch, K) logit variances via one factored solve per class."""
        phi_batch = np.asarray(phi_batch, dtype=np.float64)
        factors = self._precision_factors()
        out = np.empty((phi_batch.shape[0], self.num_classes))
        for k in range(self.num_classes):
            factor = factors[0 if self.shared_precision else k]
            sol = spd_solve_factored(factor, phi_batch.T)
            out[:, k] = np.maximum(np.einsum("ij,ji->i", phi_batch, sol), 0.0)
        return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mc_softmax(mean: np.ndarray, variance: np.ndarray, n_samples: int, rng: RngState) -> np.ndarray:
    """Average softmax(mean + sqrt(variance) * eps) over n_samples normal draws.

    With zero variance this is exactly softmax(mean) for any sample count.
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if np.any(variance < 0.0):
        raise ValueError("variance must be nonnegative")
    if not np.any(variance > 0.0):
        return softmax(mean)
    sd = np.sqrt(variance)
    eps = rng.normal(n_samples * mean.shape[-1]).reshape(n_samples, mean.shape[-1])
    return softmax(mean + sd * eps).mean(axis=0)
