"""Dense linear algebra primitives and deterministic random streams.

Everything downstream (network training, the Gaussian-process head, the
benchmark generators) funnels its numerics through this module so that the
core operations have a single, well-tested home:

* ``matvec`` / ``solve_spd`` wrap NumPy/SciPy dense routines behind explicit
  contracts (dimension checks, an SPD failure that raises ``NotSpdError``).
* ``power_iteration`` estimates the largest singular value of a matrix and
  returns the left singular-vector estimate so callers can warm-start the
  next call with a single iteration per training step.
* ``RngState`` is the only source of randomness in the package.  It wraps
  NumPy's PCG64 generator (the documented algorithm; identical seeds give
  bit-identical streams) and supports deriving independent child streams
  from string labels, so e.g. weight initialisation and minibatch shuffling
  never share a stream.

All arrays are 64-bit floats.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


class NotSpdError(ValueError):
    """Raised when a matrix expected to be SPD fails its Cholesky factorization."""


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with an explicit dimension check.

    Args:
        m: (rows, cols) matrix.
        v: (cols,) vector.

    Returns:
        (rows,) product vector.
    """
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1:
        raise ValueError(f"matvec expects a 2-d matrix and 1-d vector, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {m.shape}, vector has length {v.shape[0]}")
    return m @ v


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky.

    Args:
        a: (n, n) symmetric positive definite matrix.
        b: (n,) or (n, k) right-hand side.

    Returns:
        Solution with the same trailing shape as ``b``.

    Raises:
        NotSpdError: if the Cholesky factorization fails (matrix not SPD).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_spd expects a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {a.shape}, rhs has leading dim {b.shape[0]}")
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotSpdError(f"matrix is not SPD: {exc}") from exc
    return cho_solve(factor, b, check_finite=False)


def spd_factor(a: np.ndarray):
    """Cholesky-factor an SPD matrix once for repeated ``spd_solve_factored`` calls."""
    a = np.asarray(a, dtype=np.float64)
    try:
        return cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotSpdError(f"matrix is not SPD: {exc}") from exc


def spd_solve_factored(factor, b: np.ndarray) -> np.ndarray:
    """Solve against a factor produced by ``spd_factor``."""
    return cho_solve(factor, np.asarray(b, dtype=np.float64), check_finite=False)


def power_iteration(w: np.ndarray, iters: int, u0: np.ndarray) -> tuple[float, np.ndarray]:
    """Estimate the largest singular value of ``w`` by alternating power steps.

    One iteration maps ``u -> normalize(w @ normalize(w.T @ u))``, i.e. a
    power-method step for ``w @ w.T``.  The returned ``u`` is the unit-norm
    left singular-vector estimate; persisting it between calls lets a single
    iteration per training step converge over the course of training.

    Args:
        w: (rows, cols) matrix.
        iters: number of iterations, >= 1.
        u0: (rows,) nonzero starting vector.

    Returns:
        (sigma_hat, u): the singular-value estimate and the updated unit vector.
        A zero matrix returns sigma_hat 0.0 with ``u0`` (normalized) unchanged.
    """
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u0, dtype=np.float64).copy()
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if w.ndim != 2:
        raise ValueError(f"power_iteration expects a matrix, got shape {w.shape}")
    if u.shape != (w.shape[0],):
        raise ValueError(f"u0 must have length {w.shape[0]}, got {u.shape}")
    u_norm = np.linalg.norm(u)
    if u_norm == 0.0:
        raise ValueError("u0 must be nonzero")
    u /= u_norm
    if not np.any(w):
        return 0.0, u

    sigma = 0.0
    for _ in range(iters):
        v = w.T @ u
        v_norm = np.linalg.norm(v)
        if v_norm == 0.0:
            # u landed exactly in the left null space; the estimate stalls at 0.
            return 0.0, u
        v /= v_norm
        wu = w @ v
        sigma = np.linalg.norm(wu)
        if sigma == 0.0:
            return 0.0, u
        u = wu / sigma
    return float(sigma), u


def _label_entropy(label: str) -> int:
    # Stable across runs and platforms (unlike hash()).
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngState:
    """Deterministic random stream backed by NumPy's PCG64 generator.

    Identical seeds produce bit-identical streams.  ``derive(label)`` builds a
    child stream whose seed mixes the parent seed with a stable hash of the
    label, so differently-labelled streams are independent for practical
    purposes and insensitive to draw order elsewhere in the program.
    """

    def __init__(self, seed: int, _entropy: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._entropy = _entropy
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_entropy])))

    def derive(self, label: str) -> "RngState":
        """Create an independent child stream keyed by ``label``."""
        return RngState(self.seed, self._entropy + (_label_entropy(label),))

    def normal(self, n: int) -> np.ndarray:
        """Draw ``n`` i.i.d. standard normal values."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self._gen.standard_normal(n)

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        """Draw a (rows, cols) matrix of i.i.d. standard normals (row-major fill)."""
        return self.normal(rows * cols).reshape(rows, cols)

    def uniform(self, n: int, lo: float, hi: float) -> np.ndarray:
        """Draw ``n`` i.i.d. uniforms on [lo, hi)."""
        if n <= 0:
            raise ValueError("n must be positive")
        if not lo < hi:
            raise ValueError(f"require lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=n)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n)."""
        return self._gen.permutation(n)

    def bernoulli_mask(self, shape: tuple[int, ...], keep_prob: float) -> np.ndarray:
        """Float mask of 0/1 draws with P(1) = keep_prob."""
        return (self._gen.random(shape) < keep_prob).astype(np.float64)
