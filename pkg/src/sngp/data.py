"""Deterministic 2D benchmark datasets, evaluation grids, and CSV persistence.

Two labeled binary benchmarks are provided, each with a held-out cluster of
out-of-domain points the model never trains on:

* two ovals: a pair of near-flat Gaussian clusters mirrored around x = 0,
  linearly separable.
* two moons: the usual interleaved half circles (unit radius, second moon
  shifted right and down) with isotropic Gaussian noise.

Both generators are pure functions of their parameters and seed.  The OOD
cluster is displaced well away from the labeled data (see the module
constants) so "far from the data" is true by construction.

CSV formats (version-stable, 17 significant digits so round-trips are exact):
  dataset:  header ``x1,x2,label``; label is the class id, -1 marks OOD rows.
  surface:  header ``x1,x2,value``.
Optional ``# key=value`` comment lines may precede the header (the CLI uses
them to embed its config echo); readers skip them.  A surface can also be
written as a plain P2 (ASCII) PGM image with values mapped linearly onto
0..255 for quick visual checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import RngState

# Two-ovals geometry: cluster centers mirrored in x, elongated along x.
OVAL_CENTER_X = 1.2
OVAL_SD_LONG = 0.55
OVAL_SD_FLAT = 0.08

# OOD cluster placement shared by both benchmarks (above and between the
# classes, several cluster widths away from any labeled point).
OOD_CENTER = (0.25, 2.6)
OOD_SD = 0.12

MOON_NOISE_DEFAULT = 0.1


@dataclass
class Dataset2D:
    """Labeled 2D points plus an optional held-out OOD cloud."""

    points: np.ndarray
    labels: np.ndarray
    ood_points: np.ndarray | None
    name: str
    seed: int

    def __post_init__(self):
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels disagree on sample count")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite coordinates")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class EvalGrid:
    """Row-major rectangular grid of evaluation points.

    Points are ordered with x2 as the slow axis and x1 as the fast axis, so
    row r of the grid image corresponds to points [r * nx, (r + 1) * nx).
    """

    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        if not (self.x1_min < self.x1_max and self.x2_min < self.x2_max):
            raise ValueError("grid bounds must be well ordered")

    def points(self) -> np.ndarray:
        xs = np.linspace(self.x1_min, self.x1_max, self.nx)
        ys = np.linspace(self.x2_min, self.x2_max, self.ny)
        xx, yy = np.meshgrid(xs, ys)
        return np.column_stack([xx.ravel(), yy.ravel()])


def gen_two_ovals(n_per_class: int, seed: int, n_ood: int | None = None) -> Dataset2D:
    """Two mirrored anisotropic Gaussian clusters plus a displaced OOD cluster."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = RngState(seed).derive("two_ovals")
    n_ood = n_per_class if n_ood is None else n_ood
    pts = []
    labels = []
    for cls, cx in enumerate((-OVAL_CENTER_X, OVAL_CENTER_X)):
        x = cx + OVAL_SD_LONG * rng.normal(n_per_class)
        y = OVAL_SD_FLAT * rng.normal(n_per_class)
        pts.append(np.column_stack([x, y]))
        labels.append(np.full(n_per_class, cls))
    ood = np.column_stack([
        OOD_CENTER[0] + OOD_SD * rng.normal(n_ood),
        OOD_CENTER[1] + OOD_SD * rng.normal(n_ood),
    ])
    return Dataset2D(points=np.vstack(pts), labels=np.concatenate(labels),
                     ood_points=ood, name="two_ovals", seed=seed)


def gen_two_moons(n_per_class: int, noise_sd: float = MOON_NOISE_DEFAULT, seed: int = 0,
                  n_ood: int | None = None) -> Dataset2D:
    """Interleaved half-circle classes plus a displaced OOD cluster.

    Class 0 is the upper moon (cos t, sin t), class 1 the lower moon
    (1 - cos t, 0.5 - sin t), t evenly spaced on [0, pi], then Gaussian noise
    of scale ``noise_sd`` is added to both coordinates.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if noise_sd < 0.0:
        raise ValueError("noise_sd must be >= 0")
    rng = RngState(seed).derive("two_moons")
    n_ood = n_per_class if n_ood is None else n_ood
    t = np.linspace(0.0, np.pi, n_per_class)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    pts = np.vstack([upper, lower])
    if noise_sd > 0.0:
        pts = pts + noise_sd * rng.normal(pts.size).reshape(pts.shape)
    labels = np.concatenate([np.zeros(n_per_class, dtype=int), np.ones(n_per_class, dtype=int)])
    ood = np.column_stack([
        OOD_CENTER[0] + OOD_SD * rng.normal(n_ood),
        OOD_CENTER[1] + OOD_SD * rng.normal(n_ood),
    ])
    return Dataset2D(points=pts, labels=labels, ood_points=ood, name="two_moons", seed=seed)


def gen_grid(bounds: tuple[float, float, float, float], resolution: tuple[int, int]) -> EvalGrid:
    """Grid over (x1_min, x1_max, x2_min, x2_max) at (nx, ny) points per axis."""
    x1_min, x1_max, x2_min, x2_max = bounds
    nx, ny = resolution
    return EvalGrid(x1_min=x1_min, x1_max=x1_max, x2_min=x2_min, x2_max=x2_max, nx=nx, ny=ny)


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


class CsvFormatError(ValueError):
    """Malformed CSV input; the message carries the offending line number."""


def _meta_lines(meta: dict | None) -> list[str]:
    if not meta:
        return []
    return [f"# {k}={v}" for k, v in meta.items()]


def _read_header(f, expected: str):
    """Skip leading comment lines, check the column header, and return the
    number of lines consumed."""
    lineno = 0
    while True:
        line = f.readline()
        lineno += 1
        if not line:
            raise CsvFormatError(f"line {lineno}: missing header {expected!r}")
        stripped = line.strip()
        if stripped.startswith("#") or not stripped:
            continue
        if stripped != expected:
            raise CsvFormatError(f"line {lineno}: expected header {expected!r}, got {stripped!r}")
        return lineno


def dataset_to_csv(ds: Dataset2D, path: str, meta: dict | None = None) -> None:
    lines = _meta_lines(meta) + ["x1,x2,label"]
    for (x1, x2), lab in zip(ds.points, ds.labels):
        lines.append(f"{_fmt(x1)},{_fmt(x2)},{int(lab)}")
    if ds.ood_points is not None:
        for x1, x2 in ds.ood_points:
            lines.append(f"{_fmt(x1)},{_fmt(x2)},-1")
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def dataset_from_csv(path: str, name: str = "", seed: int = 0) -> Dataset2D:
    points, labels, ood = [], [], []
    with open(path, "r", encoding="ascii") as f:
        start = _read_header(f, "x1,x2,label")
        for lineno, line in enumerate(f, start=start + 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise CsvFormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                x1, x2, lab = float(parts[0]), float(parts[1]), int(parts[2])
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from exc
            if lab == -1:
                ood.append((x1, x2))
            else:
                points.append((x1, x2))
                labels.append(lab)
    if not points:
        raise CsvFormatError("no labeled rows found")
    return Dataset2D(points=np.array(points, dtype=np.float64),
                     labels=np.array(labels, dtype=int),
                     ood_points=np.array(ood, dtype=np.float64) if ood else None,
                     name=name, seed=seed)


def surface_to_csv(points: np.ndarray, values: np.ndarray, path: str,
                   meta: dict | None = None) -> None:
    if points.shape[0] != values.shape[0]:
        raise ValueError("points and values disagree on count")
    lines = _meta_lines(meta) + ["x1,x2,value"]
    for (x1, x2), v in zip(points, values):
        lines.append(f"{_fmt(x1)},{_fmt(x2)},{_fmt(v)}")
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def surface_from_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    pts, vals = [], []
    with open(path, "r", encoding="ascii") as f:
        start = _read_header(f, "x1,x2,value")
        for lineno, line in enumerate(f, start=start + 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise CsvFormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                pts.append((float(parts[0]), float(parts[1])))
                vals.append(float(parts[2]))
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from exc
    return np.array(pts, dtype=np.float64), np.array(vals, dtype=np.float64)


def surface_to_pgm(values: np.ndarray, grid: EvalGrid, path: str,
                   meta: dict | None = None) -> None:
    """Write a surface as an ASCII (P2) grayscale image, min->0, max->255."""
    img = np.asarray(values, dtype=np.float64).reshape(grid.ny, grid.nx)
    lo, hi = img.min(), img.max()
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0).astype(int)
    else:
        scaled = np.zeros_like(img, dtype=int)
    lines = ["P2"] + _meta_lines(meta) + [f"{grid.nx} {grid.ny}", "255"]
    for row in scaled:
        lines.append(" ".join(str(v) for v in row))
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def min_distance_to_set(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to its nearest reference point."""
    points = np.asarray(points, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    d2 = (np.sum(points**2, axis=1)[:, None] + np.sum(reference**2, axis=1)[None, :]
          - 2.0 * points @ reference.T)
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0))
