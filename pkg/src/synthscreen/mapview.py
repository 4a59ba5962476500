"""PCA maps of descriptor space: density and mean-RankAvg grids.

The covariance is accumulated over fixed row blocks and combined pairwise,
so results do not depend on how the input is chunked in memory.
"""
from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DEFAULT_BLOCK = 65536


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    feature_names: Optional[tuple[str, ...]] = None

    @property
    def k(self) -> int:
        return self.components.shape[0]


def _pairwise_sum(parts: list):
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _blocks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def covariance(X: np.ndarray, block: int = DEFAULT_BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """(mean, covariance with 1/(n-1) normalization) via a fixed block reduction."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    spans = _blocks(n, block)
    mean = _pairwise_sum([X[a:b].sum(axis=0) for a, b in spans]) / n
    scatter = _pairwise_sum([(X[a:b] - mean).T @ (X[a:b] - mean) for a, b in spans])
    return mean, scatter / (n - 1)


def pca_fit(X, k: int = 2, feature_names: Optional[Sequence[str]] = None, block: int = DEFAULT_BLOCK) -> PcaModel:
    """Principal axes from the eigendecomposition of the d×d covariance.

    Each axis is signed so its largest-magnitude component is positive
    (first such index on ties).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= k <= d:
        raise ValueError(f"k must be between 1 and {d}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite values in input")
    mean, cov = covariance(X, block)
    total = float(np.trace(cov))
    if total <= 0:
        raise ValueError("input has zero variance")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:k]
    vals = np.clip(vals[order], 0.0, None)
    axes = vecs[:, order].T.copy()
    for row in axes:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    names = tuple(feature_names) if feature_names is not None else None
    return PcaModel(mean, axes, vals, vals / total, names)


def project(model: PcaModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=float) - model.mean) @ model.components.T


def reconstruct(model: PcaModel, Z) -> np.ndarray:
    return np.asarray(Z, dtype=float) @ model.components + model.mean


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int = 50
    ny: int = 50

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must have positive extent")

    @classmethod
    def covering(cls, points: np.ndarray, nx: int = 50, ny: int = 50, pad: float = 1e-9) -> "GridSpec":
        p = np.asarray(points, dtype=float)
        lo, hi = p.min(axis=0), p.max(axis=0)
        span = np.maximum(hi - lo, 1.0) * pad
        lo, hi = lo - span, hi + span
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), nx, ny)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return np.linspace(self.x_min, self.x_max, self.nx + 1), np.linspace(self.y_min, self.y_max, self.ny + 1)


@dataclass
class GridSummary:
    spec: GridSpec
    counts: np.ndarray  # (nx, ny), every point
    sums: np.ndarray
    valued: Optional[np.ndarray] = None  # points with a finite value; None means all of them

    @property
    def means(self) -> np.ndarray:
        n = self.counts if self.valued is None else self.valued
        out = np.full(self.counts.shape, np.nan)
        nz = n > 0
        out[nz] = self.sums[nz] / n[nz]
        return out

    @property
    def density(self) -> np.ndarray:
        return self.counts / max(int(self.counts.sum()), 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell_x", "cell_y", "count", "mean_rankavg"])
        means = self.means
        for i in range(self.spec.nx):
            for j in range(self.spec.ny):
                m = means[i, j]
                w.writerow([i, j, int(self.counts[i, j]), "" if np.isnan(m) else repr(float(m))])
        return buf.getvalue()


def cell_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Cell of each value; a value on an interior edge goes to the lower cell."""
    idx = np.searchsorted(edges, values, side="left") - 1
    return np.clip(idx, 0, len(edges) - 2)


def grid_summary(points, values, spec: Optional[GridSpec] = None) -> GridSummary:
    """Per-cell counts and value means; NaN values count toward density but not toward means."""
    P = np.asarray(points, dtype=float)
    v = np.asarray(values, dtype=float)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("points must have at least two columns")
    if len(P) == 0:
        raise ValueError("no points to summarize")
    if len(P) != len(v):
        raise ValueError("points and values must have equal length")
    spec = spec or GridSpec.covering(P[:, :2])
    ex, ey = spec.edges()
    ix, iy = cell_index(P[:, 0], ex), cell_index(P[:, 1], ey)
    flat = ix * spec.ny + iy
    size = spec.nx * spec.ny
    counts = np.bincount(flat, minlength=size).reshape(spec.nx, spec.ny)
    ok = ~np.isnan(v)
    sums = np.bincount(flat[ok], weights=v[ok], minlength=size).reshape(spec.nx, spec.ny)
    valued = None if ok.all() else np.bincount(flat[ok], minlength=size).reshape(spec.nx, spec.ny)
    return GridSummary(spec, counts, sums, valued)


def histogram_csv(values, bins: int = 20, lo: float = 0.0, hi: float = 1.0) -> str:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(lo, hi))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for a, b, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([repr(float(a)), repr(float(b)), int(c)])
    return buf.getvalue()


@dataclass(frozen=True)
class MapConfig:
    k: int = 2
    nx: int = 50
    ny: int = 50
    bins: int = 20
    standardize: bool = True

    def __post_init__(self):
        if self.k < 2 or self.nx < 1 or self.ny < 1 or self.bins < 1:
            raise ValueError("k must be >= 2 and grid/bin counts positive")
