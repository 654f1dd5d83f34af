"""Linear-region analysis: activation-pattern extraction, clustering of
points that share a pattern, degenerate-unit censuses, per-region
affinity verification, the theoretical region-count formulas, and 2-D
class/region rasterisation.

A piecewise-linear network computes one affine function inside each
activation pattern, so grouping points by exact pattern equality
partitions them into the network's observed linear regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .layers import INFER
from .network import NetworkSpec, forward
from .numerics import SeededRng

__all__ = [
    "ActivationPattern",
    "RegionMap",
    "RegionCensus",
    "extract_pattern",
    "enumerate_regions",
    "census",
    "affinity_check",
    "maxout_region_bound",
    "rectifier_region_bound",
    "RasterMaps",
    "decision_raster",
]

# A pattern is one small integer per piecewise-linear unit, layer-major
# then unit-minor, stored as an int16 vector.
ActivationPattern = np.ndarray


def _pattern_matrix(spec: NetworkSpec, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Patterns for every point, one row each, in inference mode."""
    rows = []
    for start in range(0, len(points), chunk):
        _, cache = forward(spec, points[start : start + chunk], INFER)
        batch = cache.patterns[0].shape[0]
        flat = [p.reshape(batch, -1) for p in cache.patterns]
        rows.append(np.concatenate(flat, axis=1).astype(np.int16))
    return np.concatenate(rows, axis=0)


def extract_pattern(spec: NetworkSpec, x: np.ndarray) -> ActivationPattern:
    """Region indices of a single input across all units."""
    x = np.asarray(x, dtype=np.float64)
    return _pattern_matrix(spec, x[None, :])[0]


@dataclass
class RegionMap:
    """Points grouped by exact pattern equality, in first-occurrence
    order. patterns[i] is region i's shared pattern and point_lists[i]
    the indices of the points inside it."""

    patterns: list[ActivationPattern]
    point_lists: list[np.ndarray]
    total_points: int

    @property
    def region_count(self) -> int:
        return len(self.patterns)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.point_lists]

    def indices_for(self, pattern: ActivationPattern) -> np.ndarray | None:
        key = np.asarray(pattern, dtype=np.int16).tobytes()
        for pat, ix in zip(self.patterns, self.point_lists):
            if pat.tobytes() == key:
                return ix
        return None


def enumerate_regions(spec: NetworkSpec, points: np.ndarray) -> RegionMap:
    """Group the points by their activation pattern. Points exactly on a
    boundary follow the layer tie rules, so every point lands in exactly
    one region."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise DomainError("enumerate_regions needs a nonempty point set")
    mat = _pattern_matrix(spec, points)
    groups: dict[bytes, list[int]] = {}
    keys: dict[bytes, np.ndarray] = {}
    for i in range(len(points)):
        key = mat[i].tobytes()
        if key not in groups:
            groups[key] = []
            keys[key] = mat[i]
        groups[key].append(i)
    patterns = [keys[k] for k in groups]
    point_lists = [np.asarray(ix, dtype=np.int64) for ix in groups.values()]
    return RegionMap(patterns, point_lists, len(points))


@dataclass
class RegionCensus:
    """Region count plus per-unit lane usage. A unit is degenerate when
    a single lane claims every point, making the unit one linear
    function over the whole observed set."""

    region_count: int
    region_sizes: list[int]
    lane_histograms: list[np.ndarray]  # one (units, regions_per_unit) array per node
    degenerate_unit_count: int
    total_units: int

    @property
    def degenerate_fraction(self) -> float:
        return self.degenerate_unit_count / self.total_units


def census(spec: NetworkSpec, points: np.ndarray) -> RegionCensus:
    """Count regions and tally lane usage per unit over the point set.

    Convolutional nodes emit one pattern entry per channel unit per
    spatial position; positions are folded into the channel unit's
    histogram, so degeneracy means one lane won at every point and
    every position.
    """
    points = np.asarray(points, dtype=np.float64)
    regions = enumerate_regions(spec, points)
    mat = _pattern_matrix(spec, points)
    _, probe = forward(spec, points[:1], INFER)
    n_points = len(points)
    histograms = []
    degenerate = 0
    total_units = 0
    col = 0
    for node, probe_pattern in zip(spec.nodes, probe.patterns):
        bins = node.act.regions_per_unit
        units = probe_pattern.shape[1]
        span = int(np.prod(probe_pattern.shape[1:]))
        sub = mat[:, col : col + span].reshape(n_points, units, span // units)
        col += span
        hist = np.zeros((units, bins), dtype=np.int64)
        for lane in range(bins):
            hist[:, lane] = (sub == lane).sum(axis=(0, 2))
        histograms.append(hist)
        degenerate += int((hist.max(axis=1) == hist.sum(axis=1)).sum())
        total_units += units
    return RegionCensus(
        region_count=regions.region_count,
        region_sizes=regions.sizes(),
        lane_histograms=histograms,
        degenerate_unit_count=degenerate,
        total_units=total_units,
    )


def affinity_check(
    spec: NetworkSpec,
    region_points: np.ndarray,
    trials: int = 16,
    tol: float = 1e-8,
    seed: int = 0,
) -> bool | None:
    """Midpoint linearity test on pre-softmax logits.

    For sampled pairs inside one region, the midpoint must satisfy
    F(mid) = (F(a) + F(b)) / 2 within tol. Returns True/False, or None
    (inconclusive) when there are fewer than 3 points or a midpoint
    falls outside the region, which violates the precondition rather
    than disproving linearity.
    """
    pts = np.asarray(region_points, dtype=np.float64)
    if len(pts) < 3:
        return None
    base = extract_pattern(spec, pts[0])
    rng = SeededRng(seed)
    for _ in range(trials):
        ij = rng.integers(0, len(pts), 2)
        a, b = pts[ij[0]], pts[ij[1]]
        mid = 0.5 * (a + b)
        tri = np.stack([a, b, mid])
        pat = _pattern_matrix(spec, tri)
        if not (
            np.array_equal(pat[0], base)
            and np.array_equal(pat[1], base)
            and np.array_equal(pat[2], base)
        ):
            return None
        logits, _ = forward(spec, tri, INFER)
        if np.abs(logits[2] - 0.5 * (logits[0] + logits[1])).max() > tol:
            return False
    return True


def maxout_region_bound(L: int, n0: int, k: int) -> int:
    """k^(L-1) * k^(n0): the constructible region count for L-layer
    maxout networks of width n0 with rank k, exact integer arithmetic."""
    if L < 1 or n0 < 1 or k < 2:
        raise DomainError(f"need L >= 1, n0 >= 1, k >= 2; got ({L}, {n0}, {k})")
    return k ** (L - 1) * k**n0


def rectifier_region_bound(L: int, n: int, n0: int) -> int:
    """floor(n/n0)^(L-1) * n^(n0), a reference value for rectifier
    networks of width n on n0 inputs. This is a lower-bound growth-rate
    expression, not an exact count; empirical counts are never asserted
    against it."""
    if n0 < 1 or n < n0:
        raise DomainError(f"need n >= n0 >= 1, got n={n}, n0={n0}")
    if L < 1:
        raise DomainError(f"need L >= 1, got {L}")
    return (n // n0) ** (L - 1) * n**n0


@dataclass
class RasterMaps:
    """Grid evaluation of a 2-D-input network: class_grid holds argmax
    logits, region_grid dense region ids by first occurrence (row-major
    scan), and patterns maps each id back to its activation pattern."""

    class_grid: np.ndarray
    region_grid: np.ndarray
    patterns: list[ActivationPattern]


def decision_raster(spec: NetworkSpec, bounds, resolution: int) -> RasterMaps:
    """Evaluate an evenly spaced grid over the box (inference mode).

    bounds is (xmin, xmax, ymin, ymax). Row 0 of each grid is the top of
    the box (ymax) so the arrays render as images without flipping.
    """
    if tuple(spec.input_dims) != (2,):
        raise DomainError(
            f"decision_raster needs a 2-D-input network, got dims {spec.input_dims}"
        )
    if resolution < 1:
        raise DomainError(f"resolution must be >= 1, got {resolution}")
    xmin, xmax, ymin, ymax = (float(v) for v in bounds)
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymax, ymin, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    class_rows = []
    for start in range(0, len(pts), 8192):
        logits, _ = forward(spec, pts[start : start + 8192], INFER)
        class_rows.append(logits.argmax(axis=1).astype(np.int32))
    class_grid = np.concatenate(class_rows).reshape(resolution, resolution)
    mat = _pattern_matrix(spec, pts)
    ids = np.empty(len(pts), dtype=np.int32)
    seen: dict[bytes, int] = {}
    patterns: list[ActivationPattern] = []
    for i in range(len(pts)):
        key = mat[i].tobytes()
        rid = seen.get(key)
        if rid is None:
            rid = len(patterns)
            seen[key] = rid
            patterns.append(mat[i])
        ids[i] = rid
    region_grid = ids.reshape(resolution, resolution)
    return RasterMaps(class_grid, region_grid, patterns)
