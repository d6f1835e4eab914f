"""Objective-space utilities: dominance, non-dominated filtering, 2-D hypervolume.

All objectives are minimised. Accuracies must be turned into error rates
before they get here (see :func:`error_rate`).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

FRONTIER_COLUMNS = ("objective_1", "objective_2", "run_id")


@dataclass(frozen=True)
class ParetoPoint:
    objectives: Tuple[float, ...]
    run_id: str = ""

    def __post_init__(self):
        obj = tuple(float(v) for v in np.atleast_1d(np.asarray(self.objectives, dtype=np.float64)))
        if not obj:
            raise ValueError("a point needs at least one objective")
        if not all(np.isfinite(obj)):
            raise ValueError(f"objectives must be finite, got {obj}")
        object.__setattr__(self, "objectives", obj)

    def __len__(self):
        return len(self.objectives)


PointLike = Union[ParetoPoint, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class Frontier:
    """Non-dominated points sorted by the first objective (ties by the next ones)."""

    points: Tuple[ParetoPoint, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def objectives(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 2))
        return np.array([p.objectives for p in self.points])

    @property
    def run_ids(self) -> List[str]:
        return [p.run_id for p in self.points]


def _coerce(points) -> List[ParetoPoint]:
    if isinstance(points, Frontier):
        return list(points.points)
    if isinstance(points, np.ndarray):
        if points.ndim != 2:
            raise ValueError(f"expected an (n, T) array of objectives, got shape {points.shape}")
        return [ParetoPoint(tuple(row), str(i)) for i, row in enumerate(points)]
    out = []
    for i, p in enumerate(points):
        out.append(p if isinstance(p, ParetoPoint) else ParetoPoint(tuple(p), str(i)))
    return out


def _objectives(p: PointLike) -> np.ndarray:
    if isinstance(p, ParetoPoint):
        return np.asarray(p.objectives)
    return np.asarray(p, dtype=np.float64).ravel()


def dominates(a: PointLike, b: PointLike) -> bool:
    """``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    a, b = _objectives(a), _objectives(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot compare points with {a.size} and {b.size} objectives")
    return bool(np.all(a <= b) and np.any(a < b))


def non_dominated_mask(Y) -> np.ndarray:
    """Boolean mask of the rows of ``Y`` (n, T) not dominated by any other row.

    Exact duplicates never dominate each other, so copies of a frontier point
    are all kept. Two objectives use a sort-and-sweep; more use all pairs.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"expected an (n, T) array, got shape {Y.shape}")
    n, T = Y.shape
    if n == 0:
        return np.zeros(0, dtype=bool)
    if T != 2:
        return _mask_all_pairs(Y)

    order = np.lexsort((Y[:, 1], Y[:, 0]))
    keep = np.zeros(n, dtype=bool)
    best = np.inf  # smallest second objective seen at strictly smaller first objective
    i = 0
    while i < n:
        j = i
        x = Y[order[i], 0]
        while j < n and Y[order[j], 0] == x:
            j += 1
        group = order[i:j]
        low = Y[group[0], 1]  # group is sorted by the second objective
        if low < best:
            keep[group[Y[group, 1] == low]] = True
            best = low
        i = j
    return keep


def _mask_all_pairs(Y):
    le = np.all(Y[:, None, :] <= Y[None, :, :], axis=2)
    lt = np.any(Y[:, None, :] < Y[None, :, :], axis=2)
    dominated_by = le & lt  # [i, j]: i dominates j
    return ~dominated_by.any(axis=0)


def pareto_filter(points) -> Frontier:
    """Non-dominated subset of ``points`` (ParetoPoints, sequences or an (n, T) array)."""
    pts = _coerce(points)
    if not pts:
        raise ValueError("pareto_filter needs at least one point")
    sizes = {len(p) for p in pts}
    if len(sizes) != 1:
        raise ValueError(f"points have different numbers of objectives: {sorted(sizes)}")
    Y = np.array([p.objectives for p in pts])
    keep = np.flatnonzero(non_dominated_mask(Y))
    keep = keep[np.lexsort(Y[keep].T[::-1])]
    return Frontier(tuple(pts[i] for i in keep))


def hypervolume_2d(frontier, ref) -> float:
    """Area dominated by a two-objective frontier and bounded by ``ref``.

    Points not weakly below ``ref`` in both coordinates are dropped with a
    warning; an empty remainder gives 0 (also with a warning).
    """
    Y = pareto_filter(frontier).objectives if len(_coerce(frontier)) else np.zeros((0, 2))
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if ref.shape != (2,) or (Y.size and Y.shape[1] != 2):
        raise ValueError("hypervolume_2d works on two objectives only")
    inside = np.all(Y <= ref, axis=1)
    if not inside.all():
        warnings.warn(f"{int((~inside).sum())} point(s) outside the reference box were ignored", RuntimeWarning)
        Y = Y[inside]
    if len(Y) == 0:
        warnings.warn("empty frontier: hypervolume is 0", RuntimeWarning)
        return 0.0
    Y = Y[np.lexsort((Y[:, 1], Y[:, 0]))]
    xs = np.append(Y[1:, 0], ref[0])
    return float(np.sum((xs - Y[:, 0]) * (ref[1] - Y[:, 1])))


def shared_reference(*frontiers, margin: float = 1.1) -> np.ndarray:
    """Componentwise max over all points of all frontiers, scaled by ``margin``."""
    rows = [Frontier(tuple(_coerce(f))).objectives for f in frontiers]
    rows = [r for r in rows if len(r)]
    if not rows:
        raise ValueError("no points to build a reference from")
    hi = np.max(np.vstack(rows), axis=0)
    # for non-negative objectives this is exactly hi * margin
    return hi + (margin - 1.0) * np.abs(hi)


class ConvexityResult(NamedTuple):
    convex: bool
    violations: List[Tuple[int, int, int, float]]  # (left, middle, right, height above chord)


def convexity_check(frontier, tol: float = 1e-9) -> ConvexityResult:
    """Check that each interior frontier point lies on or below the chord of its neighbours.

    Points are taken in order of the first objective; repeated first-objective
    values are collapsed. A polyline is convex exactly when every consecutive
    triple is, so neighbours suffice. Fewer than three points is trivially
    convex.
    """
    Y = pareto_filter(frontier).objectives
    if Y.shape[1] != 2:
        raise ValueError("convexity_check works on two objectives only")
    _, first = np.unique(Y[:, 0], return_index=True)
    Y = Y[np.sort(first)]
    violations = []
    for i in range(1, len(Y) - 1):
        (x0, y0), (x1, y1), (x2, y2) = Y[i - 1], Y[i], Y[i + 1]
        chord = y0 + (y2 - y0) * (x1 - x0) / (x2 - x0)
        excess = y1 - chord
        if excess > tol:
            violations.append((i - 1, i, i + 1, float(excess)))
    return ConvexityResult(not violations, violations)


def interpolation_frontier(Y1, Y2, lambdas) -> np.ndarray:
    """Sum-of-squares losses of ``f = lam*Y1 + (1-lam)*Y2`` against each target.

    Returns a (len(lambdas), 2) array of ``(|Y1 - f|^2, |Y2 - f|^2)``; along
    it ``sqrt(L1) + sqrt(L2) == |Y1 - Y2|``.
    """
    Y1 = np.asarray(Y1, dtype=np.float64).ravel()
    Y2 = np.asarray(Y2, dtype=np.float64).ravel()
    if Y1.shape != Y2.shape:
        raise ValueError(f"targets differ in length: {Y1.size} vs {Y2.size}")
    lam = np.asarray(lambdas, dtype=np.float64).ravel()
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("interpolation weights must lie in [0, 1]")
    F = lam[:, None] * Y1 + (1 - lam[:, None]) * Y2
    return np.stack([((Y1 - F) ** 2).sum(axis=1), ((Y2 - F) ** 2).sum(axis=1)], axis=1)


MIDDLE_POINT_RULE = "closest to the diagonal after min-max normalisation of each objective"


def middle_point(frontier) -> ParetoPoint:
    """The frontier point nearest the 45-degree line in min-max normalised objective space."""
    front = pareto_filter(frontier)
    Y = front.objectives
    lo, span = Y.min(axis=0), np.ptp(Y, axis=0)
    Z = np.divide(Y - lo, span, out=np.zeros_like(Y), where=span > 0)
    dist = np.abs(Z[:, 0] - Z[:, 1])
    return front.points[int(np.argmin(dist))]


def error_rate(accuracy):
    """Accuracy in [0, 1] to error rate."""
    acc = np.asarray(accuracy, dtype=np.float64)
    if np.any((acc < 0) | (acc > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    return 1.0 - acc


def write_frontier_csv(frontier: Frontier, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRONTIER_COLUMNS)
        for p in frontier:
            if len(p) != 2:
                raise ValueError("frontier CSV holds two objectives")
            w.writerow([repr(p.objectives[0]), repr(p.objectives[1]), p.run_id])
    return path


def read_frontier_csv(path) -> Frontier:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != FRONTIER_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(FRONTIER_COLUMNS)}")
    return Frontier(tuple(ParetoPoint((float(a), float(b)), rid) for a, b, rid in rows[1:]))
